"""Central finite-difference gradient checking against autograd."""

import numpy as np
import torch


def sample_parameter_coordinates(model, fraction, rng, min_count=8):
    """A random sample of (name, parameter, flat index) over all weights."""
    named = list(model.named_parameters())
    sizes = [p.numel() for _, p in named]
    total = sum(sizes)
    k = max(min_count, int(round(total * fraction)))
    flat = rng.choice(total, size=min(k, total), replace=False)
    offsets = np.cumsum([0] + sizes)
    coords = []
    for f in sorted(int(x) for x in flat):
        pi = int(np.searchsorted(offsets, f, side="right") - 1)
        coords.append((named[pi][0], named[pi][1], f - int(offsets[pi])))
    return coords


def central_difference(loss_fn, param, index, step):
    with torch.no_grad():
        flat = param.view(-1)
        orig = flat[index].item()
        flat[index] = orig + step
        up = float(loss_fn())
        flat[index] = orig - step
        down = float(loss_fn())
        flat[index] = orig
    return (up - down) / (2.0 * step)


def max_relative_error(model, loss_fn, fraction=0.01, step=1e-5, seed=0, floor=1e-4):
    """Worst relative disagreement between autograd and central differences.

    The denominator is floored so gradients smaller than `floor` are compared
    absolutely (finite differences bottom out near 1e-11 at double precision).
    """
    model.zero_grad(set_to_none=True)
    loss = loss_fn()
    loss.backward()
    grads = {name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
             for name, p in model.named_parameters()}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, param, idx in sample_parameter_coordinates(model, fraction, rng):
        analytic = float(grads[name].view(-1)[idx])
        numeric = central_difference(loss_fn, param, idx, step)
        denom = max(abs(analytic), abs(numeric), floor)
        worst = max(worst, abs(analytic - numeric) / denom)
    model.zero_grad(set_to_none=True)
    return worst
