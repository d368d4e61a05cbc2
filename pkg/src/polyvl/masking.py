"""Training batch corruption: masked tokens, masked regions, matching pairs.

Selection is independent Bernoulli per token/region, so observed rates match
the configured ones in expectation rather than exactly per batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DataError
from .streams import (
    CLS_ID,
    IMG_ID,
    MASK_ID,
    N_SPECIAL,
    PAD_ID,
    MultimodalStream,
    RegionBatch,
    TextBatch,
    Tokenizer,
)

IGNORE_INDEX = -100

MLM_RATE = 0.15
MLM_MASK_PROB = 0.8     # of the selected tokens
MLM_RANDOM_PROB = 0.1
MRM_RATE = 0.15
MRM_ZERO_PROB = 0.9


@dataclass
class MlmMaskedBatch:
    input_ids: np.ndarray       # (B, T) with corrupted entries
    language_ids: np.ndarray    # (B, T)
    attention_mask: np.ndarray  # (B, T) bool
    labels: np.ndarray          # (B, T), original ids at chosen positions, IGNORE elsewhere

    @property
    def masked_positions(self) -> np.ndarray:
        return self.labels != IGNORE_INDEX


def apply_mlm_masking(
    batch: TextBatch,
    tok: Tokenizer,
    rate: float = MLM_RATE,
    rng: Optional[np.random.Generator] = None,
) -> MlmMaskedBatch:
    """Select eligible tokens with prob `rate`; mask 80%, randomize 10%, keep 10%.

    CLS, IMG and padding are never selected. Random replacements draw uniformly
    from the non-special vocabulary.
    """
    if not 0.0 <= rate <= 1.0:
        raise DataError(f"mask rate {rate} outside [0, 1]")
    rng = rng if rng is not None else np.random.default_rng()
    ids = batch.input_ids
    eligible = batch.attention_mask & (ids != CLS_ID) & (ids != IMG_ID) & (ids != PAD_ID)

    # Full-shape draws keep rng consumption independent of batch content.
    selected = eligible & (rng.random(ids.shape) < rate)
    action = rng.random(ids.shape)
    random_ids = rng.integers(N_SPECIAL, tok.vocab_size, size=ids.shape)

    corrupted = ids.copy()
    corrupted[selected & (action < MLM_MASK_PROB)] = MASK_ID
    randomize = selected & (action >= MLM_MASK_PROB) & (action < MLM_MASK_PROB + MLM_RANDOM_PROB)
    corrupted[randomize] = random_ids[randomize]
    # remaining selected positions keep their original token

    labels = np.full(ids.shape, IGNORE_INDEX, dtype=np.int64)
    labels[selected] = ids[selected]
    return MlmMaskedBatch(
        input_ids=corrupted,
        language_ids=batch.language_ids.copy(),
        attention_mask=batch.attention_mask.copy(),
        labels=labels,
    )


@dataclass
class MrmMaskedBatch:
    features: np.ndarray        # (B, N, d_v), masked rows zeroed or kept
    spatial: np.ndarray         # (B, N, 5), never masked
    region_mask: np.ndarray     # (B, N) bool, valid regions
    masked: np.ndarray          # (B, N) bool, regions to reconstruct
    target_features: list[np.ndarray]  # per item, (m_i, d_v) originals
    target_classes: list[np.ndarray]   # per item, (m_i,) class ids

    @property
    def mask_indices(self) -> list[np.ndarray]:
        return [np.flatnonzero(row) for row in self.masked]

    def restore(self) -> np.ndarray:
        """Write targets back over masked rows; equals the original matrix bit-exactly."""
        restored = self.features.copy()
        for i, idx in enumerate(self.mask_indices):
            restored[i, idx] = self.target_features[i]
        return restored


def apply_mrm_masking(
    regions: RegionBatch,
    rate: float = MRM_RATE,
    zero_prob: float = MRM_ZERO_PROB,
    rng: Optional[np.random.Generator] = None,
) -> MrmMaskedBatch:
    """Select valid regions with prob `rate`; zero the feature row with prob `zero_prob`.

    Kept rows are still reconstruction targets. An item may end up with zero
    masked regions; it then contributes nothing to the loss.
    """
    if not 0.0 <= rate <= 1.0 or not 0.0 <= zero_prob <= 1.0:
        raise DataError("mask probabilities must lie in [0, 1]")
    rng = rng if rng is not None else np.random.default_rng()
    masked = regions.mask & (rng.random(regions.mask.shape) < rate)
    zeroed = masked & (rng.random(regions.mask.shape) < zero_prob)

    features = regions.features.copy()
    features[zeroed] = 0.0
    return MrmMaskedBatch(
        features=features,
        spatial=regions.spatial.copy(),
        region_mask=regions.mask.copy(),
        masked=masked,
        target_features=[regions.features[i, np.flatnonzero(row)].copy()
                         for i, row in enumerate(masked)],
        target_classes=[regions.class_ids[i, np.flatnonzero(row)].copy()
                        for i, row in enumerate(masked)],
    )


@dataclass
class VlmPairBatch:
    pairs: list[MultimodalStream]
    labels: np.ndarray            # (P,) in {0, 1}
    source_index: np.ndarray      # (P,) originating positive
    corrupted_side: list[Optional[str]]   # None | "image" | "text"
    replacement_index: np.ndarray # (P,), -1 for positives

    def __len__(self) -> int:
        return len(self.pairs)


def sample_vlm_pairs(
    positives: list[MultimodalStream],
    negatives_per_positive: int = 1,
    rng: Optional[np.random.Generator] = None,
) -> VlmPairBatch:
    """Each positive, then its negatives made by swapping one side with another sample's."""
    if len(positives) < 2:
        raise DataError("need at least two positives to draw negatives")
    if negatives_per_positive < 1:
        raise DataError("negatives_per_positive must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()

    pairs, labels, source, sides, repl = [], [], [], [], []
    n = len(positives)
    for i, pos in enumerate(positives):
        pairs.append(MultimodalStream(
            text=pos.text,
            region_features=pos.region_features,
            region_spatial=pos.region_spatial,
            region_class_ids=pos.region_class_ids,
            label=1,
        ))
        labels.append(1)
        source.append(i)
        sides.append(None)
        repl.append(-1)
        for _ in range(negatives_per_positive):
            other = int(rng.integers(0, n - 1))
            if other >= i:
                other += 1
            side = "image" if rng.random() < 0.5 else "text"
            donor = positives[other]
            if side == "image":
                neg = MultimodalStream(
                    text=pos.text,
                    region_features=donor.region_features,
                    region_spatial=donor.region_spatial,
                    region_class_ids=donor.region_class_ids,
                    label=0,
                )
            else:
                neg = MultimodalStream(
                    text=donor.text,
                    region_features=pos.region_features,
                    region_spatial=pos.region_spatial,
                    region_class_ids=pos.region_class_ids,
                    label=0,
                )
            pairs.append(neg)
            labels.append(0)
            source.append(i)
            sides.append(side)
            repl.append(other)

    return VlmPairBatch(
        pairs=pairs,
        labels=np.array(labels, dtype=np.int64),
        source_index=np.array(source, dtype=np.int64),
        corrupted_side=sides,
        replacement_index=np.array(repl, dtype=np.int64),
    )
