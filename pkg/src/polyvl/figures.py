"""Figure rendering for the report paths: loss curves, recall bars, sweep charts.

Every figure is written next to its delimited (TSV/JSONL) counterpart so runs
are inspectable without re-loading anything.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .objectives import LossReport  # noqa: E402
from .retrieval import MeanRecallReport  # noqa: E402

RECALL_COLUMNS = ("i2t_r1", "i2t_r5", "i2t_r10", "t2i_r1", "t2i_r5", "t2i_r10", "mean_recall")


def save_loss_curves(trace: list[LossReport], path) -> None:
    """Per-task loss curves plus total, one line per task."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    by_task: dict[str, tuple[list[int], list[float]]] = {}
    for report in trace:
        for task, value in report.losses.items():
            xs, ys = by_task.setdefault(task, ([], []))
            xs.append(report.step)
            ys.append(value)

    fig, ax = plt.subplots(figsize=(7, 4))
    for task in sorted(by_task):
        xs, ys = by_task[task]
        ax.plot(xs, ys, label=task, linewidth=1.0)
    ax.plot([r.step for r in trace], [r.total for r in trace],
            label="total", color="black", linewidth=1.5, alpha=0.7)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_recall_tsv(reports: dict[str, MeanRecallReport], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("language\t" + "\t".join(RECALL_COLUMNS) + "\n")
        for lang in sorted(reports):
            row = reports[lang].to_dict()
            fh.write(lang + "\t" + "\t".join(f"{row[c]:.2f}" for c in RECALL_COLUMNS) + "\n")


def save_recall_bars(reports: dict[str, MeanRecallReport], path, title: str = "") -> None:
    """Grouped recall bars per language with mR drawn as a marker."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    languages = sorted(reports)
    metrics = RECALL_COLUMNS[:-1]
    width = 0.8 / len(metrics)

    fig, ax = plt.subplots(figsize=(1.8 + 1.6 * len(languages), 4))
    for j, metric in enumerate(metrics):
        xs = [i + j * width for i in range(len(languages))]
        ys = [getattr(reports[lang], metric) for lang in languages]
        ax.bar(xs, ys, width=width, label=metric)
    centers = [i + 0.4 - width / 2 for i in range(len(languages))]
    ax.plot(centers, [reports[lang].mean_recall for lang in languages],
            "ko", label="mean_recall")
    ax.set_xticks(centers)
    ax.set_xticklabels(languages)
    ax.set_ylabel("recall (%)")
    ax.set_ylim(0, 105)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7, ncol=4)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_sweep_tsv(rows: list[dict], languages: list[str], path) -> None:
    """Variant-by-language mean-Recall table; rows carry their config hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("variant\tconfig_hash\t" + "\t".join(languages) + "\n")
        for row in rows:
            cells = "\t".join(f"{row['mean_recall'][lang]:.2f}" for lang in languages)
            fh.write(f"{row['variant']}\t{row['config_hash']}\t{cells}\n")


def save_sweep_chart(rows: list[dict], languages: list[str], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    width = 0.8 / max(1, len(rows))

    fig, ax = plt.subplots(figsize=(2 + 1.4 * len(languages), 4))
    for j, row in enumerate(rows):
        xs = [i + j * width for i in range(len(languages))]
        ys = [row["mean_recall"][lang] for lang in languages]
        ax.bar(xs, ys, width=width, label=row["variant"])
    centers = [i + 0.4 - width / 2 for i in range(len(languages))]
    ax.set_xticks(centers)
    ax.set_xticklabels(languages)
    ax.set_ylabel("mean recall (%)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
