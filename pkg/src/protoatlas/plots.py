"""Figure output for the report path: per-class curve plots (value vs k)
written as image files next to the delimited records."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

MARKERS = ["o", "s", "^", "v", "D", "P", "*", "X", "<", ">"]


def curve_figure(curves: dict[int, list[float]], class_names: list[str],
                 ylabel: str, reference_line: bool = False):
    fig, ax = plt.subplots(figsize=(6, 4.2))
    ks = None
    for i, (class_id, values) in enumerate(sorted(curves.items())):
        ks = list(range(1, len(values) + 1))
        ax.plot(ks, values, marker=MARKERS[i % len(MARKERS)],
                label=class_names[class_id])
    if reference_line and ks:
        ax.plot(ks, ks, linestyle="--", color="gray", linewidth=1,
                label="one image per prototype")
    ax.set_xlabel("k (position in evidence order)")
    ax.set_ylabel(ylabel)
    if ks:
        ax.set_xticks(ks)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


def save_curve_plot(curves: dict[int, list[float]], class_names: list[str],
                    ylabel: str, path: str | Path, reference_line: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig = curve_figure(curves, class_names, ylabel, reference_line)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_loss_plot(history: list[dict], path: str | Path) -> Path:
    """Per-epoch loss components from a metrics.jsonl-style record list."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4.2))
    epochs = [r["epoch"] for r in history]
    for key in ("total", "crsent", "clst", "sep", "div"):
        ax.plot(epochs, [r[key] for r in history], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
