"""Matplotlib renderers for the three figure kinds.

Each function takes already-parsed data and returns the Figure so tests can
inspect annotations before anything is written. Saving goes through
save_figure, which strips renderer timestamps so identical inputs produce
identical bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

matplotlib.rcParams["svg.hashsalt"] = "papnet-plots"

CLASS_NAMES = ("Normal", "Abnormal")
METRIC_LABELS = {
    "accuracy": "Accuracy",
    "precision_weighted": "Precision",
    "recall_weighted": "Recall",
    "f1_weighted": "F1-score",
}


def save_figure(fig, path, fmt: str, dpi: int) -> None:
    metadata = {"Date": None} if fmt == "svg" else {"Software": None}
    fig.savefig(path, format=fmt, dpi=dpi, metadata=metadata, bbox_inches="tight")
    plt.close(fig)


def plot_confusion(matrix: dict, mode: str):
    """2x2 annotated heatmap. ``matrix`` holds tp/fn/fp/tn counts with
    Abnormal as the positive class; rows are the true classes."""
    grid = np.array([[matrix["tn"], matrix["fp"]],
                     [matrix["fn"], matrix["tp"]]], dtype=float)
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(grid, cmap="Blues")
    for i in range(2):
        for j in range(2):
            color = "white" if grid[i, j] > grid.max() / 2 else "black"
            ax.text(j, i, f"{int(grid[i, j])}", ha="center", va="center",
                    color=color, fontsize=14)
    ax.set_xticks([0, 1], CLASS_NAMES)
    ax.set_yticks([0, 1], CLASS_NAMES)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("True")
    ax.set_title(f"Confusion matrix ({mode})")
    fig.colorbar(im, ax=ax, fraction=0.046)
    return fig


def plot_training_curves(epoch_rows: list[dict], mode: str):
    """One validation-accuracy line per fold; single-epoch logs show markers."""
    folds = sorted({int(r["fold"]) for r in epoch_rows})
    fig, ax = plt.subplots(figsize=(5.4, 3.6))
    for fold in folds:
        rows = sorted((r for r in epoch_rows if int(r["fold"]) == fold),
                      key=lambda r: int(r["epoch"]))
        xs = [int(r["epoch"]) + 1 for r in rows]
        ys = [float(r["val_acc"]) for r in rows]
        style = "o-" if len(xs) > 1 else "o"
        ax.plot(xs, ys, style, label=f"fold {fold + 1}", markersize=4)
    ax.set_xlabel("Epoch")
    ax.set_ylabel("Validation accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.set_title(f"Training accuracy ({mode})")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return fig


def plot_comparison(rows: list[dict]):
    """Grouped bars, raw vs segmented, for the four weighted metrics, with the
    percentage-point delta printed above each pair."""
    labels = [METRIC_LABELS.get(r["metric"], r["metric"]) for r in rows]
    raw = [float(r["raw_pooled"]) * 100 for r in rows]
    seg = [float(r["segmented_pooled"]) * 100 for r in rows]
    deltas = [float(r["delta_pooled_pp"]) for r in rows]
    x = np.arange(len(rows))
    width = 0.38
    fig, ax = plt.subplots(figsize=(6.0, 3.8))
    ax.bar(x - width / 2, raw, width, label="non-segmented")
    ax.bar(x + width / 2, seg, width, label="segmented")
    for xi, r, s, d in zip(x, raw, seg, deltas):
        ax.text(xi, max(r, s) + 1.0, f"{d:+.2f}", ha="center", fontsize=8)
    ax.set_xticks(x, labels)
    ax.set_ylabel("Percent")
    ax.set_ylim(0, 105)
    ax.set_title("Pooled metrics by pipeline")
    ax.legend(fontsize=8)
    return fig
