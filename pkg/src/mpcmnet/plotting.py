"""Report figures rendered to files with the Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

from .metrics import CATEGORY_NAMES, ConfusionMatrix  # noqa: E402

LABEL_COLORS = ListedColormap(["#2b6cb0", "#f7fafc", "#718096", "#f6e05e"])


def loss_curve(history: Sequence[dict], path) -> Path:
    epochs = [r["epoch"] for r in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, [r["train_loss"] for r in history], label="train")
    ax1.plot(epochs, [r["val_loss"] for r in history], label="val")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("joint loss")
    ax1.set_yscale("log")
    ax1.legend()
    ax2.plot(epochs, [r["val_miou"] for r in history], color="tab:green")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("val MIoU")
    ax2.set_ylim(0, 1)
    fig.tight_layout()
    return _save(fig, path)


def confusion_heatmap(cm: ConfusionMatrix, path) -> Path:
    counts = cm.counts.astype(np.float64)
    rows = counts / np.maximum(counts.sum(axis=1, keepdims=True), 1)
    names = CATEGORY_NAMES[: cm.k]
    fig, ax = plt.subplots(figsize=(4.8, 4.2))
    im = ax.imshow(rows, cmap="Blues", vmin=0, vmax=1)
    ax.set_xticks(range(cm.k), names, rotation=30, ha="right")
    ax.set_yticks(range(cm.k), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("truth")
    for i in range(cm.k):
        for j in range(cm.k):
            ax.text(j, i, f"{rows[i, j]:.2f}", ha="center", va="center",
                    color="white" if rows[i, j] > 0.5 else "black", fontsize=8)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    return _save(fig, path)


def segmentation_grid(images: np.ndarray, truth: np.ndarray, pred: np.ndarray, path, max_rows: int = 4) -> Path:
    """Image / truth / prediction columns for the first ``max_rows`` samples."""
    n = min(len(images), max_rows)
    fig, axes = plt.subplots(n, 3, figsize=(6.5, 2.2 * n), squeeze=False)
    for i in range(n):
        panels = (np.clip(images[i].transpose(1, 2, 0), 0, 1), truth[i], pred[i])
        for j, (panel, title) in enumerate(zip(panels, ("image", "truth", "prediction"))):
            ax = axes[i, j]
            if j == 0:
                ax.imshow(panel)
            else:
                ax.imshow(panel, cmap=LABEL_COLORS, vmin=0, vmax=3, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
