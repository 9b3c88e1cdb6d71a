"""Confusion-matrix metrics: macro precision, recall and mean IoU."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NUM_CLASSES = 4
CATEGORY_NAMES = ("background", "white_cloud", "gray_cloud", "sun")


@dataclass
class ConfusionMatrix:
    """Rows are ground-truth categories, columns predicted categories."""

    k: int = NUM_CLASSES
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.k, self.k), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp(self) -> np.ndarray:
        return np.diag(self.counts)

    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp()

    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp()

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.k, self.counts + other.counts)


def confusion_accumulate(pred: np.ndarray, gt: np.ndarray, cm: ConfusionMatrix | None = None) -> ConfusionMatrix:
    cm = cm if cm is not None else ConfusionMatrix()
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction and ground truth sizes differ: {pred.size} vs {gt.size}")
    if pred.size == 0:
        return cm
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if arr.min() < 0 or arr.max() >= cm.k:
            raise ValueError(f"{name} label out of range 0..{cm.k - 1}")
    idx = gt.astype(np.int64) * cm.k + pred.astype(np.int64)
    cm.counts += np.bincount(idx, minlength=cm.k * cm.k).reshape(cm.k, cm.k)
    return cm


def _ratio(num: np.ndarray, den: np.ndarray, absent: np.ndarray) -> np.ndarray:
    # absent from both prediction and truth -> 1; otherwise an empty denominator means 0
    out = np.zeros(len(num))
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    out[absent] = 1.0
    return out


def per_class(cm: ConfusionMatrix) -> dict[str, np.ndarray]:
    tp, fp, fn = cm.tp(), cm.fp(), cm.fn()
    absent = (tp + fp + fn) == 0
    return {
        "precision": _ratio(tp, tp + fp, absent),
        "recall": _ratio(tp, tp + fn, absent),
        "iou": _ratio(tp, tp + fp + fn, absent),
    }


def metrics(cm: ConfusionMatrix) -> tuple[float, float, float]:
    """(P, R, MIoU), each the unweighted mean over categories."""
    if cm.total == 0:
        raise ValueError("cannot compute metrics from an empty confusion matrix")
    pc = per_class(cm)
    return float(pc["precision"].mean()), float(pc["recall"].mean()), float(pc["iou"].mean())


def metric_lines(cm: ConfusionMatrix) -> list[str]:
    """Machine-readable ``metric <name> <value>`` lines."""
    p, r, miou = metrics(cm)
    lines = [f"metric precision {p:.6f}", f"metric recall {r:.6f}", f"metric miou {miou:.6f}"]
    for name, iou in zip(CATEGORY_NAMES, per_class(cm)["iou"]):
        lines.append(f"metric iou_{name} {iou:.6f}")
    lines.append(f"metric pixels {cm.total}")
    return lines


def text_report(cm: ConfusionMatrix) -> str:
    pc = per_class(cm)
    rows = [f"{'category':<12} {'P':>7} {'R':>7} {'IoU':>7}"]
    for i, name in enumerate(CATEGORY_NAMES[: cm.k]):
        rows.append(f"{name:<12} {pc['precision'][i]:7.4f} {pc['recall'][i]:7.4f} {pc['iou'][i]:7.4f}")
    p, r, miou = metrics(cm)
    rows.append(f"{'mean':<12} {p:7.4f} {r:7.4f} {miou:7.4f}")
    rows.append("confusion (rows = truth, cols = predicted):")
    rows.extend("  " + " ".join(f"{v:8d}" for v in row) for row in cm.counts)
    return "\n".join(rows)
