"""
Confusion matrices and the segmentation metrics derived from them.

counts[i, j] counts true class i predicted as j.
"""

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from src.core.errors import DataError

IGNORE_INDEX = 255


@dataclass
class ConfusionMatrix:
    k: int
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.k < 1:
            raise DataError(f"confusion matrix needs k >= 1, got {self.k}")
        if self.counts is None:
            self.counts = np.zeros((self.k, self.k), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.k != self.k:
            raise DataError(f"cannot merge {self.k}-class and {other.k}-class matrices")
        return ConfusionMatrix(self.k, self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, preds: np.ndarray, labels: np.ndarray,
               ignore_index: int = IGNORE_INDEX) -> ConfusionMatrix:
    """Add (pred, label) pairs; pairs whose label is `ignore_index` are skipped."""
    preds = np.asarray(preds).ravel().astype(np.int64)
    labels = np.asarray(labels).ravel().astype(np.int64)
    if preds.shape != labels.shape:
        raise DataError(f"{preds.size} predictions vs {labels.size} labels")
    keep = labels != ignore_index
    preds, labels = preds[keep], labels[keep]
    for name, values in (("label", labels), ("prediction", preds)):
        bad = (values < 0) | (values >= cm.k)
        if bad.any():
            raise DataError(f"{name} {int(values[bad][0])} outside [0, {cm.k})")
    flat = np.bincount(labels * cm.k + preds, minlength=cm.k * cm.k)
    return ConfusionMatrix(cm.k, cm.counts + flat.reshape(cm.k, cm.k))


def _require_total(cm: ConfusionMatrix) -> None:
    if cm.total == 0:
        raise DataError("metrics need a non-empty confusion matrix")


def miou(cm: ConfusionMatrix) -> Tuple[List[float], float]:
    """
    Per-class IoU p_ii / (Σ_j p_ij + Σ_j p_ji − p_ii) and their mean over
    classes that occur in labels or predictions. Absent classes report NaN.
    """
    _require_total(cm)
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    union = c.sum(axis=1) + c.sum(axis=0) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    present = union > 0
    return iou.tolist(), float(iou[present].mean())


def macc_aacc(cm: ConfusionMatrix) -> Tuple[float, float]:
    """(mean per-class recall over classes with ground truth, overall accuracy)."""
    _require_total(cm)
    c = cm.counts.astype(np.float64)
    support = c.sum(axis=1)
    present = support > 0
    recall = np.diag(c)[present] / support[present]
    return float(recall.mean()), float(np.trace(c) / c.sum())
