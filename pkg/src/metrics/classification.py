"""
Top-k accuracy.
"""

import numpy as np

from src.core.errors import DataError


def top_k_accuracy(probs: np.ndarray, labels: np.ndarray, k: int) -> float:
    """
    Fraction of rows whose label ranks among the k largest scores. Equal
    scores rank the lower class index first; k larger than the class count
    is clamped.
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels).astype(np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise DataError(f"top-k needs scores [N, M] and labels [N], got {probs.shape} / {labels.shape}")
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    n, m = probs.shape
    if n == 0:
        raise DataError("top-k over zero samples")
    bad = (labels < 0) | (labels >= m)
    if bad.any():
        raise DataError(f"label {int(labels[bad][0])} outside [0, {m})")
    k = min(k, m)
    # stable sort on the negated scores keeps lower indices first among ties
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    hits = (order == labels[:, None]).any(axis=1)
    return float(hits.mean())
