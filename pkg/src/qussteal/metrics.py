"""Patch-wise classification metrics."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import ArgumentError


def compute_auc(scores, labels) -> float:
    """Area under the ROC curve as the Mann-Whitney statistic (ties count 1/2)."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ArgumentError(f"{s.size} scores for {y.size} labels")
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((y == 0).sum())
    if n_pos + n_neg != y.size:
        raise ArgumentError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise ArgumentError("AUC needs both classes present")
    ranks = rankdata(s)  # midranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Percent of patches whose thresholded score equals the label."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.size == 0:
        raise ArgumentError("accuracy of an empty set is undefined")
    return float(100.0 * np.mean((s > threshold).astype(int) == y))
