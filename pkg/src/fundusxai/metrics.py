"""Classification metrics: ROC AUC with midrank ties, confusion metrics,
reliability bins and expected calibration error.

Degenerate cases (single-class inputs, zero-denominator rates) surface as
explicit undefined flags rather than silently collapsing to 0.5 or 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SingleClassError(ValueError):
    """AUC is undefined without at least one positive and one negative."""


def _check_scored(labels, scores):
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise ValueError("labels and scores must be equal-length 1-D arrays")
    if labels.size == 0:
        raise ValueError("empty sample set")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0/1")
    return labels.astype(np.int64), scores


def _doubled_midranks(scores: np.ndarray) -> np.ndarray:
    """2x the midranks of ``scores`` as exact integers (ties get average rank)."""
    order = np.argsort(scores, kind="stable")
    ranked = scores[order]
    doubled = np.empty(scores.size, dtype=np.int64)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and ranked[j + 1] == ranked[i]:
            j += 1
        doubled[order[i : j + 1]] = i + j + 2  # 2 * mean of 1-based ranks i+1..j+1
        i = j + 1
    return doubled


def roc_auc(labels, scores) -> float:
    """Mann-Whitney AUC with midrank tie handling.

    The rank statistic is accumulated in exact integer arithmetic and mapped
    to a float through ``min(u, d-u)/d`` and its complement, which makes
    ``roc_auc(s) + roc_auc(1 - s) == 1.0`` hold exactly in float64.
    """
    labels, scores = _check_scored(labels, scores)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError(f"need both classes, got {n_pos} positives / {n_neg} negatives")
    doubled = _doubled_midranks(scores)
    u2 = int(doubled[labels == 1].sum()) - n_pos * (n_pos + 1)  # 2 * U statistic
    d2 = 2 * n_pos * n_neg
    low = min(u2, d2 - u2)
    q = low / d2
    return q if u2 == low else 1.0 - q


@dataclass(frozen=True)
class TaskMetrics:
    """Threshold-free and thresholded metrics for one binary task."""

    auc: float
    accuracy: float
    sensitivity: float
    specificity: float
    f1: float
    n: int
    n_positive: int
    auc_defined: bool
    sensitivity_defined: bool
    specificity_defined: bool
    f1_defined: bool


def confusion_metrics(labels, scores, threshold: float = 0.5) -> TaskMetrics:
    """Thresholded metrics (predict positive iff score >= threshold).

    Rates with a zero denominator are reported as 0 with their defined flag
    cleared; AUC is attached when both classes are present.
    """
    labels, scores = _check_scored(labels, scores)
    pred = (scores >= threshold).astype(np.int64)
    tp = int(np.sum((pred == 1) & (labels == 1)))
    tn = int(np.sum((pred == 0) & (labels == 0)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    n = labels.size
    n_pos = tp + fn

    sens_def = (tp + fn) > 0
    spec_def = (tn + fp) > 0
    f1_def = (2 * tp + fp + fn) > 0
    try:
        auc = roc_auc(labels, scores)
        auc_def = True
    except SingleClassError:
        auc = 0.0
        auc_def = False
    return TaskMetrics(
        auc=auc,
        accuracy=(tp + tn) / n,
        sensitivity=tp / (tp + fn) if sens_def else 0.0,
        specificity=tn / (tn + fp) if spec_def else 0.0,
        f1=2 * tp / (2 * tp + fp + fn) if f1_def else 0.0,
        n=n,
        n_positive=n_pos,
        auc_defined=auc_def,
        sensitivity_defined=sens_def,
        specificity_defined=spec_def,
        f1_defined=f1_def,
    )


@dataclass(frozen=True)
class CalibrationBins:
    """Equal-width reliability bins over [0, 1]; the last bin is closed.

    ``mean_pred`` and ``obs_frac`` are 0 in empty bins (``counts`` tells them
    apart); ``ece`` is the count-weighted mean |mean_pred - obs_frac| over
    nonempty bins.
    """

    edges: np.ndarray          # (n_bins + 1,)
    counts: np.ndarray         # (n_bins,) int
    mean_pred: np.ndarray      # (n_bins,)
    obs_frac: np.ndarray       # (n_bins,)
    ece: float

    @property
    def n(self) -> int:
        return int(self.counts.sum())


def reliability_bins(labels, scores, n_bins: int = 10) -> CalibrationBins:
    labels, scores = _check_scored(labels, scores)
    if np.any(scores < 0) or np.any(scores > 1):
        raise ValueError("scores must lie in [0, 1]")
    idx = np.minimum((scores * n_bins).astype(np.int64), n_bins - 1)
    counts = np.zeros(n_bins, dtype=np.int64)
    mean_pred = np.zeros(n_bins)
    obs_frac = np.zeros(n_bins)
    for b in range(n_bins):
        sel = idx == b
        counts[b] = int(sel.sum())
        if counts[b]:
            mean_pred[b] = float(scores[sel].mean())
            obs_frac[b] = float(labels[sel].mean())
    n = labels.size
    ece = float(np.sum(counts / n * np.abs(mean_pred - obs_frac)))
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    return CalibrationBins(edges, counts, mean_pred, obs_frac, ece)
