"""Ranking metrics for anomaly scores (label 1 = anomaly)."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def _validate(scores, labels, need_negatives: bool):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    if not np.any(labels == 1):
        raise ValueError("no positive (anomaly) labels")
    if need_negatives and not np.any(labels == 0):
        raise ValueError("no negative (inlier) labels")
    return scores, labels


def precision_recall_points(scores, labels):
    """Precision and recall after each rank of a descending, stable sort.

    Returns ``(threshold, precision, recall, is_positive)`` arrays of length n.
    """
    scores, labels = _validate(scores, labels, need_negatives=False)
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    tp = np.cumsum(hits)
    ranks = np.arange(1, len(hits) + 1)
    return scores[order], tp / ranks, tp / hits.sum(), hits.astype(bool)


def average_precision(scores, labels) -> float:
    """Mean of precision@rank over the ranks holding positives (not interpolated)."""
    _, precision, _, pos = precision_recall_points(scores, labels)
    return float(precision[pos].mean())


def ap_from_pr_points(precision, recall) -> float:
    """Re-integrate ``sum (R_k - R_{k-1}) P_k`` over a per-rank PR table."""
    recall = np.asarray(recall, dtype=np.float64)
    precision = np.asarray(precision, dtype=np.float64)
    step = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(step * precision))


def auroc(scores, labels) -> float:
    """Mann-Whitney U / (n_pos * n_neg) with average ranks for ties."""
    scores, labels = _validate(scores, labels, need_negatives=True)
    ranks = rankdata(scores)
    n_pos = labels.sum()
    n_neg = len(labels) - n_pos
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
