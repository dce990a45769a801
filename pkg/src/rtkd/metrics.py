"""Classification metrics: top-1 accuracy and one-vs-rest ROC-AUC."""

from __future__ import annotations

import numpy as np

from .errors import DataError


def accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise DataError(f"scores {scores.shape} and labels {labels.shape} do not align")
    return float(np.mean(scores.argmax(axis=1) == labels))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned their group's average rank."""
    n = len(x)
    sorter = np.argsort(x, kind="mergesort")
    sx = x[sorter]
    group_start = np.r_[True, sx[1:] != sx[:-1]]
    starts = np.nonzero(group_start)[0]
    ends = np.r_[starts[1:], n]
    avg = (starts + 1 + ends) / 2.0
    dense = np.cumsum(group_start) - 1
    ranks = np.empty(n, dtype=np.float64)
    ranks[sorter] = avg[dense]
    return ranks


def _binary_auc(y: np.ndarray, s: np.ndarray) -> float:
    """Rank-statistic AUC; tied scores contribute 1/2 per pair."""
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = _average_ranks(s.astype(np.float64))
    pos_rank_sum = ranks[y].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """One-vs-rest AUC per class plus the micro-average over all
    (sample, class) binary decisions.

    Rows of ``scores`` must be probability vectors (sum to 1 within 1e-4).
    A class with no positive or no negative examples gets NaN, which callers
    exclude from averages.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise DataError(f"scores {scores.shape} and labels {labels.shape} do not align")
    sums = scores.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-4:
        worst = float(np.abs(sums - 1.0).max())
        raise DataError(f"score rows must sum to 1 within 1e-4 (worst deviation {worst:.2e})")
    n, k = scores.shape
    onehot = np.zeros((n, k), dtype=bool)
    onehot[np.arange(n), labels] = True
    per_class = np.array([_binary_auc(onehot[:, c], scores[:, c]) for c in range(k)])
    micro = _binary_auc(onehot.reshape(-1), scores.reshape(-1))
    return micro, per_class
