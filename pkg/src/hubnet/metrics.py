"""Evaluation metrics: average precision, accuracy, cross-modal alignment.

Average precision walks the distinct score values from high to low and
accumulates precision * recall-increment per threshold group, so tied
scores contribute the precision at the end of their group. With all
scores equal this reduces to the class prevalence; with distinct scores
it is the usual rank-precision sum.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .hub import np_cosine


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """AP of one ranking; labels are 0/1 and at least one must be positive."""
    s = np.asarray(scores, dtype=float).reshape(-1)
    y = np.asarray(labels, dtype=float).reshape(-1)
    if s.shape != y.shape:
        raise ShapeError(f"scores {s.shape} vs labels {y.shape}")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("average_precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s = s[order]
    y = y[order]
    ap = 0.0
    tp = 0.0
    seen = 0
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            j += 1
        group_tp = float(y[i:j].sum())
        tp += group_tp
        seen = j
        if group_tp > 0.0:
            ap += (group_tp / n_pos) * (tp / seen)
        i = j
    return ap


def mean_average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean AP over classes that have at least one positive (others skipped)."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=float)
    if s.shape != y.shape or s.ndim != 2:
        raise ShapeError(f"scores {s.shape} vs labels {y.shape}")
    aps = [
        average_precision(s[:, c], y[:, c])
        for c in range(s.shape[1])
        if y[:, c].sum() > 0
    ]
    if not aps:
        return 0.0
    return float(np.mean(aps))


def accuracy(predicted: list[int], actual: list[int]) -> float:
    if len(predicted) != len(actual) or not predicted:
        raise ShapeError(f"{len(predicted)} predictions vs {len(actual)} targets")
    return sum(p == a for p, a in zip(predicted, actual)) / len(predicted)


def alignment(vis: np.ndarray, key: np.ndarray) -> float:
    """Mean cosine similarity of aligned cross-modal embedding rows."""
    if vis.shape != key.shape or vis.ndim != 2:
        raise ShapeError(f"embedding shapes disagree: {vis.shape} vs {key.shape}")
    return float(np.mean([np_cosine(vis[i], key[i]) for i in range(vis.shape[0])]))
