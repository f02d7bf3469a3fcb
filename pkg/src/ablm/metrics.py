"""Evaluation metrics with explicit degenerate-case handling.

Every metric returns a plain float; pass ``with_flag=True`` to also learn
whether the value is a flagged 0 from a degenerate denominator (single
class, zero variance, empty confusion cell products).
"""

from __future__ import annotations

import numpy as np


def _maybe_flag(value: float, degenerate: bool, with_flag: bool):
    if with_flag:
        return value, degenerate
    return value


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    sx = x[order]
    i = 0
    n = len(x)
    while i < n:
        j = i
        while j + 1 < n and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc(scores, labels, *, with_flag: bool = False):
    """Area under the ROC curve via the rank (Mann-Whitney) statistic,
    with tie correction through average ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if len(scores) == 0 or len(scores) != len(labels):
        raise ValueError("scores and labels must be nonempty and aligned")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary 0/1")
    n_pos = int((labels == 1).sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return _maybe_flag(0.0, True, with_flag)
    ranks = average_ranks(scores)
    value = (ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    return _maybe_flag(float(value), False, with_flag)


def _confusion(preds, labels):
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if len(preds) == 0 or len(preds) != len(labels):
        raise ValueError("preds and labels must be nonempty and aligned")
    if not np.isin(labels, (0, 1)).all() or not np.isin(preds, (0, 1)).all():
        raise ValueError("binary metrics need 0/1 preds and labels")
    tp = int(((preds == 1) & (labels == 1)).sum())
    tn = int(((preds == 0) & (labels == 0)).sum())
    fp = int(((preds == 1) & (labels == 0)).sum())
    fn = int(((preds == 0) & (labels == 1)).sum())
    return tp, tn, fp, fn


def f1(preds, labels, *, with_flag: bool = False):
    tp, _, fp, fn = _confusion(preds, labels)
    denom = 2 * tp + fp + fn
    if denom == 0:
        return _maybe_flag(0.0, True, with_flag)
    return _maybe_flag(2.0 * tp / denom, False, with_flag)


def mcc(preds, labels, *, with_flag: bool = False):
    tp, tn, fp, fn = _confusion(preds, labels)
    denom2 = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom2 == 0:
        return _maybe_flag(0.0, True, with_flag)
    value = (tp * tn - fp * fn) / np.sqrt(float(denom2))
    return _maybe_flag(float(np.clip(value, -1.0, 1.0)), False, with_flag)


def acc(preds, labels, *, with_flag: bool = False):
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if len(preds) == 0 or len(preds) != len(labels):
        raise ValueError("preds and labels must be nonempty and aligned")
    return _maybe_flag(float((preds == labels).mean()), False, with_flag)


def pearson(x, y, *, with_flag: bool = False):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) == 0 or len(x) != len(y):
        raise ValueError("inputs must be nonempty and aligned")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("pearson inputs must be finite")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt((dx * dx).sum())
    sy = np.sqrt((dy * dy).sum())
    if sx == 0.0 or sy == 0.0:
        return _maybe_flag(0.0, True, with_flag)
    value = (dx * dy).sum() / (sx * sy)
    return _maybe_flag(float(np.clip(value, -1.0, 1.0)), False, with_flag)


def spearman(x, y, *, with_flag: bool = False):
    """Pearson correlation of average ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) == 0 or len(x) != len(y):
        raise ValueError("inputs must be nonempty and aligned")
    return pearson(average_ranks(x), average_ranks(y), with_flag=with_flag)
