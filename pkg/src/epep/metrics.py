"""Macro-F1 and AUROC."""

from __future__ import annotations

import numpy as np

from .errors import MetricError


def _as_indicator(labels, k: int) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim == 2:
        if arr.shape[1] != k:
            raise MetricError(f"label matrix has {arr.shape[1]} columns, expected {k}")
        return arr.astype(bool)
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= k):
        raise MetricError(f"labels must lie in [0, {k})")
    out = np.zeros((arr.size, k), dtype=bool)
    out[np.arange(arr.size), arr] = True
    return out


def f1_macro(preds, golds, num_classes: int) -> float:
    """Unweighted mean of per-class F1.

    ``preds``/``golds`` are class indices ``(n,)`` or 0/1 label sets ``(n, K)``.
    A class that is neither present nor predicted scores 0.
    """
    p = _as_indicator(preds, num_classes)
    g = _as_indicator(golds, num_classes)
    if p.shape != g.shape:
        raise MetricError(f"preds {p.shape} and golds {g.shape} differ in length")
    if len(p) == 0:
        raise MetricError("f1_macro of an empty set")
    tp = np.sum(p & g, axis=0)
    fp = np.sum(p & ~g, axis=0)
    fn = np.sum(~p & g, axis=0)
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    return float(np.mean(f1))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    start = 0
    while start < len(xs):
        stop = start
        while stop + 1 < len(xs) and xs[stop + 1] == xs[start]:
            stop += 1
        ranks[order[start : stop + 1]] = 0.5 * (start + stop) + 1.0
        start = stop + 1
    return ranks


def auroc(scores, golds) -> float:
    """Rank-based (Mann-Whitney) AUROC; tied scores count one half."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    g = np.asarray(golds).reshape(-1).astype(bool)
    if s.shape != g.shape:
        raise MetricError("scores and golds differ in length")
    n_pos = int(g.sum())
    n_neg = len(g) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs at least one positive and one negative")
    ranks = _average_ranks(s)
    u = ranks[g].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_macro(probs: np.ndarray, label_matrix: np.ndarray) -> float:
    """Binary AUROC on the positive class for K=2, otherwise one-vs-rest macro average."""
    probs = np.asarray(probs)
    y = np.asarray(label_matrix).astype(bool)
    if probs.shape[1] == 2 and np.all(y.sum(axis=1) == 1):
        return auroc(probs[:, 1], y[:, 1])
    vals = [auroc(probs[:, j], y[:, j]) for j in range(y.shape[1]) if 0 < y[:, j].sum() < len(y)]
    if not vals:
        raise MetricError("no class has both positive and negative samples")
    return float(np.mean(vals))
