"""Evaluation metrics for the downstream heads."""

from __future__ import annotations

import numpy as np

from .errors import DomainError


def mae(preds, targets) -> float:
    p, t = np.asarray(preds, float), np.asarray(targets, float)
    if p.shape != t.shape or p.size == 0:
        raise DomainError(f"shape mismatch or empty: {p.shape} vs {t.shape}")
    return float(np.mean(np.abs(p - t)))


def mape(preds, targets) -> float:
    """Mean absolute percentage error; targets must be bounded away from 0."""
    p, t = np.asarray(preds, float), np.asarray(targets, float)
    if p.shape != t.shape or p.size == 0:
        raise DomainError(f"shape mismatch or empty: {p.shape} vs {t.shape}")
    if np.abs(t).min() < 1e-9:
        raise DomainError("mape undefined for targets at 0")
    return float(100.0 * np.mean(np.abs(p - t) / np.abs(t)))


def r2(preds, targets) -> float:
    """Coefficient of determination; NaN when targets have no variance."""
    p, t = np.asarray(preds, float), np.asarray(targets, float)
    if p.shape != t.shape or p.size == 0:
        raise DomainError(f"shape mismatch or empty: {p.shape} vs {t.shape}")
    ss_tot = np.sum((t - t.mean()) ** 2)
    if ss_tot == 0.0:
        return float("nan")
    return float(1.0 - np.sum((p - t) ** 2) / ss_tot)


def auroc(scores, labels) -> float:
    """Probability a positive outranks a negative, ties counting half.

    Computed from tie-averaged ranks, which matches the pairwise definition
    exactly (both reduce to the same rational arithmetic).
    """
    s = np.asarray(scores, float).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape or s.size == 0:
        raise DomainError("scores/labels must be equal-length and non-empty")
    if set(np.unique(y)) - {0, 1}:
        raise DomainError("labels must be binary 0/1")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DomainError("auroc needs both classes present")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), float)
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + 1 + j + 1) / 2.0  # average rank, 1-based
        i = j + 1
    rank_sum_pos = ranks[y == 1].sum()
    return float((rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def f1(scores, labels, threshold: float = 0.5) -> float:
    s = np.asarray(scores, float).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape or s.size == 0:
        raise DomainError("scores/labels must be equal-length and non-empty")
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    denom = 2 * tp + fp + fn
    return float(2 * tp / denom) if denom else 0.0
