"""Shared oracle helpers for the test suite.

Everything here is deliberately independent of the library's internal
computation paths: gradients come from central finite differences, distances
from double loops, selections from a from-scratch greedy trace.
"""

from __future__ import annotations

import numpy as np


def fd_gradient(fun, w: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function over every matrix entry."""
    grad = np.zeros_like(w, dtype=np.float64)
    for i in range(w.shape[0]):
        for j in range(w.shape[1]):
            plus = w.copy()
            plus[i, j] += step
            minus = w.copy()
            minus[i, j] -= step
            grad[i, j] = (fun(plus) - fun(minus)) / (2.0 * step)
    return grad


def w_subproblem_objective(f, m, t, lam, w) -> float:
    """Reconstruction + transport-weighted refined-to-bank distances,
    the piece of the nested objective that depends on W with T fixed."""
    wm = w @ m
    recon = float(np.sum((f - wm) ** 2))
    dists = (
        np.sum(wm * wm, axis=1)[:, None]
        + np.sum(m * m, axis=1)[None, :]
        - 2.0 * wm @ m.T
    )
    return recon + lam * float(np.sum(t * dists))


def mean_alignment_objective(f, m, w, lam) -> float:
    """Reconstruction + mean-gap alignment, the Gaussian-baseline objective."""
    wm = w @ m
    gap = m.mean(axis=0) - wm.mean(axis=0)
    return float(np.sum((f - wm) ** 2)) + lam * float(np.sum(gap * gap))


def brute_force_min_sq_dists(query: np.ndarray, refined: np.ndarray) -> np.ndarray:
    """Double-loop nearest squared Euclidean distance, no vectorized identities."""
    out = np.empty(query.shape[0])
    for i in range(query.shape[0]):
        best = np.inf
        for j in range(refined.shape[0]):
            diff = query[i] - refined[j]
            best = min(best, float(np.dot(diff, diff)))
        out[i] = best
    return out


def brute_force_auroc(scores, labels) -> float:
    """All positive/negative pairs, ties worth 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def greedy_reference(points: np.ndarray, target: int, start: int) -> list[int]:
    """Independent O(n^2) farthest-first trace on a full distance matrix."""
    n = points.shape[0]
    d2 = np.sum(
        (points[:, None, :] - points[None, :, :]).astype(np.float64) ** 2, axis=2
    )
    selected = [start]
    while len(selected) < target:
        remaining = [i for i in range(n) if i not in selected]
        min_d = d2[np.ix_(remaining, selected)].min(axis=1)
        selected.append(remaining[int(np.argmax(min_d))])
    return selected
