"""Adaptive synthetic oversampling (ADASYN) for multi-class data.

Each class whose size ratio to the largest class falls below ``d_th`` is
topped up by ``round((m_l - m_s) * beta)`` synthetic points. Seeds
surrounded by other-class neighbours get proportionally more of them; each
synthetic point lies on the segment from its seed to a same-class member of
the seed's k nearest neighbours.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError


@dataclass
class BalanceConfig:
    k_neighbors: int = 5
    beta: float = 1.0
    d_th: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ArgumentError("k_neighbors must be >= 1")
        if not 0 < self.beta <= 1:
            raise ArgumentError("beta must lie in (0, 1]")
        if not 0 < self.d_th <= 1:
            raise ArgumentError("d_th must lie in (0, 1]")


@dataclass
class BalanceResult:
    X: np.ndarray
    y: np.ndarray
    synthetic: np.ndarray  # bool per row
    origin: np.ndarray  # seed row index for synthetic rows, -1 for originals


def _round(x):
    return int(math.floor(x + 0.5))


def knn_indices(queries, data, k, exclude=None, chunk=512):
    """Indices of the ``k`` nearest rows of ``data`` for each row of
    ``queries`` (Euclidean; ties broken by lower index). ``exclude[i]`` is a
    data row never returned for query ``i`` (its own position)."""
    data = np.asarray(data, dtype=np.float64)
    sq = np.einsum("ij,ij->i", data, data)
    out = np.empty((len(queries), k), dtype=np.int64)
    for start in range(0, len(queries), chunk):
        q = np.asarray(queries[start:start + chunk], dtype=np.float64)
        d2 = sq[None, :] - 2.0 * (q @ data.T) + np.einsum("ij,ij->i", q, q)[:, None]
        if exclude is not None:
            d2[np.arange(len(q)), exclude[start:start + chunk]] = np.inf
        kth = np.partition(d2, k - 1, axis=1)[:, k - 1]
        for r in range(len(q)):
            cand = np.flatnonzero(d2[r] <= kth[r])
            order = np.lexsort((cand, d2[r, cand]))
            out[start + r] = cand[order][:k]
    return out


def synthetic_budget(counts, cfg: BalanceConfig = BalanceConfig()):
    """Target synthetic count ``G`` per class label, before per-seed rounding."""
    m_l = max(counts.values())
    return {c: (_round((m_l - m) * cfg.beta) if m / m_l < cfg.d_th else 0) for c, m in counts.items()}


def balance(X, y, cfg: BalanceConfig = BalanceConfig()) -> BalanceResult:
    """Oversample minority classes; original rows come first and are untouched."""
    X = np.asarray(X)
    y = np.asarray(y)
    if X.ndim != 2 or len(X) != len(y):
        raise ArgumentError("X must be [n, d] with one label per row")
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise ArgumentError("balancing needs at least two classes")
    m_l = int(counts.max())
    k = cfg.k_neighbors
    rng = np.random.default_rng(cfg.seed)
    new_x, new_y, origin = [], [], []
    for cls, m_s in zip(classes, counts):
        if m_s / m_l >= cfg.d_th:
            continue
        if m_s < k + 1:
            warnings.warn(f"class {cls} has {m_s} samples (< k+1 = {k + 1}); not oversampled")
            continue
        G = _round((m_l - m_s) * cfg.beta)
        seeds = np.flatnonzero(y == cls)
        nn = knn_indices(X[seeds], X, min(k, len(X) - 1), exclude=seeds)
        ratio = (y[nn] != cls).sum(axis=1) / k
        total = ratio.sum()
        weights = ratio / total if total > 0 else np.full(len(seeds), 1.0 / len(seeds))
        g = [_round(w * G) for w in weights]
        for i, n_i in enumerate(g):
            if n_i == 0:
                continue
            own = nn[i][y[nn[i]] == cls]
            xi = X[seeds[i]].astype(np.float64)
            for _ in range(n_i):
                xz = X[own[rng.integers(len(own))]].astype(np.float64) if len(own) else xi
                lam = rng.uniform(0.0, 1.0)
                new_x.append(xi + lam * (xz - xi))
                new_y.append(cls)
                origin.append(seeds[i])
    n_new = len(new_x)
    if n_new:
        X_out = np.concatenate([X.astype(np.float64), np.array(new_x)])
        y_out = np.concatenate([y, np.array(new_y, dtype=y.dtype)])
    else:
        X_out, y_out = X.copy(), y.copy()
    synthetic = np.zeros(len(y_out), dtype=bool)
    synthetic[len(y):] = True
    orig = np.concatenate([np.full(len(y), -1, dtype=np.int64), np.array(origin, dtype=np.int64)])
    return BalanceResult(X_out, y_out, synthetic, orig)
