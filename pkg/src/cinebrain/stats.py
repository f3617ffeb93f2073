"""Nonparametric statistics and correlation metrics used for model evaluation."""

from __future__ import annotations

import math

import numpy as np
import torch
from scipy.special import ndtr
from scipy.stats import rankdata

from .objectives import ssim_batch

# Above this many (n1 * n2) pairs the normal approximation is used.
EXACT_MAX_PAIRS = 64


def pearson(x, y, return_flag: bool = False):
    """Sample Pearson correlation of two vectors.

    A constant input has no defined correlation; 0.0 is returned instead of
    NaN so that averages over voxels stay total. With ``return_flag=True`` a
    ``(r, was_constant)`` pair is returned.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("pearson needs at least 2 samples")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0.0:
        return (0.0, True) if return_flag else 0.0
    r = float(xc @ yc) / denom
    r = min(1.0, max(-1.0, r))
    return (r, False) if return_flag else r


def columnwise_pearson(a, b) -> np.ndarray:
    """Pearson correlation of matching columns of two [T, V] arrays.

    Constant columns yield 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2 or a.shape[0] < 2:
        raise ValueError("expected [T, V] arrays with T >= 2")
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    num = np.einsum("tv,tv->v", ac, bc)
    den = np.sqrt(np.einsum("tv,tv->v", ac, ac) * np.einsum("tv,tv->v", bc, bc))
    out = np.zeros(a.shape[1])
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return np.clip(out, -1.0, 1.0)


def _tie_term(ranks: np.ndarray) -> float:
    _, counts = np.unique(ranks, return_counts=True)
    return float(np.sum(counts.astype(np.float64) ** 3 - counts))


def _exact_u_pvalue(doubled_ranks: np.ndarray, n1: int, u_obs: float) -> float:
    """Two-sided permutation p-value of U by counting rank-sum subsets.

    ``doubled_ranks`` are 2x midranks so that ties stay integral. The count
    of size-n1 subsets for every attainable rank sum is built by dynamic
    programming, which is exact under ties.
    """
    n = doubled_ranks.size
    # counts[k][s]: subsets of size k with doubled-rank sum s
    counts = [dict() for _ in range(n1 + 1)]
    counts[0][0] = 1
    for r in doubled_ranks.astype(int):
        for k in range(min(n1, n) - 1, -1, -1):
            src = counts[k]
            if not src:
                continue
            dst = counts[k + 1]
            for s, c in src.items():
                dst[s + r] = dst.get(s + r, 0) + c
    dist = counts[n1]
    n_subsets = math.comb(n, n1)
    base = n1 * (n1 + 1)  # doubled n1(n1+1)/2
    n2 = n - n1
    mu2 = n1 * n2  # doubled mean of U
    dev_obs = abs(2 * u_obs - mu2)
    hits = 0
    for s, c in dist.items():
        # doubled U = s - base
        if abs((s - base) - mu2) >= dev_obs - 1e-9:
            hits += c
    assert sum(dist.values()) == n_subsets
    return min(1.0, hits / n_subsets)


def mann_whitney_u(a, b, method: str = "auto"):
    """Two-sided Mann-Whitney U test.

    Returns ``(U, p)`` where U is the statistic of sample ``a`` (number of
    pairs with a > b, ties counting one half). The p-value is exact
    (permutation distribution of midrank sums) when ``n1 * n2 <= 64`` and
    ``method="auto"``; otherwise a normal approximation with tie-corrected
    variance and continuity correction is used.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    n1, n2 = a.size, b.size
    if n1 == 0 or n2 == 0:
        raise ValueError("mann_whitney_u needs two nonempty samples")
    if method not in ("auto", "exact", "normal"):
        raise ValueError(f"unknown method {method!r}")

    ranks = rankdata(np.concatenate([a, b]))
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)

    use_exact = method == "exact" or (method == "auto" and n1 * n2 <= EXACT_MAX_PAIRS)
    if use_exact:
        return u, _exact_u_pvalue(np.rint(2 * ranks), n1, u)

    n = n1 + n2
    mu = n1 * n2 / 2.0
    var = n1 * n2 / 12.0 * ((n + 1) - _tie_term(ranks) / (n * (n - 1)))
    if var <= 0:
        # every observation tied
        return u, 1.0
    z = max(abs(u - mu) - 0.5, 0.0) / math.sqrt(var)
    p = 2.0 * float(ndtr(-z))
    return u, min(1.0, p)


def cliffs_delta(a, b) -> float:
    """Cliff's delta: (#{a_i > b_j} - #{a_i < b_j}) / (n1 n2).

    Counts are taken from binary searches into the sorted second sample,
    so memory stays O(n1 + n2) and the result is exact.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("cliffs_delta needs two nonempty samples")
    below = np.searchsorted(b, a, side="left").astype(np.int64)  # b_j < a_i
    above = (b.size - np.searchsorted(b, a, side="right")).astype(np.int64)  # b_j > a_i
    diff = int(below.sum()) - int(above.sum())
    return diff / (a.size * b.size)


def null_distribution(metric, truth, pred, n_shuffles: int, seed: int) -> np.ndarray:
    """Per-shuffle mean scores under a permuted pairing.

    metric ``"pearson"``: truth/pred are [T, V]; the time axis of the
    predictions is permuted and the mean per-voxel correlation recorded.
    metric ``"ssim"``: truth/pred are [N, 3, H, W] frames; the frame pairing
    is permuted and the mean per-frame SSIM recorded.
    """
    if n_shuffles < 1:
        raise ValueError("n_shuffles must be >= 1")
    rng = np.random.default_rng(seed)
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape:
        raise ValueError(f"shape mismatch: {truth.shape} vs {pred.shape}")
    out = np.empty(n_shuffles)
    if metric == "pearson":
        for k in range(n_shuffles):
            perm = rng.permutation(truth.shape[0])
            out[k] = columnwise_pearson(truth, pred[perm]).mean()
    elif metric == "ssim":
        t = torch.from_numpy(truth)
        p = torch.from_numpy(pred)
        for k in range(n_shuffles):
            perm = torch.from_numpy(rng.permutation(truth.shape[0]))
            out[k] = float(ssim_batch(t, p[perm]).mean())
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return out

