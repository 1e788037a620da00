"""AUC / Mann-Whitney statistics and the normalised similarity difference."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm, rankdata

EXACT_LIMIT = 10_000


@dataclass(frozen=True)
class AucResult:
    auc: float
    u: float
    p: float
    exact: bool

    def to_record(self) -> dict:
        return {"auc": self.auc, "u": self.u, "p": self.p, "exact": self.exact}


def _check(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def u_statistic(s_rand, s_method) -> float:
    """Pairs with s_rand > s_method, ties counted one half."""
    a = _check(s_rand, "s_rand")
    b = _check(s_method, "s_method")
    diff = a[:, None] - b[None, :]
    return float((diff > 0).sum() + 0.5 * (diff == 0).sum())


def _exact_upper_tail(pooled_ranks2: np.ndarray, n1: int, observed2: int) -> float:
    """P(sum of n1 doubled midranks drawn without replacement >= observed2).

    Doubled midranks are integers, so the permutation distribution of the
    rank sum is a subset-sum count, built one pooled value at a time.
    """
    total = int(pooled_ranks2.sum())
    # ways[j, s]: subsets of size j with doubled-rank sum s
    ways = np.zeros((n1 + 1, total + 1))
    ways[0, 0] = 1.0
    for seen, r in enumerate(pooled_ranks2.astype(int), start=1):
        for j in range(min(seen, n1), 0, -1):
            ways[j, r:] += ways[j - 1, : total + 1 - r]
    dist = ways[n1]
    return float(dist[observed2:].sum() / dist.sum())


def compute_auc(s_rand, s_method, exact_limit: int = EXACT_LIMIT) -> AucResult:
    """AUC = P(s_rand > s_method) + P(tie) / 2 = U / (n1 n2).

    The one-tailed p tests whether random-removal similarities exceed the
    method's. It is exact under the permutation distribution with midranks
    when n1 * n2 <= ``exact_limit`` and tie-corrected normal otherwise.
    """
    a = _check(s_rand, "s_rand")
    b = _check(s_method, "s_method")
    n1, n2 = a.size, b.size
    u = u_statistic(a, b)
    auc = u / (n1 * n2)
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled)
    if n1 * n2 <= exact_limit:
        ranks2 = np.rint(2 * ranks).astype(np.int64)
        observed2 = int(ranks2[:n1].sum())
        return AucResult(auc, u, _exact_upper_tail(ranks2, n1, observed2), True)
    n = n1 + n2
    _, counts = np.unique(pooled, return_counts=True)
    tie = float((counts ** 3 - counts).sum())
    var = n1 * n2 / 12.0 * ((n + 1) - tie / (n * (n - 1)))
    mu = n1 * n2 / 2.0
    if var <= 0:
        return AucResult(auc, u, 1.0, False)
    z = (u - mu - 0.5) / math.sqrt(var)
    return AucResult(auc, u, float(norm.sf(z)), False)


def mean_normalized_similarity_difference(s_method, s_all_rand) -> tuple[float, float]:
    """100 * mean(s / median(S_rand) - 1) and its normal 95% half-width."""
    s = _check(s_method, "s_method")
    med = float(np.median(_check(s_all_rand, "s_all_rand")))
    if med == 0:
        raise ValueError("median of the random-arm similarities is zero; the normalised difference is undefined")
    rel = 100.0 * (s / med - 1.0)
    ci = 1.96 * float(rel.std(ddof=1)) / math.sqrt(rel.size) if rel.size > 1 else float("nan")
    return float(rel.mean()), ci
