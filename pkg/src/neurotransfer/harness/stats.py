"""Rank-based tests used to compare methods across seeds."""
from __future__ import annotations

import itertools
import math
from typing import NamedTuple, Sequence

import numpy as np
from scipy.stats import chi2, rankdata

EXACT_MAX_N = 12


class MannWhitney(NamedTuple):
    u: float  # U of the first sample: pairs (a_i > b_j) plus half the ties
    p: float  # two-sided


def _tie_term(pooled: np.ndarray) -> float:
    _, counts = np.unique(pooled, return_counts=True)
    return float(np.sum(counts ** 3 - counts))


def mann_whitney_u(a: Sequence[float], b: Sequence[float]) -> MannWhitney:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = len(a), len(b)
    if na < 1 or nb < 1:
        raise ValueError("both samples need at least one observation")
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled)
    u = float(ranks[:na].sum() - na * (na + 1) / 2)
    mu = na * nb / 2
    n = na + nb
    if n <= EXACT_MAX_N:
        return MannWhitney(u, _exact_p(ranks, na, u))
    var = na * nb / 12 * ((n + 1) - _tie_term(pooled) / (n * (n - 1)))
    if var <= 0:
        return MannWhitney(u, 1.0)
    z = max(0.0, abs(u - mu) - 0.5) / math.sqrt(var)
    return MannWhitney(u, min(1.0, math.erfc(z / math.sqrt(2))))


def _exact_p(ranks: np.ndarray, na: int, u_obs: float) -> float:
    """Share of all ways to pick ``na`` of the pooled ranks whose U is as extreme."""
    n = len(ranks)
    offset = na * (na + 1) / 2
    mu = na * (n - na) / 2
    dev = abs(u_obs - mu) - 1e-9
    hits = total = 0
    for idx in itertools.combinations(range(n), na):
        total += 1
        if abs(ranks[list(idx)].sum() - offset - mu) >= dev:
            hits += 1
    return hits / total


def kruskal_wallis(groups: Sequence[Sequence[float]]) -> tuple[float, float]:
    """H statistic with tie correction and its chi-squared p-value (k - 1 dof)."""
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(groups) < 2 or any(len(g) == 0 for g in groups):
        raise ValueError("need at least two non-empty groups")
    pooled = np.concatenate(groups)
    n = len(pooled)
    ties = _tie_term(pooled)
    if n < 2 or ties == n ** 3 - n:
        return 0.0, 1.0
    ranks = rankdata(pooled)
    h, start = 0.0, 0
    for g in groups:
        r = ranks[start:start + len(g)]
        h += r.sum() ** 2 / len(g)
        start += len(g)
    h = 12.0 / (n * (n + 1)) * h - 3 * (n + 1)
    h /= 1 - ties / (n ** 3 - n)
    return float(h), float(chi2.sf(h, len(groups) - 1))


def significance_stars(p: float) -> str:
    if p <= 0.0005:
        return "***"
    if p <= 0.005:
        return "**"
    if p < 0.05:
        return "*"
    return ""
