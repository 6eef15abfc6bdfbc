"""Paired Wilcoxon signed-rank test and best-so-far traces."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm, rankdata

EXACT_MAX_N = 25
MIN_N = 5


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # W+, the rank sum of positive differences
    p_value: float
    n: int  # pairs left after dropping zero differences
    method: str  # "exact" or "normal"


def _exact_upper_tail(doubled_ranks: np.ndarray, w2: int) -> float:
    """P(W+ >= w) under the null, by DP over subsets of (doubled) ranks."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=float)
    counts[0] = 1.0
    for r in doubled_ranks:
        r = int(r)
        counts[r:] = counts[r:] + counts[: total + 1 - r].copy()
    return float(counts[w2:].sum() / counts.sum())


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float], alternative: str = "two-sided") -> WilcoxonResult:
    """Paired test of ``a - b`` centred at zero.

    Zero differences are dropped and ties get average ranks.  For up to
    25 remaining pairs the null distribution is enumerated exactly (on
    doubled ranks, so half-integer averages stay integral); above that a
    normal approximation with continuity and tie corrections is used.

    Parameters
    ----------
    a, b : sequences of equal length
    alternative : {"two-sided", "greater", "less"}
        "greater" tests whether ``a`` tends to exceed ``b``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise StatsError("a and b must be 1-D and of equal length")
    if alternative not in ("two-sided", "greater", "less"):
        raise StatsError(f"unknown alternative {alternative!r}")
    d = a - b
    if not np.all(np.isfinite(d)):
        raise StatsError("differences must be finite")
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise StatsError("all differences are zero")
    if n < MIN_N:
        raise StatsError(f"need at least {MIN_N} nonzero differences, got {n}")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    total = n * (n + 1) / 2.0

    if n <= EXACT_MAX_N:
        r2 = np.rint(2 * ranks).astype(int)
        upper = _exact_upper_tail(r2, int(round(2 * w_plus)))
        lower = _exact_upper_tail(r2, int(round(2 * (total - w_plus))))  # P(W+ <= w)
        if alternative == "greater":
            p = upper
        elif alternative == "less":
            p = lower
        else:
            p = min(1.0, 2.0 * min(upper, lower))
        return WilcoxonResult(w_plus, p, n, "exact")

    mu = total / 2.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
    sd = math.sqrt(var)
    if alternative == "greater":
        p = norm.sf((w_plus - mu - 0.5) / sd)
    elif alternative == "less":
        p = norm.cdf((w_plus - mu + 0.5) / sd)
    else:
        z = (abs(w_plus - mu) - 0.5) / sd
        p = min(1.0, 2.0 * norm.sf(max(z, 0.0)))
    return WilcoxonResult(w_plus, float(p), n, "normal")


def convergence_trace(values: Sequence[Optional[float]], maximize: bool = True) -> list[Optional[float]]:
    """Best-so-far after each trial; None until the first non-None value."""
    out: list[Optional[float]] = []
    best = None
    for v in values:
        if v is not None and not (isinstance(v, float) and math.isnan(v)):
            v = float(v)
            if best is None or (v > best if maximize else v < best):
                best = v
        out.append(best)
    return out
