"""Bootstrap intervals, rank tests and paired sign tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .regulation import pearson

BOOTSTRAP_RESAMPLES = 1000


def bootstrap_ci(sample, level: float = 0.99, n: int = BOOTSTRAP_RESAMPLES, statistic=np.mean, seed: int = 0):
    """Percentile bootstrap interval for ``statistic`` of ``sample``."""
    x = np.asarray(sample, dtype=np.float64)
    if x.size == 0:
        raise ValueError("bootstrap needs a non-empty sample")
    if np.all(x == x[0]):
        # every resample is the sample itself; skip the float summation noise
        v = float(statistic(x[:1]))
        return v, v
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(x), size=(n, len(x)))
    reps = np.apply_along_axis(statistic, 1, x[idx])
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(reps, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


@dataclass
class UTest:
    u: float
    p: float
    method: str
    ties: bool


def mann_whitney_u(x, y, alternative: str = "two-sided") -> UTest:
    """Rank-sum test; exact for small tie-free samples, else normal with tie correction.

    ``u`` is the statistic of ``x``.  All-identical samples give p = 1.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size == 0 or y.size == 0:
        raise ValueError("Mann-Whitney U needs non-empty samples")
    pooled = np.concatenate([x, y])
    ties = len(np.unique(pooled)) < len(pooled)
    if np.all(pooled == pooled[0]):
        return UTest(x.size * y.size / 2.0, 1.0, "degenerate", True)
    method = "exact" if max(x.size, y.size) <= 20 and not ties else "asymptotic"
    res = stats.mannwhitneyu(x, y, alternative=alternative, method=method)
    return UTest(float(res.statistic), float(res.pvalue), method, ties)


@dataclass
class SignTest:
    wins: int
    losses: int
    ties: int
    p: float


def sign_test(a, b) -> SignTest:
    """One-sided paired sign test of a > b; ties are dropped."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    wins, losses = int((d > 0).sum()), int((d < 0).sum())
    n = wins + losses
    p = float(stats.binomtest(wins, n, 0.5, alternative="greater").pvalue) if n else 1.0
    return SignTest(wins, losses, int((d == 0).sum()), p)


def stats_suite(a, b=None, level: float = 0.99) -> dict:
    out = {"bootstrap_ci": bootstrap_ci(a, level)}
    if b is not None:
        u = mann_whitney_u(a, b)
        out["mann_whitney_u"] = {"u": u.u, "p": u.p, "method": u.method, "ties": u.ties}
        if len(a) == len(b):
            out["pearson"] = pearson(a, b)
    return out
