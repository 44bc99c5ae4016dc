"""Randomization inference under uniform within-stratum assignment.

Normal tail areas come from :mod:`statistics` in the standard library
(``NormalDist.inv_cdf`` is Wichura's AS241 rational approximation), so the
chi-square critical values need no third-party distribution code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from .design import MatchedDesign
from .statistics import ScoreMatrix

_STD_NORMAL = NormalDist()
ENUMERATION_CAP = 2**20


class DegenerateStatistic(ValueError):
    """The statistic has zero variance, so no deviate exists."""


@dataclass(frozen=True)
class MomentPair:
    mean: float
    variance: float

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError("variance must be non-negative")


def norm_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def norm_sf(x: float) -> float:
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def norm_ppf(p: float) -> float:
    return _STD_NORMAL.inv_cdf(p)


def chi2_threshold(alpha: float, one_sided: bool = False) -> float:
    """Critical value for a squared deviate at level ``alpha``.

    Two-sided: the ``1 - alpha`` quantile of chi-square(1), i.e.
    ``Phi^-1(1 - alpha/2)^2``.  One-sided: ``Phi^-1(1 - alpha)^2``, the
    ``1 - 2 alpha`` chi-square quantile.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    z = norm_ppf(1 - alpha) if one_sided else norm_ppf(1 - alpha / 2)
    return z * z


def pvalue_from_deviate(dev: float, alternative: str = "two-sided") -> float:
    if alternative == "two-sided":
        return min(1.0, 2.0 * norm_sf(abs(dev)))
    if alternative == "greater":
        return norm_sf(dev)
    if alternative == "less":
        return norm_cdf(dev)
    raise ValueError(f"unknown alternative {alternative!r}")


def stratum_moments(q: np.ndarray, design: MatchedDesign, rho: np.ndarray | None = None):
    """Per-stratum mean and variance of ``B_i = sum_j Z_ij q_ij``.

    ``q`` may be a vector (N,) or matrix (N, K); ``rho`` defaults to the
    uniform assignment ``1/n_i``.
    """
    q = np.asarray(q, dtype=float)
    if rho is None:
        rho = 1.0 / design.sizes[design.member_stratum]
    w = rho if q.ndim == 1 else rho[:, None]
    m1 = np.add.reduceat(w * q, design.ptr[:-1])
    m2 = np.add.reduceat(w * q * q, design.ptr[:-1])
    return m1, np.maximum(m2 - m1 * m1, 0.0)


def uniform_moments(scores: ScoreMatrix, design: MatchedDesign, k: int) -> MomentPair:
    m, v = stratum_moments(scores.column(k), design)
    return MomentPair(float(m.sum()), float(v.sum()))


def deviate(t: float, m: MomentPair, squared: bool = False) -> float:
    if m.variance <= 0:
        raise DegenerateStatistic("degenerate statistic: zero variance")
    d = (t - m.mean) / math.sqrt(m.variance)
    return d * d if squared else d


def null_distribution(scores: ScoreMatrix, design: MatchedDesign, k: int,
                      cap: int = ENUMERATION_CAP) -> np.ndarray:
    """All ``|Omega|`` equally likely values of ``t_k`` (unsorted)."""
    count = design.assignment_count()
    if count > cap:
        raise ValueError(f"|Omega| = {count:.0f} exceeds the enumeration cap {cap}")
    q = scores.column(k)
    values = np.zeros(1)
    for i in range(design.I):
        block = q[design.ptr[i]:design.ptr[i + 1]]
        values = np.add.outer(values, block).ravel()
    return values


def _tie_tol(values: np.ndarray) -> float:
    return 1e-9 * max(1.0, float(np.max(np.abs(values))))


def exact_tail_probability(scores: ScoreMatrix, design: MatchedDesign, k: int, a: float,
                           cap: int = ENUMERATION_CAP) -> float:
    """``|{z in Omega : t_k(z) >= a}| / |Omega|`` by full enumeration."""
    values = null_distribution(scores, design, k, cap)
    return float(np.count_nonzero(values >= a - _tie_tol(values))) / len(values)


def exact_pvalue(scores: ScoreMatrix, design: MatchedDesign, k: int,
                 alternative: str = "two-sided", cap: int = ENUMERATION_CAP) -> float:
    values = null_distribution(scores, design, k, cap)
    t = scores.t_obs[k]
    tol = _tie_tol(values)
    if alternative == "greater":
        hits = values >= t - tol
    elif alternative == "less":
        hits = values <= t + tol
    else:
        mu = values.mean()
        hits = np.abs(values - mu) >= abs(t - mu) - tol
    return float(np.count_nonzero(hits)) / len(values)


def uniform_inference(scores: ScoreMatrix, design: MatchedDesign, k: int,
                      alternative: str = "two-sided", cap: int = ENUMERATION_CAP) -> dict:
    """Gamma = 1 summary for one outcome: moments, deviate, p-values."""
    m = uniform_moments(scores, design, k)
    t = float(scores.t_obs[k])
    out = {"t": t, "mean": m.mean, "variance": m.variance}
    try:
        d = deviate(t, m)
        out["deviate"] = d
        out["p_normal"] = pvalue_from_deviate(d, alternative)
    except DegenerateStatistic:
        out["deviate"] = None
        out["p_normal"] = None
    out["p_exact"] = (exact_pvalue(scores, design, k, alternative, cap)
                      if design.assignment_count() <= cap else None)
    return out
