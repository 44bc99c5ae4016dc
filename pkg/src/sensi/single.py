"""Single-outcome sensitivity analysis at a fixed Gamma.

Two routes are provided.  The separable route picks, stratum by stratum,
the binary confounder pattern with the most extreme mean; it is the
classical large-sample worst case.  The quadratic-program route minimizes
``zeta_k`` over the whole polytope with the same engine as the minimax
solver and is treated as authoritative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _ipm
from ._ipm import Layout, QuadSystem, SolverError
from .design import MatchedDesign
from .minimax import MinimaxProblem, MinimaxSolution, solve_minimax
from .randomization import DegenerateStatistic, norm_cdf, norm_sf
from .statistics import ScoreMatrix


@dataclass(frozen=True)
class Candidate:
    """Binary pattern putting ``u = 1`` on the first ``cut`` members of ``order``."""

    cut: int
    order: tuple[int, ...]
    mean: float
    variance: float

    def rho(self, gamma: float) -> np.ndarray:
        """Probabilities in member order."""
        w = np.ones(len(self.order))
        w[list(self.order[:self.cut])] = gamma
        return w / w.sum()


def stratum_candidates(q_i, gamma: float, direction: str = "max") -> list[Candidate]:
    """Cut-point candidates for one stratum.

    For ``direction="max"`` members are sorted by score, largest first, and
    cut ``c`` gives ``u = 1`` to the top ``c``; ``"min"`` sorts smallest
    first.  Returns one :class:`Candidate` per ``c = 1 .. n-1``.
    """
    if gamma < 1:
        raise ValueError("Gamma must be >= 1")
    q_i = np.asarray(q_i, dtype=float)
    n = len(q_i)
    # stable sort keeps tied scores in member order
    order = np.argsort(-q_i if direction == "max" else q_i, kind="stable")
    qs = q_i[order]
    out = []
    for c in range(1, n):
        w = np.ones(n)
        w[:c] = gamma
        w /= w.sum()
        m = float(w @ qs)
        v = float(w @ (qs * qs) - m * m)
        out.append(Candidate(c, tuple(int(j) for j in order), m, max(v, 0.0)))
    return out


@dataclass(frozen=True)
class WorstCaseBound:
    gamma: float
    direction: str
    mean: float
    variance: float
    t: float
    selected: tuple  # chosen Candidate per stratum

    @property
    def deviate(self) -> float:
        if self.variance <= 0:
            raise DegenerateStatistic("zero variance at the worst case")
        return (self.t - self.mean) / math.sqrt(self.variance)

    def rho(self) -> np.ndarray:
        return np.concatenate([c.rho(self.gamma) for c in self.selected])


def _pick(cands: list[Candidate], direction: str) -> Candidate:
    sign = 1.0 if direction == "max" else -1.0
    best = cands[0]
    for c in cands[1:]:
        a, b = sign * c.mean, sign * best.mean
        if a > b + 1e-12 * max(1.0, abs(b)) or (abs(a - b) <= 1e-12 * max(1.0, abs(b))
                                                 and c.variance > best.variance):
            best = c
    return best


def separable_worst_case(scores: ScoreMatrix, design: MatchedDesign, k: int, gamma: float,
                         direction: str = "max") -> WorstCaseBound:
    """Per-stratum extreme-mean selection; ties go to the larger variance."""
    if direction not in ("max", "min"):
        raise ValueError("direction must be 'max' or 'min'")
    q = scores.column(k)
    chosen = []
    for i in range(design.I):
        cands = stratum_candidates(q[design.ptr[i]:design.ptr[i + 1]], gamma, direction)
        chosen.append(_pick(cands, direction))
    mean = float(sum(c.mean for c in chosen))
    var = float(sum(c.variance for c in chosen))
    if var <= 0:
        raise DegenerateStatistic(f"outcome {k}: zero variance at the separable worst case")
    return WorstCaseBound(gamma, direction, mean, var, float(scores.t_obs[k]), tuple(chosen))


def separable_two_sided(scores, design, k, gamma) -> WorstCaseBound:
    """Both directions; keeps the one with the smaller squared deviate."""
    hi = separable_worst_case(scores, design, k, gamma, "max")
    lo = separable_worst_case(scores, design, k, gamma, "min")
    return hi if hi.deviate ** 2 <= lo.deviate ** 2 else lo


def single_outcome_qp(scores: ScoreMatrix, design: MatchedDesign, k: int, gamma: float,
                      alpha_local: float = 0.05, alternative: str = "two-sided",
                      decide_only: bool = False) -> MinimaxSolution:
    """Minimize ``zeta_k`` over the polytope; reject when the minimum is >= 0."""
    prob = MinimaxProblem.from_scores(design, scores, gamma, alpha_local, [k], [alternative])
    return solve_minimax(prob, decide_only=decide_only)


@dataclass(frozen=True)
class WorstCasePValue:
    p: float
    deviate: float
    mean: float
    variance: float
    method: str   # "qp", "separable" or "interval"
    rho: np.ndarray | None = None


def mean_range(q: np.ndarray, layout: Layout, gamma: float) -> tuple[float, float]:
    """Exact smallest and largest attainable mean of ``sum rho_ij q_ij``."""
    lo = float(layout.linear_min(q, gamma).sum())
    hi = float(-layout.linear_min(-q, gamma).sum())
    return lo, hi


def _min_ratio(q, t, layout, gamma, rho_start, tol=1e-10, max_iter=50):
    """Dinkelbach iteration for ``min (t - mu)^2 / V`` when ``t`` lies outside the mean range."""
    def moments(rho):
        m1 = layout.ssum(q * rho)
        m2 = layout.ssum(q * q * rho)
        return float(m1.sum()), float((m2 - m1 * m1).sum())

    rho = rho_start
    mu, var = moments(rho)
    r = (t - mu) ** 2 / var
    A = q[:, None]
    for _ in range(max_iter):
        fs = QuadSystem(np.ones(1), np.array([t]), A, np.array([r]), -r * A * A, np.zeros(1))
        res = _ipm.solve(layout, gamma, fs)
        # min_rho (t - mu)^2 - r V >= 0 certifies that r is the minimal ratio
        if res.lb >= -tol * (t - mu) ** 2:
            break
        mu_new, var_new = moments(res.rho)
        if var_new <= 0:
            break
        r_new = (t - mu_new) ** 2 / var_new
        if r_new >= r:
            break
        r, rho, mu, var = r_new, res.rho, mu_new, var_new
    return r, rho, mu, var


def worst_case_pvalue(scores: ScoreMatrix, design: MatchedDesign, k: int, gamma: float,
                      alternative: str = "two-sided") -> WorstCasePValue:
    """Largest normal-approximation p-value over the polytope at ``gamma``.

    When ``t`` can equal the mean the two-sided value is 1.  Otherwise the
    smallest squared deviate is found by Dinkelbach iteration on the ratio,
    each step being a convex program.  A one-sided test whose statistic can
    fall on the wrong side of the mean has worst-case p-value above 1/2 and
    is reported from the separable route.
    """
    q = scores.column(k)
    t = float(scores.t_obs[k])
    layout = Layout.from_sizes(design.sizes)
    lo, hi = mean_range(q, layout, gamma)
    if alternative == "two-sided":
        if lo <= t <= hi:
            return WorstCasePValue(1.0, 0.0, t, float("nan"), "interval")
        direction = "max" if t > hi else "min"
    elif alternative == "greater":
        if t <= hi:
            b = separable_worst_case(scores, design, k, gamma, "max")
            return WorstCasePValue(norm_sf(b.deviate), b.deviate, b.mean, b.variance, "separable",
                                   b.rho())
        direction = "max"
    elif alternative == "less":
        if t >= lo:
            b = separable_worst_case(scores, design, k, gamma, "min")
            return WorstCasePValue(norm_cdf(b.deviate), b.deviate, b.mean, b.variance,
                                   "separable", b.rho())
        direction = "min"
    else:
        raise ValueError(f"unknown alternative {alternative!r}")
    start = separable_worst_case(scores, design, k, gamma, direction)
    if gamma - 1.0 <= 1e-12:
        r, rho, mu, var = start.deviate ** 2, layout.uniform(), start.mean, start.variance
    else:
        r, rho, mu, var = _min_ratio(q, t, layout, gamma, start.rho())
    dev = math.copysign(math.sqrt(r), t - mu)
    if alternative == "two-sided":
        p = min(1.0, math.erfc(math.sqrt(r / 2.0)))
    elif alternative == "greater":
        p = norm_sf(dev)
    else:
        p = norm_cdf(dev)
    return WorstCasePValue(p, dev, mu, var, "qp", rho)


__all__ = [
    "Candidate", "WorstCaseBound", "WorstCasePValue", "SolverError", "stratum_candidates",
    "separable_worst_case", "separable_two_sided", "single_outcome_qp", "worst_case_pvalue",
    "mean_range",
]
