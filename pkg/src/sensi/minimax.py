"""Minimax sensitivity analysis: one hidden bias vector for several outcomes.

For a set of outcomes the overall null is rejected at ``Gamma`` when

    y* = min_rho max_k zeta_k(rho) >= 0,

with ``zeta_k(rho) = (t_k - mu_k(rho))^2 - c_k V_k(rho)``.  The feasible
assignment probabilities are written with Charnes-Cooper scalars ``s_i``
as ``s_i <= rho_ij <= Gamma s_i``, ``sum_j rho_ij = 1``.

Each ``zeta_k`` is a convex quadratic in ``rho``: the squared centering term
is convex, and ``-V_k = sum_i (rho_i'q_ik)^2 - rho'q_k^2`` is a sum of squares
plus a linear term.  The two-sided problem is therefore a convex program and
is solved to a certified duality gap by :mod:`sensi._ipm`.

One-sided outcomes use ``zeta~_k``, which drops to :data:`NEG_SENTINEL`
wherever ``t_k`` lies on the wrong side of its mean.  The minimum of the
piecewise objective is found by enumerating which one-sided outcomes are
switched on: each pattern is a convex problem with linear side constraints
``mu_k <= t_k`` (on) or ``mu_k >= t_k`` (off).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import _ipm
from ._ipm import Layout, QuadSystem, SolverError
from .design import MatchedDesign
from .randomization import DegenerateStatistic, chi2_threshold
from .statistics import ScoreMatrix

NEG_SENTINEL = -1e30

CERT_EXACT = "exact"
CERT_GAP = "certified-by-duality-gap"
CERT_SIGN = "sign-certified"

__all__ = [
    "NEG_SENTINEL", "AssignmentProbabilities", "MinimaxProblem", "MinimaxSolution",
    "SolverError", "zeta", "zeta_one_sided", "zeta_tilde", "solve_minimax",
    "implied_probability", "recover_u", "all_zetas",
]


def implied_probability(u, gamma: float) -> np.ndarray:
    """Conditional treatment probabilities ``exp(gamma u_j) / sum exp(gamma u)``.

    >>> implied_probability([1, 0], 10.0).round(4).tolist()
    [0.9091, 0.0909]
    """
    if gamma < 1:
        raise ValueError("Gamma must be >= 1")
    u = np.asarray(u, dtype=float)
    if np.any(u < 0) or np.any(u > 1):
        raise ValueError("u must lie in [0, 1]")
    logits = math.log(gamma) * u
    w = np.exp(logits - logits.max())
    return w / w.sum()


def recover_u(rho: np.ndarray, ptr: np.ndarray, gamma: float) -> np.ndarray:
    """Confounder values reproducing ``rho`` under the softmax model.

    ``u`` is only defined up to a shift within each stratum; the stratum's
    least likely member gets ``u = 0``.
    """
    rho = np.asarray(rho, dtype=float)
    if gamma <= 1.0:
        return np.zeros_like(rho)
    sizes = np.diff(ptr)
    mn = np.minimum.reduceat(rho, ptr[:-1])
    u = np.log(rho / np.repeat(mn, sizes)) / math.log(gamma)
    return np.clip(u, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class AssignmentProbabilities:
    """Per-member probabilities ``rho`` with Charnes-Cooper scalars ``s``."""

    rho: np.ndarray
    s: np.ndarray
    gamma: float
    ptr: np.ndarray

    def check(self, tol: float = 1e-9) -> None:
        sums = np.add.reduceat(self.rho, self.ptr[:-1])
        if np.any(np.abs(sums - 1.0) > tol):
            raise ValueError("probabilities do not sum to one within strata")
        if np.any(self.rho < 0):
            raise ValueError("negative probability")
        mx = np.maximum.reduceat(self.rho, self.ptr[:-1])
        mn = np.minimum.reduceat(self.rho, self.ptr[:-1])
        if np.any(mx > self.gamma * mn * (1 + tol)):
            raise ValueError("odds ratio bound violated")

    @property
    def u(self) -> np.ndarray:
        return recover_u(self.rho, self.ptr, self.gamma)


_ALTS = ("two-sided", "greater", "less")


@dataclass(frozen=True, eq=False)
class MinimaxProblem:
    """Scores, observed statistics and levels for an outcome subset.

    ``q`` holds one column per outcome in the subset.  Thresholds use the
    local level ``alpha / |K|``; one-sided outcomes use the one-sided
    critical value.
    """

    q: np.ndarray
    t: np.ndarray
    ptr: np.ndarray
    gamma: float
    alpha: float = 0.05
    alternatives: tuple = ()
    outcomes: tuple = ()
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        if q.ndim == 1:
            q = q[:, None]
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", np.atleast_1d(np.asarray(self.t, dtype=float)))
        object.__setattr__(self, "ptr", np.asarray(self.ptr, dtype=np.intp))
        K = q.shape[1]
        if K < 1:
            raise ValueError("need at least one outcome")
        if len(self.t) != K:
            raise ValueError("need one observed statistic per score column")
        if not self.alternatives:
            object.__setattr__(self, "alternatives", ("two-sided",) * K)
        if len(self.alternatives) != K or any(a not in _ALTS for a in self.alternatives):
            raise ValueError(f"alternatives must be {K} values from {_ALTS}")
        if not self.outcomes:
            object.__setattr__(self, "outcomes", tuple(range(K)))
        if self.gamma < 1:
            raise ValueError("Gamma must be >= 1")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")

    @classmethod
    def from_scores(cls, design: MatchedDesign, scores: ScoreMatrix, gamma: float,
                    alpha: float = 0.05, outcomes=None, alternatives=None) -> "MinimaxProblem":
        ks = tuple(range(scores.K)) if outcomes is None else tuple(outcomes)
        if alternatives is None:
            alts = ("two-sided",) * len(ks)
        elif isinstance(alternatives, str):
            alts = (alternatives,) * len(ks)
        else:
            alternatives = tuple(alternatives)
            # allow one entry per full outcome set or per subset
            alts = tuple(alternatives[k] for k in ks) if len(alternatives) == scores.K \
                and len(ks) != scores.K else alternatives
        return cls(scores.q[:, list(ks)], scores.t_obs[list(ks)], design.ptr, gamma, alpha,
                   alts, ks)

    @property
    def K(self) -> int:
        return self.q.shape[1]

    @property
    def layout(self) -> Layout:
        if "layout" not in self._cache:
            self._cache["layout"] = Layout.from_sizes(np.diff(self.ptr))
        return self._cache["layout"]

    @property
    def thresholds(self) -> np.ndarray:
        a = self.alpha / self.K
        return np.array([chi2_threshold(a, one_sided=(alt != "two-sided"))
                         for alt in self.alternatives])

    def with_gamma(self, gamma: float) -> "MinimaxProblem":
        out = MinimaxProblem(self.q, self.t, self.ptr, gamma, self.alpha, self.alternatives,
                             self.outcomes)
        out._cache.update(self._cache)
        return out

    def moments(self, rho: np.ndarray):
        """Means and variances of every statistic under ``rho``."""
        rho = np.asarray(rho, dtype=float)
        m1 = np.add.reduceat(self.q * rho[:, None], self.ptr[:-1], axis=0)
        m2 = np.add.reduceat(self.q * self.q * rho[:, None], self.ptr[:-1], axis=0)
        return m1.sum(axis=0), (m2 - m1 * m1).sum(axis=0)

    def quad_system(self, ks=None) -> QuadSystem:
        ks = list(range(self.K)) if ks is None else list(ks)
        c = self.thresholds[ks]
        A = self.q[:, ks]
        return QuadSystem(np.ones(len(ks)), self.t[ks], A, c, -c * A * A, np.zeros(len(ks)))


def zeta(problem: MinimaxProblem, k: int, rho) -> float:
    """``(t_k - mu_k)^2 - c_k V_k`` at ``rho`` (two-sided form)."""
    mu, var = problem.moments(rho)
    return float((problem.t[k] - mu[k]) ** 2 - problem.thresholds[k] * var[k])


def zeta_one_sided(problem: MinimaxProblem, k: int, rho) -> float:
    """Piecewise criterion for a one-sided outcome.

    Returns :data:`NEG_SENTINEL` when ``t_k`` lies strictly on the wrong side
    of its mean; ``t_k`` equal to the mean counts as the right side.
    """
    alt = problem.alternatives[k]
    if alt == "two-sided":
        raise ValueError(f"outcome {k} is two-sided")
    mu, var = problem.moments(rho)
    gap = problem.t[k] - mu[k]
    if (alt == "greater" and gap < 0) or (alt == "less" and gap > 0):
        return NEG_SENTINEL
    return float(gap * gap - problem.thresholds[k] * var[k])


def zeta_tilde(problem: MinimaxProblem, k: int, rho) -> float:
    if problem.alternatives[k] == "two-sided":
        return zeta(problem, k, rho)
    return zeta_one_sided(problem, k, rho)


def all_zetas(problem: MinimaxProblem, rho) -> np.ndarray:
    mu, var = problem.moments(rho)
    gap = problem.t - mu
    z = gap * gap - problem.thresholds * var
    for k, alt in enumerate(problem.alternatives):
        if (alt == "greater" and gap[k] < 0) or (alt == "less" and gap[k] > 0):
            z[k] = NEG_SENTINEL
    return z


@dataclass
class MinimaxSolution:
    y: float
    lower_bound: float
    assignment: AssignmentProbabilities
    zetas: np.ndarray
    certificate: str
    reject: bool
    iterations: int = 0
    patterns: int = 1

    @property
    def rho(self) -> np.ndarray:
        return self.assignment.rho

    @property
    def u(self) -> np.ndarray:
        return self.assignment.u

    @property
    def sign_certified(self) -> bool:
        return self.lower_bound >= 0 or self.y < 0


def _check_variance(problem: MinimaxProblem) -> None:
    _, var = problem.moments(problem.layout.uniform())
    bad = np.flatnonzero(var <= 0)
    if len(bad):
        raise DegenerateStatistic(
            f"outcome {problem.outcomes[bad[0]]} has zero variance under every assignment")


def _finish(problem, rho, s, lb, certificate, iterations, patterns) -> MinimaxSolution:
    z = all_zetas(problem, rho)
    y = float(z.max())
    lb = min(lb, y)
    ap = AssignmentProbabilities(rho, s, problem.gamma, problem.ptr)
    return MinimaxSolution(y, float(lb), ap, z, certificate, y >= 0, iterations, patterns)


def _phase_one(layout, gamma, Gc, h, cfg):
    """Most interior point of ``{rho : Gc' rho <= h}`` in the max-violation sense."""
    J = Gc.shape[1]
    lin = QuadSystem(np.zeros(J), np.zeros(J), Gc, np.zeros(J), Gc, -h)
    return _ipm.solve(layout, gamma, lin, cfg=cfg, stop_ub_below=None)


def solve_minimax(problem: MinimaxProblem, decide_only: bool = False,
                  cfg: _ipm.IPMConfig | None = None) -> MinimaxSolution:
    """Minimize ``max_k zeta~_k`` over the sensitivity polytope.

    With ``decide_only`` the solver stops as soon as the sign of ``y*`` is
    settled; ``y`` is then an attained upper bound and ``lower_bound`` a
    certified lower bound, one of which has the deciding sign.
    """
    cfg = cfg or _ipm.IPMConfig()
    _check_variance(problem)
    layout = problem.layout
    gamma = problem.gamma
    if gamma - 1.0 <= 1e-12:
        rho = layout.uniform()
        return _finish(problem, rho, rho.copy(), np.inf, CERT_EXACT, 0, 1)

    stops = dict(stop_ub_below=0.0, stop_lb_above=0.0) if decide_only else {}
    one = [k for k, a in enumerate(problem.alternatives) if a != "two-sided"]
    two = [k for k, a in enumerate(problem.alternatives) if a == "two-sided"]
    if not one:
        res = _ipm.solve(layout, gamma, problem.quad_system(), cfg=cfg, **stops)
        cert = CERT_GAP if res.status.startswith("optimal") else CERT_SIGN
        return _finish(problem, res.rho, res.s, res.lb, cert, res.iterations, 1)

    best = None
    lb_all = np.inf
    iters = 0
    n_pat = 0
    cert = CERT_GAP
    p1cfg = _ipm.IPMConfig(gap_tol=1e-6)
    for pattern in itertools.product((True, False), repeat=len(one)):
        cols, h = [], []
        for k, on in zip(one, pattern):
            sign = 1.0 if (problem.alternatives[k] == "greater") == on else -1.0
            # sign * (mu_k - t_k) <= 0
            cols.append(sign * problem.q[:, k])
            h.append(sign * problem.t[k])
        Gc, h = np.column_stack(cols), np.array(h)
        ph = _phase_one(layout, gamma, Gc, h, p1cfg)
        iters += ph.iterations
        margin = 1e-12 * max(1.0, float(np.abs(h).max()), float(np.abs(Gc).sum(axis=0).max()))
        if ph.ub >= -margin:
            continue  # empty interior: covered by the closures of neighbouring patterns
        n_pat += 1
        active = two + [k for k, on in zip(one, pattern) if on]
        if not active:
            # every outcome can be switched off at once: nothing can be rejected
            return _finish(problem, ph.rho, ph.s, NEG_SENTINEL, CERT_GAP, iters, n_pat)
        res = _ipm.solve(layout, gamma, problem.quad_system(active), cons=(Gc, h), rho0=ph.rho,
                         cfg=cfg, **stops)
        iters += res.iterations
        lb_all = min(lb_all, res.lb)
        if not res.status.startswith("optimal"):
            cert = CERT_SIGN
        if best is None or res.ub < best.ub:
            best = res
        if decide_only and res.ub < 0:
            break
    if best is None:
        raise SolverError("no sign pattern with nonempty interior; degenerate one-sided problem")
    return _finish(problem, best.rho, best.s, lb_all, cert, iters, n_pat)
