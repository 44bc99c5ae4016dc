"""Multiple-outcome testing: Holm, sequential rejection, closed testing and
changepoint search over Gamma."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .design import MatchedDesign
from .minimax import MinimaxProblem, MinimaxSolution, solve_minimax
from .statistics import ScoreMatrix

log = logging.getLogger(__name__)

CLOSED_TESTING_MAX_K = 12


@dataclass(frozen=True)
class HolmResult:
    rejected: tuple[bool, ...]
    overall: bool


def holm_combine(pvalues, alpha: float = 0.05) -> HolmResult:
    """Holm step-down on worst-case p-values; overall flag is ``min p <= alpha/K``."""
    p = np.asarray(pvalues, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    K = len(p)
    rejected = np.zeros(K, dtype=bool)
    for step, k in enumerate(np.argsort(p, kind="stable")):
        if p[k] > alpha / (K - step):
            break
        rejected[k] = True
    overall = bool(K and p.min() <= alpha / K)
    return HolmResult(tuple(bool(r) for r in rejected), overall)


def holm_from_tests(test: Callable[[int, float], bool], K: int, alpha: float = 0.05) -> HolmResult:
    """Holm's procedure driven by level-``a`` decisions ``test(k, a)``.

    ``test(k, a)`` must return ``P_k <= a``.  This reaches the same rejections
    as :func:`holm_combine` without computing the p-values themselves: at each
    step every remaining hypothesis passing level ``alpha / m`` is rejected.
    """
    rejected = [False] * K
    first = True
    overall = False
    while True:
        remaining = [k for k in range(K) if not rejected[k]]
        if not remaining:
            break
        level = alpha / len(remaining)
        hits = [k for k in remaining if test(k, level)]
        if first:
            overall = bool(hits)
            first = False
        if not hits:
            break
        for k in hits:
            rejected[k] = True
    return HolmResult(tuple(rejected), overall)


@dataclass(frozen=True, order=True)
class IntersectionNull:
    """Intersection of the nulls in ``members`` (0-based outcome indices)."""

    members: tuple[int, ...]
    index: int = field(default=0, compare=False)

    def __post_init__(self):
        if not self.members:
            raise ValueError("an intersection null needs at least one outcome")
        object.__setattr__(self, "members", tuple(sorted(set(self.members))))

    def __contains__(self, k) -> bool:
        return k in self.members

    def __len__(self) -> int:
        return len(self.members)


def all_intersections(K: int) -> list[IntersectionNull]:
    """Every nonempty subset of ``range(K)``, largest first."""
    subsets = []
    for size in range(K, 0, -1):
        subsets.extend(itertools.combinations(range(K), size))
    return [IntersectionNull(s, i) for i, s in enumerate(subsets)]


@dataclass
class RejectionState:
    rejected: frozenset
    step: int


SuccessorRule = Callable[[frozenset, list, Callable[[IntersectionNull], bool]], set]


def closed_testing_rule(rejected: frozenset, nulls: list, test) -> set:
    """Closure rule: add every null whose strict supersets are all rejected
    and whose own test rejects.

    The rejected family stays closed under taking supersets, so checking the
    supersets with one extra outcome is enough.
    """
    family = set(nulls)
    universe = sorted({k for h in nulls for k in h.members})
    out = set()
    for h in nulls:
        if h in rejected:
            continue
        supers = (IntersectionNull(h.members + (j,)) for j in universe if j not in h.members)
        if all(g in rejected for g in supers if g in family) and test(h):
            out.add(h)
    return out


class TesterFailure(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


def sequential_rejection(nulls: Iterable[IntersectionNull], tester: Callable[[IntersectionNull], bool],
                         successor: SuccessorRule = closed_testing_rule) -> list[RejectionState]:
    """Iterate ``R <- R | N(R)`` from the empty set until nothing is added.

    Each null is tested at most once.  Returns the full trace of states.
    """
    nulls = list(nulls)
    memo: dict = {}

    def test(h):
        if h not in memo:
            memo[h] = bool(tester(h))
        return memo[h]

    state = RejectionState(frozenset(), 0)
    trace = [state]
    while True:
        try:
            new = successor(state.rejected, nulls, test)
        except Exception as exc:
            raise TesterFailure(f"tester failed at step {state.step}: {exc}", trace) from exc
        new = set(new) - state.rejected
        if not new:
            break
        state = RejectionState(state.rejected | frozenset(new), state.step + 1)
        trace.append(state)
    return trace


@dataclass
class ClosedTestingResult:
    rejected: tuple[bool, ...]
    tests: dict  # IntersectionNull -> MinimaxSolution
    trace: list

    def rejects(self, members) -> bool | None:
        """Outcome of the intersection test, or None if it was never run."""
        key = IntersectionNull(tuple(members))
        sol = self.tests.get(key)
        return None if sol is None else sol.reject


def closed_testing(design: MatchedDesign, scores: ScoreMatrix, gamma: float, alpha: float = 0.05,
                   alternatives=None, decide_only: bool = True) -> ClosedTestingResult:
    """Closed testing with a minimax test for every intersection null.

    ``H_k`` is rejected iff every intersection containing ``k`` has
    ``y* >= 0`` at local level ``alpha``.  Intersections are tested lazily:
    a subset is only solved once all of its supersets have rejected.
    """
    K = scores.K
    if K > CLOSED_TESTING_MAX_K:
        raise ValueError(f"closed testing over {K} outcomes needs {2 ** K - 1} tests; "
                         f"cap is K = {CLOSED_TESTING_MAX_K}")
    nulls = all_intersections(K)
    sols: dict = {}

    def tester(h: IntersectionNull) -> bool:
        prob = MinimaxProblem.from_scores(design, scores, gamma, alpha, h.members, alternatives)
        sols[IntersectionNull(h.members)] = sol = solve_minimax(prob, decide_only=decide_only)
        return sol.reject

    trace = sequential_rejection(nulls, tester)
    final = trace[-1].rejected
    flags = tuple(IntersectionNull((k,)) in final for k in range(K))
    return ClosedTestingResult(flags, sols, trace)


@dataclass(frozen=True)
class GammaChangepoint:
    gamma_star: float
    method: str
    bracket: float
    anomalies: tuple = ()


def gamma_star(reject_at: Callable[[float], bool], gamma_lo: float = 1.0,
               gamma_hi: float | None = None, tol: float = 1e-3, method: str = "",
               cap: float = 1e6, probes=()) -> GammaChangepoint:
    """Smallest Gamma at which rejection is overturned, by bisection.

    ``gamma_star`` is the midpoint of a final bracket ``[lo, hi]`` of width
    at most ``tol`` with ``reject_at(lo)`` true and ``reject_at(hi)`` false;
    ``bracket`` is that width.  When rejection already fails at ``gamma_lo``
    the result is ``gamma_lo`` with zero bracket.

    Bisection alone never sees a rejection above a failure.  Extra Gamma
    values in ``probes`` (a reporting grid, say) are evaluated too; if any
    of them contradicts monotonicity the smallest failing Gamma is returned
    and the anomaly recorded.
    """
    cache: dict = {}

    def rej(g):
        if g not in cache:
            cache[g] = bool(reject_at(g))
        return cache[g]

    if not rej(gamma_lo):
        return GammaChangepoint(gamma_lo, method, 0.0)
    for g in sorted(probes):
        if gamma_lo < g <= cap:
            rej(float(g))
    hi = gamma_hi if gamma_hi is not None else 2.0 * gamma_lo
    lo = gamma_lo
    while rej(hi):
        lo = hi
        if hi >= cap:
            log.warning("rejection persists up to Gamma = %g", cap)
            return GammaChangepoint(math.inf, method, math.inf)
        hi = min(2.0 * hi, cap)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if rej(mid):
            lo = mid
        else:
            hi = mid
    # any cached rejection above a cached failure signals non-monotonicity
    smallest_fail = min(g for g, r in cache.items() if not r)
    late = sorted(g for g, r in cache.items() if r and g > smallest_fail)
    if late:
        note = f"rejects at {late} above a failure at {smallest_fail}"
        log.warning("non-monotone rejection in Gamma: %s", note)
        return GammaChangepoint(smallest_fail, method, hi - lo, (note,))
    return GammaChangepoint(0.5 * (lo + hi), method, hi - lo)


def minimax_gamma_star(design, scores, alpha=0.05, outcomes=None, alternatives=None,
                       tol=1e-3, probes=()) -> GammaChangepoint:
    def reject_at(g):
        prob = MinimaxProblem.from_scores(design, scores, g, alpha, outcomes, alternatives)
        return solve_minimax(prob, decide_only=True).reject
    return gamma_star(reject_at, tol=tol, method="minimax", probes=probes)


__all__ = [
    "HolmResult", "holm_combine", "holm_from_tests", "IntersectionNull", "all_intersections",
    "RejectionState", "closed_testing_rule", "sequential_rejection", "TesterFailure",
    "ClosedTestingResult", "closed_testing", "GammaChangepoint", "gamma_star",
    "minimax_gamma_star", "MinimaxSolution",
]
