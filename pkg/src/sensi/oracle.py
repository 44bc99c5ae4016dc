"""Brute-force references for small instances.

Nothing here calls the solver code: the probability map, the moments and
the rejection criterion are recomputed from scratch so that agreement with
:mod:`sensi.minimax` is evidence rather than tautology.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .design import MatchedDesign
from .randomization import DegenerateStatistic, chi2_threshold
from .single import Candidate, WorstCaseBound
from .statistics import ScoreMatrix

BINARY_N_MAX = 20
GRID_N_MAX = 8
GRID_K_MAX = 3
STRATUM_GRID_CAP = 50_000
NEG = -1e30


class OracleCapExceeded(ValueError):
    pass


def probabilities(u, gamma: float) -> np.ndarray:
    """``Gamma^u_j / sum_j Gamma^u_j`` for one stratum."""
    w = np.power(float(gamma), np.asarray(u, dtype=float))
    return w / w.sum()


def _strata(design_or_ptr):
    ptr = design_or_ptr.ptr if isinstance(design_or_ptr, MatchedDesign) else design_or_ptr
    return [(int(a), int(b)) for a, b in zip(ptr[:-1], ptr[1:])]


# binary enumeration

def enumerate_binary_u(scores: ScoreMatrix, design: MatchedDesign, k: int, gamma: float,
                       direction: str = "max") -> WorstCaseBound:
    """Extreme mean over every binary ``u``, stratum by stratum.

    The mean is a sum of per-stratum terms, so visiting each stratum's
    ``2^n_i`` patterns covers all of ``{0,1}^N``.  Ties on the mean go to the
    larger variance.
    """
    if design.N > BINARY_N_MAX:
        raise OracleCapExceeded(f"N = {design.N} exceeds the binary enumeration cap {BINARY_N_MAX}")
    if direction not in ("max", "min"):
        raise ValueError("direction must be 'max' or 'min'")
    sign = 1.0 if direction == "max" else -1.0
    q = np.asarray(scores.q[:, k], dtype=float)
    chosen = []
    total_m = total_v = 0.0
    for a, b in _strata(design):
        qi = q[a:b]
        best = None
        for bits in itertools.product((1, 0), repeat=b - a):
            p = probabilities(bits, gamma)
            m = sum(pj * x for pj, x in zip(p, qi))
            v = sum(pj * x * x for pj, x in zip(p, qi)) - m * m
            key = sign * m
            if best is None:
                best = (key, v, bits, m)
                continue
            tol = 1e-12 * max(1.0, abs(best[0]))
            if key > best[0] + tol or (abs(key - best[0]) <= tol and v > best[1]):
                best = (key, v, bits, m)
        _, v, bits, m = best
        ones = [j for j in range(b - a) if bits[j]]
        zeros = [j for j in range(b - a) if not bits[j]]
        chosen.append(Candidate(len(ones), tuple(ones + zeros), float(m), float(max(v, 0.0))))
        total_m += m
        total_v += max(v, 0.0)
    if total_v <= 0:
        raise DegenerateStatistic(f"outcome {k}: zero variance at the binary worst case")
    return WorstCaseBound(gamma, direction, float(total_m), float(total_v),
                          float(scores.t_obs[k]), tuple(chosen))


# exact randomization distribution

def enumerate_assignments(design_or_ptr):
    """Yield every treated-member index tuple, one member per stratum."""
    yield from itertools.product(*(range(a, b) for a, b in _strata(design_or_ptr)))


def exact_count_pvalue(scores: ScoreMatrix, design: MatchedDesign, k: int,
                       alternative: str = "greater") -> tuple[int, int]:
    """``(count, |Omega|)`` for the uniform-assignment tail of outcome ``k``.

    ``"greater"`` counts assignments with ``T >= t``, ``"less"`` ``T <= t``,
    ``"two-sided"`` ``|T - E T| >= |t - E T|``.  Comparisons allow a relative
    slack of 1e-9 so exact ties in the scores count as ties.
    """
    q = np.asarray(scores.q[:, k], dtype=float)
    t = float(scores.t_obs[k])
    strata = _strata(design)
    center = sum(q[a:b].mean() for a, b in strata)
    slack = 1e-9 * max(1.0, float(np.abs(q).sum()))
    count = total = 0
    for pick in enumerate_assignments(design):
        T = float(sum(q[j] for j in pick))
        total += 1
        if alternative == "greater":
            hit = T >= t - slack
        elif alternative == "less":
            hit = T <= t + slack
        else:
            hit = abs(T - center) >= abs(t - center) - slack
        count += hit
    return count, total


# grid search for the minimax value

def criterion_at_u(q, t, ptr, gamma, thresholds, alternatives, u) -> np.ndarray:
    """``zeta~_k`` for every outcome at confounder values ``u``."""
    q = np.asarray(q, dtype=float)
    K = q.shape[1]
    mu = np.zeros(K)
    var = np.zeros(K)
    for a, b in _strata(ptr):
        p = probabilities(u[a:b], gamma)
        m1 = p @ q[a:b]
        mu += m1
        var += p @ (q[a:b] ** 2) - m1 ** 2
    return _criterion(mu, var, t, thresholds, alternatives)


def _criterion(mu, var, t, thresholds, alternatives):
    gap = np.asarray(t) - mu
    z = gap ** 2 - np.asarray(thresholds) * var
    for k, alt in enumerate(alternatives):
        if alt == "greater":
            z[..., k] = np.where(gap[..., k] < 0, NEG, z[..., k])
        elif alt == "less":
            z[..., k] = np.where(gap[..., k] > 0, NEG, z[..., k])
    return z


def _moments_and_grads(q, strata, gamma, u):
    """Means, variances and their ``u``-gradients (``N x K``) for every outcome."""
    N, K = q.shape
    lg = math.log(gamma)
    mu = np.zeros(K)
    var = np.zeros(K)
    dmu = np.zeros((N, K))
    dvar = np.zeros((N, K))
    for a, b in strata:
        p = probabilities(u[a:b], gamma)
        qi = q[a:b]
        m1 = p @ qi
        mu += m1
        var += p @ qi ** 2 - m1 ** 2
        # d p_j / d u_l = lg p_j (delta_jl - p_l)
        for g, out in ((qi, dmu), (qi ** 2 - 2.0 * m1 * qi, dvar)):
            out[a:b] = lg * p[:, None] * (g - p @ g)
    return mu, var, dmu, dvar


def _epigraph_polish(q, t, strata, gamma, thr, alts, u0):
    """Local solves of ``min y s.t. zeta_k(u) <= y`` started at ``u0``.

    Every local minimum in ``u`` is global: modulo within-stratum shifts the
    map ``u -> rho`` is a homeomorphism onto the polytope, on which the
    objective is convex.
    """
    from scipy.optimize import minimize

    N, K = q.shape
    one = [k for k, a in enumerate(alts) if a != "two-sided"]
    two = [k for k, a in enumerate(alts) if a == "two-sided"]
    scale = max(1.0, float(np.abs(t).max()) ** 2)
    out = []
    for pattern in itertools.product((True, False), repeat=len(one)):
        on = two + [k for k, p in zip(one, pattern) if p]
        # with every outcome switched off, y bounds the largest side violation
        feas = not on
        # right side for an active one-sided outcome, strictly wrong side otherwise
        sides = [(k, (1.0 if alts[k] == "greater" else -1.0) * (1.0 if p else -1.0), p)
                 for k, p in zip(one, pattern)]

        def cons_fun(x):
            mu, var, _, _ = _moments_and_grads(q, strata, gamma, x[:N])
            z = (t - mu) ** 2 - thr * var
            vals = [(x[N] - z[k]) / scale for k in on]
            vals += [sg * (t[k] - mu[k]) + (x[N] if feas else 0.0)
                     - (0.0 if p else 1e-9 * math.sqrt(scale)) for k, sg, p in sides]
            return np.array(vals)

        def cons_jac(x):
            mu, var, dmu, dvar = _moments_and_grads(q, strata, gamma, x[:N])
            rows = []
            for k in on:
                dz = -2.0 * (t[k] - mu[k]) * dmu[:, k] - thr[k] * dvar[:, k]
                rows.append(np.append(-dz, 1.0) / scale)
            for k, sg, _ in sides:
                rows.append(np.append(-sg * dmu[:, k], 1.0 if feas else 0.0))
            return np.array(rows)

        mu, var, _, _ = _moments_and_grads(q, strata, gamma, u0)
        if feas:
            y0 = float(max(-sg * (t[k] - mu[k]) for k, sg, _ in sides)) + 1.0
        else:
            y0 = float(((t - mu) ** 2 - thr * var)[on].max())
        res = minimize(lambda x: x[N] / scale, np.append(u0, y0),
                       jac=lambda x: np.append(np.zeros(N), 1.0 / scale), method="SLSQP",
                       bounds=[(0.0, 1.0)] * N + [(None, None)],
                       constraints=[{"type": "ineq", "fun": cons_fun, "jac": cons_jac}],
                       options={"ftol": 1e-14, "maxiter": 500})
        out.append(np.clip(res.x[:N], 0.0, 1.0))
    return out


@dataclass(frozen=True)
class OracleResult:
    value: float
    u: np.ndarray
    resolution: tuple  # grid steps used per stratum
    refinement_steps: int


def _stratum_grid(n: int, resolution: int):
    """Grid points in ``[0,1]^n`` with the smallest coordinate at 0.

    ``rho`` only depends on differences of ``u`` within a stratum, so
    pinning the minimum loses no probability vector.  The resolution is
    lowered for large strata to keep at most ``STRATUM_GRID_CAP`` points.
    """
    r = resolution
    while r > 2 and r ** n > STRATUM_GRID_CAP:
        r -= 1
    axis = np.linspace(0.0, 1.0, r)
    pts = np.array(list(itertools.product(axis, repeat=n)))
    pts = pts[pts.min(axis=1) == 0.0]
    return pts, r


def grid_minimax(problem, resolution: int = 21, refine: int = 3) -> OracleResult:
    """Upper bound on ``min_u max_k zeta~_k`` by grid search and pattern search.

    Each stratum gets its own grid; the per-stratum choices are tuned by
    coordinate descent (strata couple only through summed moments), and the
    best point is polished by a compass search over single and paired
    coordinates whose step shrinks to 1e-5.  ``refine`` bounds the number of
    compass passes.
    """
    q = np.asarray(problem.q, dtype=float)
    t = np.asarray(problem.t, dtype=float)
    ptr = np.asarray(problem.ptr)
    gamma = float(problem.gamma)
    alts = tuple(problem.alternatives)
    N, K = q.shape
    if N > GRID_N_MAX or K > GRID_K_MAX:
        raise OracleCapExceeded(f"grid oracle needs N <= {GRID_N_MAX} and K <= {GRID_K_MAX}")
    thr = np.asarray(problem.thresholds, dtype=float)
    strata = _strata(ptr)

    grids, res, m1s, vs = [], [], [], []
    for a, b in strata:
        pts, r = _stratum_grid(b - a, resolution)
        w = np.power(gamma, pts)
        p = w / w.sum(axis=1, keepdims=True)
        m1 = p @ q[a:b]
        grids.append(pts)
        res.append(r)
        m1s.append(m1)
        vs.append(p @ (q[a:b] ** 2) - m1 ** 2)

    def total(choice):
        mu = sum(m1s[i][c] for i, c in enumerate(choice))
        var = sum(vs[i][c] for i, c in enumerate(choice))
        return mu, var

    def value_of(choice):
        mu, var = total(choice)
        return float(_criterion(mu, var, t, thr, alts).max())

    # starts: all-equal u, and each outcome's per-stratum extreme-mean grid point
    starts = [[int(np.argmax((g == 0).all(axis=1))) for g in grids]]
    for k in range(K):
        for sgn in (1.0, -1.0):
            starts.append([int(np.argmax(sgn * m[:, k])) for m in m1s])
    best_choice, best_val = None, math.inf
    for choice in starts:
        val = value_of(choice)
        for _ in range(100):
            improved = False
            for i in range(len(strata)):
                mu, var = total(choice)
                mu_o = mu - m1s[i][choice[i]]
                var_o = var - vs[i][choice[i]]
                cand = _criterion(mu_o + m1s[i], var_o + vs[i], t, thr, alts).max(axis=1)
                c = int(np.argmin(cand))
                if cand[c] < val - 1e-15 * max(1.0, abs(val)):
                    choice[i], val, improved = c, float(cand[c]), True
            if not improved:
                break
        if val < best_val:
            best_choice, best_val = list(choice), val

    u = np.concatenate([grids[i][c] for i, c in enumerate(best_choice)])

    def f(x):
        return float(criterion_at_u(q, t, ptr, gamma, thr, alts, x).max())

    val = f(u)
    # smooth polish on the epigraph, one run per on/off pattern of one-sided outcomes
    for x in _epigraph_polish(q, t, strata, gamma, thr, alts, u):
        fx = f(x)
        if fx < val:
            u, val = x, fx

    dirs = [np.eye(N)[j] for j in range(N)]
    for a, b in itertools.combinations(range(N), 2):
        for sb in (1.0, -1.0):
            d = np.zeros(N)
            d[a], d[b] = 1.0, sb
            dirs.append(d)
    dirs = [s * d for d in dirs for s in (1.0, -1.0)]
    steps = 0
    for _ in range(max(refine, 0)):
        start_val = val
        h = 1.0 / (max(res) - 1)
        while h >= 1e-5:
            moved = True
            while moved:
                moved = False
                for d in dirs:
                    x = np.clip(u + h * d, 0.0, 1.0)
                    fx = f(x)
                    if fx < val:
                        u, val, moved = x, fx, True
                        steps += 1
            h *= 0.5
        if val >= start_val:
            break
    return OracleResult(val, u, tuple(res), steps)


# instance generators for oracle runs

GAMMAS = (1.0, 1.5, 2.0, 5.0, 10.0)


def random_instance(rng: np.random.Generator, n_max: int = GRID_N_MAX, k_max: int = GRID_K_MAX,
                    gammas=GAMMAS, one_sided: bool = True):
    """Random small problem: strata of 2 to 4 members, ``t`` one to four
    standard deviations from the uniform mean."""
    from .minimax import MinimaxProblem

    sizes = []
    while True:
        n = int(rng.integers(2, 5))
        if sum(sizes) + n > n_max:
            break
        sizes.append(n)
    if not sizes:
        sizes = [2]
    ptr = np.concatenate([[0], np.cumsum(sizes)])
    K = int(rng.integers(1, k_max + 1))
    q = rng.normal(size=(int(ptr[-1]), K))
    mu = sum(q[a:b].mean(axis=0) for a, b in _strata(ptr))
    var = sum(q[a:b].var(axis=0) for a, b in _strata(ptr))
    t = mu + rng.choice([-1.0, 1.0], K) * rng.uniform(1.0, 4.0, K) * np.sqrt(var)
    alts = ()
    if one_sided and rng.random() < 0.5:
        alts = tuple(str(a) for a in rng.choice(["two-sided", "greater", "less"], K))
    gamma = float(rng.choice(gammas))
    return MinimaxProblem(q, t, ptr, gamma, 0.05, alts)


def opposed_instance(rng: np.random.Generator, n_pairs: int = 4, gamma: float | None = None):
    """Two outcomes scored on opposite members of identical pairs.

    Outcome 1 scores ``a`` on the first member of each pair and outcome 2
    scores ``b`` on the second, so raising one mean lowers the other.  With
    ``x`` the first member's probability in every pair, ``t`` is set so that
    ``zeta_1`` falls and ``zeta_2`` rises through a common value at
    ``x* = G^u / (1 + G^u)`` with ``u`` drawn from ``[0.2, 0.8]``.  Both
    criteria are convex and the pairs are exchangeable, so the minimax
    optimum sits at ``x*``: a fractional confounder at which the joint
    criterion exceeds either outcome's own minimum.
    """
    from .minimax import MinimaxProblem

    g = float(rng.choice(GAMMAS[1:])) if gamma is None else float(gamma)
    n = int(n_pairs)
    c = chi2_threshold(0.05 / 2)
    while True:
        a, b = rng.uniform(0.5, 2.0, 2)
        u = rng.uniform(0.2, 0.8)
        x = g ** u / (1.0 + g ** u)
        v = x * (1.0 - x)
        t2 = n * b * (1.0 - x) + rng.uniform(0.2, 1.5) * math.sqrt(n * v) * b
        z2 = (t2 - n * b * (1.0 - x)) ** 2 - c * n * b * b * v
        rhs = z2 + c * n * a * a * v
        if rhs <= 0:
            continue
        t1 = n * a * x + math.sqrt(rhs)
        slope1 = -2.0 * n * a * math.sqrt(rhs) - c * n * a * a * (1.0 - 2.0 * x)
        slope2 = 2.0 * n * b * (t2 - n * b * (1.0 - x)) - c * n * b * b * (1.0 - 2.0 * x)
        if slope1 < 0 < slope2:
            break
    q = np.zeros((2 * n, 2))
    q[0::2, 0] = a
    q[1::2, 1] = b
    ptr = np.arange(0, 2 * n + 1, 2)
    return MinimaxProblem(q, np.array([t1, t2]), ptr, g, 0.05)


__all__ = [
    "OracleCapExceeded", "OracleResult", "probabilities", "enumerate_binary_u",
    "enumerate_assignments", "exact_count_pvalue", "criterion_at_u", "grid_minimax",
    "random_instance", "opposed_instance", "GAMMAS",
]
