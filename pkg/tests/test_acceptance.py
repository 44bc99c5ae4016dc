"""Acceptance criteria, one PASS/FAIL line each.

The Monte Carlo criteria (5 to 7) run 1,000 replicates per scenario and
take several minutes; they are marked ``slow`` (deselect with
``-m "not slow"``).
"""

import math

import numpy as np
import pytest

from sensi.design import MatchedDesign
from sensi.minimax import MinimaxProblem, implied_probability, solve_minimax
from sensi.oracle import (enumerate_binary_u, exact_count_pvalue, grid_minimax, opposed_instance,
                          random_instance)
from sensi.randomization import chi2_threshold, exact_pvalue, uniform_moments
from sensi.simulation import PRESETS, run_power_study
from sensi.single import separable_worst_case, single_outcome_qp
from sensi.statistics import ScoreMatrix

REPS = 1000


def single_values(prob):
    """Each outcome's own minimum of zeta at the joint level alpha/K."""
    out = []
    for k in range(prob.K):
        p = MinimaxProblem(prob.q[:, [k]], prob.t[[k]], prob.ptr, prob.gamma,
                           prob.alpha / prob.K, (prob.alternatives[k],))
        out.append(solve_minimax(p).y)
    return np.array(out)


@pytest.fixture(scope="module")
def oracle_runs():
    rng = np.random.default_rng(2024)
    rows = []
    for i in range(120):
        prob = random_instance(rng)
        rows.append(("random", prob, solve_minimax(prob), grid_minimax(prob)))
    for g in (1.5, 2.0, 5.0, 10.0):
        for _ in range(8):
            prob = opposed_instance(rng, n_pairs=4, gamma=g)
            rows.append(("opposed", prob, solve_minimax(prob), grid_minimax(prob)))
    return rows


def test_criterion_1_implied_probability(criterion):
    p = implied_probability([0.953, 0.391], 10.0)[1]
    criterion("criterion 1 implied probability", abs(p - 0.215) <= 0.005,
              f"p = {p:.4f} (target 0.215 +/- 0.005)")


def test_criterion_2_oracle_equivalence(criterion, oracle_runs):
    gaps = [abs(sol.y - orc.value) for _, _, sol, orc in oracle_runs]
    opposed = [(prob, sol, orc) for fam, prob, sol, orc in oracle_runs if fam == "opposed"]
    fractional = sum(bool(np.any((orc.u > 1e-3) & (orc.u < 1 - 1e-3))) for _, _, orc in opposed)
    # the joint test is strictly stronger than every single-outcome test at alpha/K
    margins = [sol.y - single_values(prob).max() for prob, sol, _ in opposed]
    gammas = sorted({prob.gamma for _, prob, _, _ in oracle_runs})
    n_max = max(int(prob.ptr[-1]) for _, prob, _, _ in oracle_runs)
    k_max = max(prob.K for _, prob, _, _ in oracle_runs)
    ok = (len(oracle_runs) >= 100 and max(gaps) <= 1e-4 and fractional == len(opposed)
          and min(margins) > 0 and n_max <= 8 and k_max <= 3)
    criterion("criterion 2 oracle equivalence", ok,
              f"{len(oracle_runs)} instances (N <= {n_max}, K <= {k_max}, Gamma in {gammas}), "
              f"max gap {max(gaps):.2e}; opposed family: {fractional}/{len(opposed)} fractional "
              f"u, y* - max_k zeta*_k >= {min(margins):.3g}")


@pytest.mark.xfail(strict=True, reason="y* is bounded below by every single-outcome minimum "
                   "at alpha/K, so y* < min_k zeta*_k cannot hold")
def test_criterion_2_literal_strict_inequality(oracle_runs):
    prob, sol = next((p, s) for fam, p, s, _ in oracle_runs if fam == "opposed")
    assert sol.y < single_values(prob).min()


def test_criterion_3_dominance_on_instances(criterion, oracle_runs):
    violations = checked = bonferroni = 0
    for _, prob, sol, _ in oracle_runs:
        if any(a != "two-sided" for a in prob.alternatives):
            continue
        checked += 1
        bonf = single_values(prob).max() >= 0
        bonferroni += bonf
        violations += bonf and not sol.reject
    criterion("criterion 3 dominance (instances)", violations == 0,
              f"{violations} violations over {checked} two-sided instances "
              f"({bonferroni} rejected by Bonferroni)")


def test_criterion_4_gamma_one_reduction(criterion):
    rng = np.random.default_rng(77)
    worst_qp = worst_mm = 0.0
    for _ in range(50):
        I = int(rng.integers(3, 9))
        K = int(rng.integers(1, 4))
        sizes = rng.integers(2, 5, I)
        ptr = np.concatenate([[0], np.cumsum(sizes)])
        treated = np.zeros(ptr[-1], bool)
        treated[ptr[:-1]] = True
        d = MatchedDesign(rng.normal(size=(ptr[-1], K)), treated, ptr, np.zeros(I, bool))
        s = ScoreMatrix.from_design(d, rng.normal(size=(d.N, K)))
        closed = []
        for k in range(K):
            m = uniform_moments(s, d, k)
            z1 = (s.t_obs[k] - m.mean) ** 2 - chi2_threshold(0.05) * m.variance
            worst_qp = max(worst_qp, abs(single_outcome_qp(s, d, k, 1.0).y - z1))
            closed.append((s.t_obs[k] - m.mean) ** 2 - chi2_threshold(0.05 / K) * m.variance)
        y = solve_minimax(MinimaxProblem.from_scores(d, s, 1.0)).y
        worst_mm = max(worst_mm, abs(y - max(closed)))
    mismatches = checked = 0
    for _ in range(30):
        I = int(rng.integers(2, 9))
        sizes = rng.integers(2, 5, I)
        if np.prod(sizes) > 2 ** 16:
            continue
        ptr = np.concatenate([[0], np.cumsum(sizes)])
        treated = np.zeros(ptr[-1], bool)
        treated[ptr[:-1]] = True
        d = MatchedDesign(np.zeros((ptr[-1], 1)), treated, ptr, np.zeros(I, bool))
        s = ScoreMatrix.from_design(d, rng.integers(0, 5, d.N).astype(float))
        for alt in ("greater", "less", "two-sided"):
            count, total = exact_count_pvalue(s, d, 0, alt)
            checked += 1
            mismatches += exact_pvalue(s, d, 0, alt) != count / total
    ok = worst_qp <= 1e-9 and worst_mm <= 1e-9 and mismatches == 0
    criterion("criterion 4 Gamma = 1 reduction", ok,
              f"50 designs: max |QP - closed form| {worst_qp:.1e}, max |minimax - closed form| "
              f"{worst_mm:.1e}; exact p-values {checked - mismatches}/{checked} equal to counts")


def test_criterion_8_separable_vs_enumeration(criterion):
    rng = np.random.default_rng(88)
    strata = mismatches = 0
    worst = 0.0
    while strata < 240:
        n = int(rng.integers(2, 16))
        ptr = np.array([0, n])
        treated = np.zeros(n, bool)
        treated[0] = True
        d = MatchedDesign(np.zeros((n, 1)), treated, ptr, [False])
        q = rng.integers(0, 6, n).astype(float) if rng.random() < 0.5 else rng.normal(size=n)
        if np.ptp(q) == 0:
            continue
        s = ScoreMatrix.from_design(d, q)
        g = float(rng.choice([1.0, 1.25, 2.0, 3.0, 6.0]))
        for direction in ("max", "min"):
            a = separable_worst_case(s, d, 0, g, direction)
            b = enumerate_binary_u(s, d, 0, g, direction)
            err = abs(a.mean - b.mean)
            worst = max(worst, err)
            mismatches += err > 1e-12 * max(1.0, abs(b.mean))
        strata += 1
    criterion("criterion 8 separable vs binary enumeration", mismatches == 0,
              f"{strata} strata (n <= 15), both directions, max mean difference {worst:.1e}")


# Monte Carlo criteria

@pytest.fixture(scope="module")
def power_runs():
    a = PRESETS["table1-t2-s1"].replace(gammas=(1.5,), replications=REPS)
    b = PRESETS["table1-t1-s2"].replace(gammas=(1.25,), replications=REPS)
    return run_power_study(a, threads=1), run_power_study(b, threads=1)


@pytest.fixture(scope="module")
def fwer_run():
    sc = PRESETS["appc-s1"].replace(replications=REPS)
    return run_power_study(sc, threads=1)


def _within(r, target, tol):
    return abs(r.rate - target) <= tol


@pytest.mark.slow
def test_criterion_5_power(criterion, power_runs):
    a, b = power_runs
    sa, ma = a.rate(1.5, "separate"), a.rate(1.5, "minimax")
    sb, mb = b.rate(1.25, "separate"), b.rate(1.25, "minimax")
    ok = (_within(sa, 0.28, 0.045) and _within(ma, 0.66, 0.05) and _within(sb, 0.77, 0.045)
          and _within(mb, 0.80, 0.045) and not a.failures and not b.failures)
    criterion("criterion 5 five-outcome power", ok,
              f"tau2/Sigma1 Gamma 1.5: separate {sa.rate:.3f} (0.28), minimax {ma.rate:.3f} "
              f"(0.66); tau1/Sigma2 Gamma 1.25: separate {sb.rate:.3f} (0.77), minimax "
              f"{mb.rate:.3f} (0.80); {REPS} reps each")


@pytest.mark.slow
def test_criterion_6_familywise_error(criterion, fwer_run):
    r1 = fwer_run.rate(1.0, "closed-testing", "1&2")
    r2 = fwer_run.rate(1.05, "closed-testing", "1&2")
    bound = 0.05 + 3 * r1.se
    tol = 2 * math.hypot(r1.se, r2.se)
    ok = r1.rate <= bound and r2.rate <= r1.rate + tol and not fwer_run.failures
    criterion("criterion 6 familywise error", ok,
              f"Gamma 1: {r1.rate:.4f} <= {bound:.4f} (0.0506); Gamma 1.05: {r2.rate:.4f} "
              f"(0.0189), not above Gamma 1 by more than {tol:.4f}; {REPS} reps")


@pytest.mark.slow
def test_criterion_3_dominance_replicates(criterion, power_runs, fwer_run):
    runs = [*power_runs, fwer_run]
    total = sum(sum(r.dominance_violations.values()) for r in runs)
    reps = sum(r.valid * len(r.scenario.gammas) for r in runs)
    criterion("criterion 3 dominance (replicates)", total == 0,
              f"{total} violations over {reps} replicate-Gamma cells")


@pytest.mark.slow
def test_criterion_7_closed_testing_contains_holm(criterion, power_runs, fwer_run):
    runs = [*power_runs, fwer_run]
    total = sum(sum(r.holm_containment_violations.values()) for r in runs)
    per_outcome = all(r.rate(g, "closed-testing", k).count >= r.rate(g, "separate", k).count
                      for r in runs for g in r.scenario.gammas for k in range(r.scenario.K))
    reps = sum(r.valid * len(r.scenario.gammas) for r in runs)
    criterion("criterion 7 closed testing contains Holm", total == 0 and per_outcome,
              f"{total} replicate-wise violations over {reps} replicate-Gamma cells")
