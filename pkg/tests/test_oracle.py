import numpy as np
import pytest
from hypothesis import given, strategies as st

from sensi.design import MatchedDesign
from sensi.minimax import MinimaxProblem, all_zetas, solve_minimax
from sensi.oracle import (OracleCapExceeded, criterion_at_u, enumerate_binary_u,
                          exact_count_pvalue, grid_minimax, opposed_instance, probabilities,
                          random_instance)
from sensi.randomization import exact_pvalue, uniform_moments
from sensi.statistics import ScoreMatrix

from conftest import random_design, random_scores


def test_binary_pair():
    d = MatchedDesign.pairs([1.0], [0.0])
    s = ScoreMatrix.from_design(d, d.outcomes)
    b = enumerate_binary_u(s, d, 0, 2.0)
    assert b.mean == pytest.approx(2 / 3)
    assert b.selected[0].order[:b.selected[0].cut] == (0,)


def test_binary_gamma_one(rng):
    d = random_design(rng)
    s = random_scores(rng, d)
    m = uniform_moments(s, d, 0)
    assert enumerate_binary_u(s, d, 0, 1.0).mean == pytest.approx(m.mean, abs=1e-12)


def test_caps():
    d = MatchedDesign.pairs(np.ones(11), np.zeros(11))
    s = ScoreMatrix.from_design(d, d.outcomes)
    with pytest.raises(OracleCapExceeded):
        enumerate_binary_u(s, d, 0, 2.0)
    q = np.zeros((9, 1))
    q[0] = 1
    prob = MinimaxProblem(q, [1.0], [0, 3, 6, 9], 2.0)
    with pytest.raises(OracleCapExceeded):
        grid_minimax(prob)


@given(st.integers(0, 10_000), st.sampled_from(["greater", "less", "two-sided"]))
def test_exact_counts_match_enumeration(seed, alt):
    rng = np.random.default_rng(seed)
    d = random_design(rng)
    s = random_scores(rng, d, integer=True)
    count, total = exact_count_pvalue(s, d, 0, alt)
    assert total == d.assignment_count()
    assert exact_pvalue(s, d, 0, alt) == count / total


def test_gamma_one_value_is_closed_form(rng):
    for _ in range(5):
        prob = random_instance(rng, gammas=(1.0,))
        res = grid_minimax(prob)
        want = all_zetas(prob, prob.layout.uniform()).max()
        assert res.value == pytest.approx(want, abs=1e-12)


@given(st.integers(0, 10_000))
def test_shift_invariance(seed):
    rng = np.random.default_rng(seed)
    prob = random_instance(rng)
    u = rng.uniform(0, 0.5, len(prob.q))
    shift = np.repeat(rng.uniform(0, 0.5, len(prob.ptr) - 1), np.diff(prob.ptr))
    a = criterion_at_u(prob.q, prob.t, prob.ptr, prob.gamma, prob.thresholds,
                       prob.alternatives, u)
    b = criterion_at_u(prob.q, prob.t, prob.ptr, prob.gamma, prob.thresholds,
                       prob.alternatives, u + shift)
    assert b == pytest.approx(a, rel=1e-12, abs=1e-12)


@given(st.integers(0, 10_000))
def test_oracle_zeta_matches_solver_zeta(seed):
    rng = np.random.default_rng(seed)
    prob = random_instance(rng)
    u = rng.uniform(0, 1, len(prob.q))
    rho = np.concatenate([probabilities(u[a:b], prob.gamma)
                          for a, b in zip(prob.ptr[:-1], prob.ptr[1:])])
    a = criterion_at_u(prob.q, prob.t, prob.ptr, prob.gamma, prob.thresholds,
                       prob.alternatives, u)
    b = all_zetas(prob, rho)
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


def test_refinement_never_increases(rng):
    for _ in range(5):
        prob = random_instance(rng)
        coarse = grid_minimax(prob, resolution=5, refine=0)
        fine = grid_minimax(prob, resolution=5, refine=3)
        assert fine.value <= coarse.value + 1e-15


def test_grid_value_is_attained(rng):
    prob = random_instance(rng)
    res = grid_minimax(prob)
    z = criterion_at_u(prob.q, prob.t, prob.ptr, prob.gamma, prob.thresholds,
                       prob.alternatives, res.u)
    assert res.value == pytest.approx(z.max(), abs=1e-12)
    assert np.all((res.u >= 0) & (res.u <= 1))


def test_opposed_instance_fractional_and_agreeing():
    rng = np.random.default_rng(9)
    prob = opposed_instance(rng, gamma=2.0)
    sol = solve_minimax(prob)
    res = grid_minimax(prob)
    assert abs(sol.y - res.value) <= 1e-4
    frac = (res.u > 1e-3) & (res.u < 1 - 1e-3)
    assert frac.any()
