import numpy as np
import pytest
from hypothesis import given, strategies as st

from sensi._ipm import Layout
from sensi.design import MatchedDesign
from sensi.minimax import MinimaxProblem, zeta
from sensi.oracle import enumerate_binary_u, probabilities
from sensi.randomization import chi2_threshold, uniform_moments
from sensi.single import (mean_range, separable_two_sided, separable_worst_case,
                          single_outcome_qp, stratum_candidates, worst_case_pvalue)
from sensi.statistics import ScoreMatrix

from conftest import random_design, random_scores


def one_pair(t=1.0):
    d = MatchedDesign.pairs([1.0], [0.0])
    return d, ScoreMatrix(d.outcomes, [t], ("custom",))


def test_pair_candidate():
    (c,) = stratum_candidates([1.0, 0.0], 2.0)
    assert c.rho(2.0) == pytest.approx([2 / 3, 1 / 3])
    assert (c.mean, c.variance) == pytest.approx((2 / 3, 2 / 9))


def test_candidates_collapse_at_gamma_one():
    assert all(c.mean == 0.5 for c in stratum_candidates([1.0, 0.0], 1.0))


def test_triple_candidate():
    cands = stratum_candidates([3.0, 1.0, 2.0], 3.0)
    # cut 2 puts u = 1 on the scores 3 and 2
    assert cands[1].mean == pytest.approx(16 / 7)
    assert cands[1].rho(3.0) == pytest.approx([3 / 7, 1 / 7, 3 / 7])


@given(st.integers(0, 10_000), st.sampled_from(["max", "min"]))
def test_bound_rho_reproduces_moments(seed, direction):
    rng = np.random.default_rng(seed)
    d = random_design(rng)
    s = random_scores(rng, d)
    b = separable_worst_case(s, d, 0, 2.0, direction)
    prob = MinimaxProblem.from_scores(d, s, 2.0, 0.05, [0])
    mu, var = prob.moments(b.rho())
    assert mu[0] == pytest.approx(b.mean, abs=1e-12)
    assert var[0] == pytest.approx(b.variance, abs=1e-12)


def test_separable_pair_deviate():
    d, s = one_pair()
    b = separable_worst_case(s, d, 0, 2.0)
    assert (b.mean, b.variance) == pytest.approx((2 / 3, 2 / 9))
    assert b.deviate == pytest.approx(0.7071, abs=1e-4)


@given(st.integers(0, 10_000))
def test_separable_reduces_at_gamma_one(seed):
    rng = np.random.default_rng(seed)
    d = random_design(rng)
    s = random_scores(rng, d)
    m = uniform_moments(s, d, 0)
    for direction in ("max", "min"):
        b = separable_worst_case(s, d, 0, 1.0, direction)
        assert b.mean == pytest.approx(m.mean, abs=1e-12)
        assert b.variance == pytest.approx(m.variance, abs=1e-12)


def test_separable_matches_binary_enumeration_on_three_triples():
    rng = np.random.default_rng(11)
    for _ in range(20):
        d = random_design(rng, I=3, sizes=(3,))
        s = random_scores(rng, d, integer=True)
        for g in (1.5, 3.0):
            for direction in ("max", "min"):
                a = separable_worst_case(s, d, 0, g, direction)
                b = enumerate_binary_u(s, d, 0, g, direction)
                assert a.mean == pytest.approx(b.mean, abs=1e-12)
                assert a.variance == pytest.approx(b.variance, abs=1e-12)


@given(st.integers(0, 10_000), st.floats(1.0, 5.0), st.floats(0.0, 3.0))
def test_extreme_means_monotone_in_gamma(seed, g, dg):
    rng = np.random.default_rng(seed)
    d = random_design(rng)
    s = random_scores(rng, d)
    lo = separable_worst_case(s, d, 0, g, "max").mean
    hi = separable_worst_case(s, d, 0, g + dg, "max").mean
    assert hi >= lo - 1e-12
    assert separable_worst_case(s, d, 0, g + dg, "min").mean <= \
        separable_worst_case(s, d, 0, g, "min").mean + 1e-12


@given(st.integers(0, 10_000), st.floats(1.0, 6.0))
def test_separable_mean_dominates_random_binary_u(seed, g):
    rng = np.random.default_rng(seed)
    d = random_design(rng)
    s = random_scores(rng, d)
    b = separable_worst_case(s, d, 0, g, "max")
    q = s.q[:, 0]
    for _ in range(10):
        u = rng.integers(0, 2, d.N)
        mean = sum(probabilities(u[a:c], g) @ q[a:c] for a, c in zip(d.ptr[:-1], d.ptr[1:]))
        assert b.mean >= mean - 1e-12


def test_qp_pair_at_gamma_one():
    d, s = one_pair()
    sol = single_outcome_qp(s, d, 0, 1.0)
    assert sol.y == pytest.approx(0.25 - 3.841459 * 0.25, abs=1e-6)
    assert sol.y == pytest.approx(-0.7104, abs=1e-4)
    assert not sol.reject


@given(st.integers(0, 10_000), st.sampled_from([1.0, 1.3, 2.0, 4.0]))
def test_qp_below_separable_zeta(seed, g):
    rng = np.random.default_rng(seed)
    d = random_design(rng)
    s = random_scores(rng, d)
    sol = single_outcome_qp(s, d, 0, g)
    prob = MinimaxProblem.from_scores(d, s, g, 0.05, [0])
    sep = separable_two_sided(s, d, 0, g)
    assert sol.y <= zeta(prob, 0, sep.rho()) + 1e-9


def test_qp_gamma_one_is_closed_form(rng):
    for _ in range(10):
        d = random_design(rng)
        s = random_scores(rng, d)
        m = uniform_moments(s, d, 0)
        want = (s.t_obs[0] - m.mean) ** 2 - chi2_threshold(0.05) * m.variance
        assert single_outcome_qp(s, d, 0, 1.0).y == pytest.approx(want, abs=1e-9)


def test_mean_range_matches_separable(rng):
    d = random_design(rng)
    s = random_scores(rng, d)
    lo, hi = mean_range(s.q[:, 0], Layout.from_sizes(d.sizes), 2.5)
    assert hi == pytest.approx(separable_worst_case(s, d, 0, 2.5, "max").mean, abs=1e-12)
    assert lo == pytest.approx(separable_worst_case(s, d, 0, 2.5, "min").mean, abs=1e-12)


def test_worst_case_pvalue_interval_and_level(rng):
    d = MatchedDesign.pairs(rng.normal(0.8, 1, 40), rng.normal(0, 1, 40))
    s = ScoreMatrix.from_design(d, d.outcomes[:, 0] - d.outcomes.mean())
    p1 = worst_case_pvalue(s, d, 0, 1.0).p
    p2 = worst_case_pvalue(s, d, 0, 2.0).p
    assert p2 >= p1
    # the decision at level a agrees with the sign of the QP minimum
    for g in (1.0, 1.5, 2.0, 3.0):
        wc = worst_case_pvalue(s, d, 0, g)
        qp = single_outcome_qp(s, d, 0, g, 0.05)
        if abs(wc.p - 0.05) > 1e-6:
            assert (wc.p <= 0.05) == qp.reject
    huge = worst_case_pvalue(s, d, 0, 1e4)
    assert huge.p == 1.0 and huge.method == "interval"


def test_one_sided_wrong_side_pvalue_above_half():
    d = MatchedDesign.pairs([0.0, 0.0], [1.0, 1.0])
    s = ScoreMatrix.from_design(d, d.outcomes)
    assert worst_case_pvalue(s, d, 0, 1.5, "greater").p > 0.5
