import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sensi.design import MatchedDesign
from sensi.statistics import ScoreMatrix

settings.register_profile(
    "repo", deadline=None, derandomize=True, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running Monte Carlo runs")


def random_design(rng, I=None, sizes=(2, 3, 4), K=1):
    """Design with random stratum sizes, member 0 treated, normal outcomes."""
    I = int(rng.integers(2, 6)) if I is None else I
    ns = rng.choice(sizes, I)
    ptr = np.concatenate([[0], np.cumsum(ns)])
    N = int(ptr[-1])
    treated = np.zeros(N, bool)
    treated[ptr[:-1]] = True
    return MatchedDesign(rng.normal(size=(N, K)), treated, ptr, np.zeros(I, bool))


def random_scores(rng, design, integer=False):
    q = rng.integers(0, 6, size=(design.N, design.K)).astype(float) if integer \
        else rng.normal(size=(design.N, design.K))
    return ScoreMatrix.from_design(design, q)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""
    def record(label, ok, detail):
        ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {label}: {detail}")
        print(ACCEPTANCE_LINES[-1])
        assert ok, detail
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
