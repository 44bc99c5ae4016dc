"""Monte Carlo power and error-rate studies on simulated matched pairs.

Each replicate draws ``I`` paired differences from a multivariate normal,
scores them, and at every Gamma runs three analyses:

* ``separate``: one sensitivity analysis per outcome, combined by Holm
  (the overall flag is the Bonferroni test ``min_k P_k <= alpha / K``);
* ``minimax``: the joint test of the overall null;
* ``closed-testing``: closure over all intersections, each tested by minimax.

Replicate ``r`` draws from its own counter-based stream, so results do not
depend on how replicates are spread over worker processes.
"""

from __future__ import annotations

import logging
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .design import MatchedDesign
from .minimax import MinimaxProblem, SolverError, solve_minimax
from .multiplicity import all_intersections, closed_testing, holm_from_tests
from .randomization import DegenerateStatistic
from .statistics import STATISTICS, score_matrix

log = logging.getLogger(__name__)

METHODS = ("separate", "minimax", "closed-testing")
FAILURE_LIMIT = 0.01


class SimulationAborted(RuntimeError):
    """Too many replicates failed for the remaining ones to be trusted."""


def equicorrelated(K: int, rho: float) -> np.ndarray:
    return np.full((K, K), rho) + (1.0 - rho) * np.eye(K)


@dataclass(frozen=True)
class SimulationScenario:
    name: str
    I: int  # noqa: E741
    tau: tuple
    sigma: tuple  # K rows of K entries
    gammas: tuple
    alpha: float = 0.05
    statistic: str = "huber"
    replications: int = 1000
    seed: int = 7
    methods: tuple = METHODS

    def __post_init__(self):
        tau = tuple(float(x) for x in self.tau)
        sigma = tuple(tuple(float(x) for x in row) for row in self.sigma)
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "gammas", tuple(float(g) for g in self.gammas))
        object.__setattr__(self, "methods", tuple(self.methods))
        K = len(tau)
        S = np.array(sigma)
        if S.shape != (K, K):
            raise ValueError(f"sigma must be {K} x {K}")
        if not np.allclose(S, S.T):
            raise ValueError("sigma must be symmetric")
        try:
            np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            raise ValueError("sigma is not positive definite") from None
        if self.I < 2:
            raise ValueError("need at least 2 pairs")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if not self.gammas or min(self.gammas) < 1:
            raise ValueError("Gamma grid must be nonempty with every value >= 1")
        if self.statistic not in STATISTICS:
            raise ValueError(f"unknown statistic {self.statistic!r}")
        bad = set(self.methods) - set(METHODS)
        if bad or not self.methods:
            raise ValueError(f"methods must be drawn from {METHODS}")

    @property
    def K(self) -> int:
        return len(self.tau)

    def replace(self, **kw) -> "SimulationScenario":
        d = asdict(self)
        d.update(kw)
        return SimulationScenario(**d)


# presets

_TABLE1_TAU = {1: [0.25] * 5, 2: [0.25, 0.25, 0.25, 0.25, 0.0], 3: [0.3, 0.3, 0, 0, 0],
               4: [0.3, 0, 0, 0, 0]}
_TABLE2_TAU = {1: [0.2, 0.225, 0.25], 2: [0.25, 0.3, 0.35], 3: [0.2, 0.25, 0.35],
               4: [0.15, 0.25, 0.35]}


def _sigma(K, which):
    return np.eye(K) if which == 1 else equicorrelated(K, 0.5)


def _build_presets():
    out = {}
    for t, tau in _TABLE1_TAU.items():
        for s in (1, 2):
            name = f"table1-t{t}-s{s}"
            out[name] = SimulationScenario(name, 250, tau, _sigma(5, s).tolist(),
                                           (1.25, 1.5, 1.75))
    for t, tau in _TABLE2_TAU.items():
        for s in (1, 2):
            name = f"table2-t{t}-s{s}"
            out[name] = SimulationScenario(name, 250, tau, _sigma(3, s).tolist(),
                                           (1.25, 1.375, 1.5))
    for s in (1, 2):
        name = f"appc-s{s}"
        out[name] = SimulationScenario(name, 250, [0.0, 0.0, 0.3], _sigma(3, s).tolist(),
                                       (1.0, 1.05, 1.1))
    return out


PRESETS = _build_presets()


# scenario files

SCENARIO_GRAMMAR = """\
A scenario file holds one ``key = value`` pair per line.  Blank lines and
text after ``#`` are ignored.  Keys:

    name         free text (default: file stem)
    preset       start from a named preset; later keys override it
    pairs        number of matched pairs I
    tau          comma-separated effect means, one per outcome
    sigma        "identity", "equicorrelated:<r>", or K rows of K numbers
                 separated by ";" (entries within a row by ",")
    gammas       comma-separated values or a lo:hi:step range
    alpha        familywise level (default 0.05)
    statistic    one of: huber, mean-difference, signed-rank, aligned-rank
    replications number of replicates
    seed         integer seed
    methods      comma-separated subset of separate, minimax, closed-testing
"""


def parse_gamma_grid(text: str) -> tuple:
    """``"1.25,1.5"`` or ``"lo:hi:step"`` (inclusive of ``hi`` up to rounding)."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"Gamma range must be lo:hi:step, got {text!r}")
        lo, hi, step = (float(p) for p in parts)
        if step <= 0 or hi < lo:
            raise ValueError(f"bad Gamma range {text!r}")
        n = int(math.floor((hi - lo) / step + 1e-9))
        return tuple(round(lo + i * step, 12) for i in range(n + 1))
    return tuple(float(x) for x in text.split(",") if x.strip())


def _parse_sigma(text: str, K: int):
    text = text.strip()
    if text == "identity":
        return np.eye(K).tolist()
    m = re.fullmatch(r"equicorrelated:\s*([-+0-9.eE]+)", text)
    if m:
        return equicorrelated(K, float(m.group(1))).tolist()
    return [[float(x) for x in row.split(",")] for row in text.split(";") if row.strip()]


def parse_scenario(text: str, name: str = "scenario") -> SimulationScenario:
    """Parse the format described in :data:`SCENARIO_GRAMMAR`."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        raw[key] = (lineno, value)
    fields = {}
    if "preset" in raw:
        preset = raw.pop("preset")[1]
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}")
        fields = asdict(PRESETS[preset])
    fields.setdefault("name", name)
    sigma_text = None
    for key, (lineno, value) in raw.items():
        try:
            if key == "name":
                fields["name"] = value
            elif key == "pairs":
                fields["I"] = int(value)
            elif key == "tau":
                fields["tau"] = [float(x) for x in value.split(",")]
            elif key == "sigma":
                sigma_text = value
            elif key == "gammas":
                fields["gammas"] = parse_gamma_grid(value)
            elif key == "alpha":
                fields["alpha"] = float(value)
            elif key == "statistic":
                fields["statistic"] = value
            elif key == "replications":
                fields["replications"] = int(value)
            elif key == "seed":
                fields["seed"] = int(value)
            elif key == "methods":
                fields["methods"] = tuple(m.strip() for m in value.split(","))
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    if "tau" not in fields:
        raise ValueError("scenario needs tau (or a preset)")
    K = len(fields["tau"])
    if sigma_text is not None:
        fields["sigma"] = _parse_sigma(sigma_text, K)
    fields.setdefault("sigma", np.eye(K).tolist())
    for key in ("I", "gammas"):
        if key not in fields:
            raise ValueError(f"scenario needs {'pairs' if key == 'I' else key}")
    return SimulationScenario(**fields)


def load_scenario(path) -> SimulationScenario:
    path = Path(path)
    return parse_scenario(path.read_text(), path.stem)


# data generation

def replicate_rng(seed: int, rep: int) -> np.random.Generator:
    """Independent Philox stream for replicate ``rep``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, rep])))


def generate_paired_differences(scenario: SimulationScenario, rep: int) -> np.ndarray:
    """``I x K`` treated-minus-control differences for replicate ``rep``."""
    L = np.linalg.cholesky(np.array(scenario.sigma))
    Z = replicate_rng(scenario.seed, rep).standard_normal((scenario.I, scenario.K))
    return np.asarray(scenario.tau) + Z @ L.T


# one replicate

def _intersection_key(members) -> str:
    return "&".join(str(k + 1) for k in members)


def analyze_replicate(scenario: SimulationScenario, rep: int) -> dict:
    """All decisions for one replicate, keyed by Gamma index.

    Returns ``{"rep": r, "error": msg}`` when the replicate cannot be scored
    or a solve fails.
    """
    D = generate_paired_differences(scenario, rep)
    K = scenario.K
    design = MatchedDesign.pairs(D, np.zeros_like(D))
    try:
        scores = score_matrix(design, design.outcomes, scenario.statistic)
        out = {"rep": rep, "gammas": []}
        for gamma in scenario.gammas:
            row = {}
            if "separate" in scenario.methods:
                def test(k, level, gamma=gamma):
                    prob = MinimaxProblem.from_scores(design, scores, gamma, level, [k])
                    return solve_minimax(prob, decide_only=True).reject
                holm = holm_from_tests(test, K, scenario.alpha)
                row["separate"] = {"overall": holm.overall, "outcomes": list(holm.rejected)}
            ct = None
            if "closed-testing" in scenario.methods:
                ct = closed_testing(design, scores, gamma, scenario.alpha)
                final = ct.trace[-1].rejected
                row["closed-testing"] = {
                    "overall": bool(ct.rejects(range(K))),
                    "outcomes": list(ct.rejected),
                    "intersections": {_intersection_key(h.members): h in final
                                      for h in all_intersections(K)},
                }
            if "minimax" in scenario.methods:
                if ct is not None:
                    # the closure's first test is the overall minimax test
                    overall = bool(ct.rejects(range(K)))
                else:
                    prob = MinimaxProblem.from_scores(design, scores, gamma, scenario.alpha)
                    overall = solve_minimax(prob, decide_only=True).reject
                row["minimax"] = {"overall": overall}
            out["gammas"].append(row)
        return out
    except (SolverError, DegenerateStatistic, ValueError) as exc:
        return {"rep": rep, "error": f"{type(exc).__name__}: {exc}"}


# aggregation

@dataclass
class RateEstimate:
    rate: float
    se: float
    count: int
    n: int

    @classmethod
    def from_counts(cls, count: int, n: int) -> "RateEstimate":
        if n == 0:
            return cls(float("nan"), float("nan"), 0, 0)
        p = count / n
        return cls(p, math.sqrt(p * (1.0 - p) / n), count, n)


@dataclass
class PowerReport:
    scenario: SimulationScenario
    rates: dict  # gamma -> method -> {"overall": RateEstimate, "outcomes": [...], ...}
    failures: list
    dominance_violations: dict  # gamma -> count of separate-overall without minimax-overall
    holm_containment_violations: dict  # gamma -> count of Holm rejections missed by closure
    valid: int
    se_degenerate: bool = False
    notes: list = field(default_factory=list)

    def rate(self, gamma: float, method: str, what="overall") -> RateEstimate:
        entry = self.rates[_gkey(gamma)][method]
        if what == "overall":
            return entry["overall"]
        if isinstance(what, int):
            return entry["outcomes"][what]
        return entry["intersections"][what]

    def to_dict(self) -> dict:
        def conv(x):
            if isinstance(x, RateEstimate):
                return {"rate": _num(x.rate), "se": _num(x.se), "count": x.count, "n": x.n}
            if isinstance(x, dict):
                return {k: conv(v) for k, v in x.items()}
            if isinstance(x, list):
                return [conv(v) for v in x]
            return x
        return {
            "scenario": asdict(self.scenario),
            "valid_replicates": self.valid,
            "failures": self.failures,
            "se_degenerate": self.se_degenerate,
            "rates": conv(self.rates),
            "dominance_violations": self.dominance_violations,
            "holm_containment_violations": self.holm_containment_violations,
            "notes": self.notes,
        }

    def csv_rows(self) -> list[list]:
        rows = [["gamma", "method", "target", "rate", "se", "count", "n"]]
        for g, per in self.rates.items():
            for method, entry in per.items():
                targets = [("overall", entry["overall"])]
                targets += [(f"H{k + 1}", r) for k, r in enumerate(entry.get("outcomes", []))]
                targets += [(f"H{key}", r) for key, r in entry.get("intersections", {}).items()
                            if "&" in key]
                for name, r in targets:
                    rows.append([g, method, name, _num(r.rate), _num(r.se), r.count, r.n])
        return rows


def _num(x):
    return None if isinstance(x, float) and math.isnan(x) else x


def _gkey(gamma: float) -> str:
    return repr(float(gamma))


def aggregate(scenario: SimulationScenario, results: list[dict]) -> PowerReport:
    results = sorted(results, key=lambda r: r["rep"])
    failures = [{"rep": r["rep"], "error": r["error"]} for r in results if "error" in r]
    good = [r for r in results if "error" not in r]
    total = len(results)
    if failures and len(failures) >= FAILURE_LIMIT * total:
        raise SimulationAborted(f"{len(failures)} of {total} replicates failed "
                                f"(limit {FAILURE_LIMIT:.0%}); first: {failures[0]['error']}")
    n = len(good)
    K = scenario.K
    rates, dom, holm_v = {}, {}, {}
    for gi, gamma in enumerate(scenario.gammas):
        rows = [r["gammas"][gi] for r in good]
        per = {}
        for method in scenario.methods:
            entry = {"overall": RateEstimate.from_counts(
                sum(row[method]["overall"] for row in rows), n)}
            if method != "minimax":
                entry["outcomes"] = [RateEstimate.from_counts(
                    sum(row[method]["outcomes"][k] for row in rows), n) for k in range(K)]
            if method == "closed-testing":
                keys = rows[0][method]["intersections"].keys() if rows else []
                entry["intersections"] = {key: RateEstimate.from_counts(
                    sum(row[method]["intersections"][key] for row in rows), n) for key in keys}
            per[method] = entry
        rates[_gkey(gamma)] = per
        if {"separate", "minimax"} <= set(scenario.methods):
            dom[_gkey(gamma)] = sum(row["separate"]["overall"] and not row["minimax"]["overall"]
                                    for row in rows)
        if {"separate", "closed-testing"} <= set(scenario.methods):
            holm_v[_gkey(gamma)] = sum(
                any(h and not c for h, c in zip(row["separate"]["outcomes"],
                                                row["closed-testing"]["outcomes"]))
                for row in rows)
    report = PowerReport(scenario, rates, failures, dom, holm_v, n, se_degenerate=n < 2)
    if report.se_degenerate:
        report.notes.append("fewer than two valid replicates: standard errors are 0 or undefined")
    for g, count in dom.items():
        if count:
            report.notes.append(f"Gamma {g}: {count} replicate(s) reject by Bonferroni but not minimax")
    for g, count in holm_v.items():
        if count:
            report.notes.append(f"Gamma {g}: {count} replicate(s) with a Holm rejection "
                                "missing from closed testing")
    return report


def monotonicity_violations(report: PowerReport, tol_se: float = 2.0) -> list[str]:
    """Rates that rise with Gamma by more than ``tol_se`` combined standard errors."""
    out = []
    gs = sorted(report.scenario.gammas)
    for method in report.scenario.methods:
        for a, b in zip(gs, gs[1:]):
            ra, rb = report.rate(a, method), report.rate(b, method)
            tol = tol_se * math.hypot(ra.se, rb.se)
            if rb.rate > ra.rate + tol:
                out.append(f"{method}: rate {rb.rate:.4f} at Gamma {b} exceeds "
                           f"{ra.rate:.4f} at Gamma {a}")
    return out


def default_threads() -> int:
    env = os.environ.get("SENSI_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _chunk(args):
    scenario, reps = args
    return [analyze_replicate(scenario, r) for r in reps]


def run_power_study(scenario: SimulationScenario, threads: int | None = None,
                    progress=None) -> PowerReport:
    """Run every replicate and aggregate; output does not depend on ``threads``."""
    threads = default_threads() if threads is None else max(1, int(threads))
    reps = list(range(scenario.replications))
    results = []
    if threads == 1 or len(reps) < 2:
        for r in reps:
            results.append(analyze_replicate(scenario, r))
            if progress:
                progress(len(results), len(reps))
    else:
        size = max(1, min(25, len(reps) // (4 * threads) or 1))
        chunks = [(scenario, reps[i:i + size]) for i in range(0, len(reps), size)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for part in pool.map(_chunk, chunks):
                results.extend(part)
                if progress:
                    progress(len(results), len(reps))
    return aggregate(scenario, results)


__all__ = [
    "SimulationScenario", "PowerReport", "RateEstimate", "PRESETS", "METHODS",
    "SCENARIO_GRAMMAR", "SimulationAborted", "parse_scenario", "load_scenario",
    "parse_gamma_grid", "generate_paired_differences", "replicate_rng", "analyze_replicate",
    "aggregate", "run_power_study", "monotonicity_violations", "equicorrelated",
    "default_threads",
]
