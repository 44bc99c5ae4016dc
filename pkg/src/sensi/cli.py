"""Command-line interface: ``sensi analyze``, ``sensi simulate``, ``sensi oracle-check``.

Exit codes: 0 ok, 1 check failed, 2 input error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .design import ColumnSchema, DesignError, HypothesisSpec, apply_hypothesis, load_design
from .minimax import MinimaxProblem, SolverError, solve_minimax
from .multiplicity import (TesterFailure, closed_testing, gamma_star, holm_combine,
                           holm_from_tests)
from .oracle import GRID_K_MAX, GRID_N_MAX, grid_minimax, opposed_instance, random_instance
from .randomization import uniform_inference
from .report import csv_text, dumps, envelope, sha256_file, write_text
from .simulation import (PRESETS, SCENARIO_GRAMMAR, SimulationAborted, default_threads,
                         load_scenario, parse_gamma_grid, replicate_rng, run_power_study)
from .single import worst_case_pvalue
from .statistics import STATISTICS, score_matrix

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_SOLVER = 0, 1, 2, 3
DEFAULT_GRID = "1:2:0.25"

log = logging.getLogger("sensi")


class InputError(Exception):
    pass


def _pmap(fn, items, threads):
    items = list(items)
    if threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _threads(args) -> int:
    return default_threads() if args.threads is None else max(1, args.threads)


def _split(text, n, what):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) == 1:
        return parts * n
    if len(parts) != n:
        raise InputError(f"--{what} needs 1 or {n} comma-separated values, got {len(parts)}")
    return parts


def parse_null(text: str, alternative: str) -> HypothesisSpec:
    """``sharp``, ``additive:<tau>`` or ``multiplicative:<beta>``."""
    kind, _, value = text.partition(":")
    kind = kind.strip()
    if kind == "sharp":
        if value:
            raise InputError("the sharp null takes no parameter")
        return HypothesisSpec("sharp", 0.0, alternative)
    if kind not in ("additive", "multiplicative") or not value:
        raise InputError(f"--null must be sharp, additive:<tau> or multiplicative:<beta>; got {text!r}")
    try:
        v = float(value)
    except ValueError:
        raise InputError(f"--null parameter {value!r} is not a number") from None
    try:
        return HypothesisSpec(kind, v, alternative)
    except ValueError as exc:
        raise InputError(str(exc)) from None


# analyze

def _decision_row(job):
    design, scores, gamma, alpha, alts = job
    K = scores.K
    pvals = [worst_case_pvalue(scores, design, k, gamma, alts[k]) for k in range(K)]
    holm = holm_combine([p.p for p in pvals], alpha)
    prob = MinimaxProblem.from_scores(design, scores, gamma, alpha, None, alts)
    mm = solve_minimax(prob)
    ct = closed_testing(design, scores, gamma, alpha, alts)
    return {
        "gamma": gamma,
        "separate": {
            "p_worst": [p.p for p in pvals],
            "deviate": [p.deviate for p in pvals],
            "p_method": [p.method for p in pvals],
            "holm_reject": list(holm.rejected),
            "bonferroni_overall": holm.overall,
        },
        "minimax": {
            "y": mm.y,
            "lower_bound": mm.lower_bound,
            "reject": mm.reject,
            "certificate": mm.certificate,
            "zetas": list(mm.zetas),
            "iterations": mm.iterations,
        },
        "closed_testing": {
            "reject": list(ct.rejected),
            "tests_run": len(ct.tests),
            "certificates": sorted({s.certificate for s in ct.tests.values()}),
        },
    }


def _changepoints(design, scores, alpha, alts, methods, tol, probes=()):
    K = scores.K
    names = design.outcome_names
    out = {}

    def single(k, level):
        def rej(g):
            prob = MinimaxProblem.from_scores(design, scores, g, level, [k], [alts[k]])
            return solve_minimax(prob, decide_only=True).reject
        return rej

    def cp(gs):
        return {"gamma_star": gs.gamma_star, "bracket": gs.bracket,
                "anomalies": list(gs.anomalies)}

    if "minimax" in methods:
        def rej(g):
            prob = MinimaxProblem.from_scores(design, scores, g, alpha, None, alts)
            return solve_minimax(prob, decide_only=True).reject
        gs = gamma_star(rej, tol=tol, method="minimax", probes=probes)
        out["minimax"] = {"overall": cp(gs)}
    if "separate" in methods:
        overall = gamma_star(lambda g: any(single(k, alpha / K)(g) for k in range(K)), tol=tol,
                             method="separate", probes=probes)

        def holm_at(k):
            def rej(g):
                return holm_from_tests(lambda j, a: single(j, a)(g), K, alpha).rejected[k]
            return rej
        out["separate"] = {
            "overall": cp(overall),
            "holm": {names[k]: cp(gamma_star(holm_at(k), tol=tol, method="holm",
                                                  probes=probes))
                     for k in range(K)},
        }
    if "closed-testing" in methods:
        def ct_at(k):
            def rej(g):
                return closed_testing(design, scores, g, alpha, alts).rejected[k]
            return rej
        out["closed_testing"] = {
            names[k]: cp(gamma_star(ct_at(k), tol=tol, method="closed-testing", probes=probes))
            for k in range(K)}
    return out


def cmd_analyze(args) -> int:
    outcomes = [c.strip() for c in args.outcomes.split(",") if c.strip()]
    if not outcomes:
        raise InputError("--outcomes names no columns")
    K = len(outcomes)
    alts = _split(args.alt, K, "alt")
    for a in alts:
        if a not in ("two-sided", "greater", "less"):
            raise InputError(f"--alt must be two-sided, greater or less; got {a!r}")
    kinds = _split(args.stat, K, "stat")
    for s in kinds:
        if s not in STATISTICS:
            raise InputError(f"--stat must be one of {', '.join(STATISTICS)}; got {s!r}")
    nulls = [parse_null(t, a) for t, a in zip(_split(args.null, K, "null"), alts)]
    if not 0 < args.alpha < 1:
        raise InputError("--alpha must lie in (0, 1)")
    try:
        grid = parse_gamma_grid(args.gamma) if args.gamma else ()
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if not grid and not args.gamma_search:
        grid = parse_gamma_grid(DEFAULT_GRID)
    if any(g < 1 for g in grid):
        raise InputError("every Gamma must be >= 1")

    design = load_design(args.csv, ColumnSchema(tuple(outcomes), args.stratum_col,
                                                args.treated_col))
    F = apply_hypothesis(design, nulls)
    scores = score_matrix(design, F, kinds, args.trunc)

    uniform = {design.outcome_names[k]: uniform_inference(scores, design, k, alts[k])
               for k in range(K)}
    jobs = [(design, scores, g, args.alpha, alts) for g in grid]
    table = _pmap(_decision_row, jobs, _threads(args))
    body = {
        "design": design.summary(),
        "gamma1": uniform,
        "decisions": table,
    }
    if args.gamma_search:
        methods = ("minimax", "separate", "closed-testing") if args.method == "all" \
            else (args.method,)
        body["changepoints"] = _changepoints(design, scores, args.alpha, alts, methods, args.tol,
                                            probes=grid)
    config = {
        "command": "analyze", "csv": args.csv, "stratum_col": args.stratum_col,
        "treated_col": args.treated_col, "outcomes": outcomes, "stat": kinds, "alt": alts,
        "null": [f"{n.kind}:{n.value}" if n.kind != "sharp" else "sharp" for n in nulls],
        "alpha": args.alpha, "gamma": list(grid), "gamma_search": args.gamma_search,
        "method": args.method, "trunc": args.trunc, "tol": args.tol,
    }
    report = envelope("analysis", body, config, seed=args.seed,
                      input_sha256=sha256_file(args.csv))
    write_text(dumps(report), args.out)
    if args.csv_out:
        rows = [["gamma", "outcome", "p_worst", "holm_reject", "closed_testing_reject",
                 "minimax_y", "minimax_reject", "certificate"]]
        for row in table:
            for k, name in enumerate(design.outcome_names):
                rows.append([row["gamma"], name, row["separate"]["p_worst"][k],
                             row["separate"]["holm_reject"][k],
                             row["closed_testing"]["reject"][k], row["minimax"]["y"],
                             row["minimax"]["reject"], row["minimax"]["certificate"]])
        write_text(csv_text(rows), args.csv_out)
    return EXIT_OK


# simulate

def cmd_simulate(args) -> int:
    if args.scenario and args.preset:
        raise InputError("give either --preset or --scenario, not both")
    if args.preset:
        if args.preset not in PRESETS:
            raise InputError(f"unknown preset {args.preset!r}; choose from "
                             f"{', '.join(sorted(PRESETS))}")
        scenario = PRESETS[args.preset]
    elif args.scenario:
        try:
            scenario = load_scenario(args.scenario)
        except OSError as exc:
            raise InputError(str(exc)) from None
    else:
        raise InputError("need --preset or --scenario")
    kw = {}
    if args.reps is not None:
        kw["replications"] = args.reps
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.gammas:
        kw["gammas"] = parse_gamma_grid(args.gammas)
    if args.methods:
        kw["methods"] = tuple(m.strip() for m in args.methods.split(","))
    scenario = scenario.replace(**kw) if kw else scenario
    report = run_power_study(scenario, threads=_threads(args))
    if args.format == "csv":
        write_text(csv_text(report.csv_rows()), args.out)
    else:
        body = report.to_dict()
        config = {"command": "simulate", "preset": args.preset, "scenario": body.pop("scenario")}
        write_text(dumps(envelope("power", body, config, seed=scenario.seed)), args.out)
    return EXIT_OK


# oracle-check

def _oracle_one(job):
    seed, i, n_max, k_max, adversarial = job
    rng = replicate_rng(seed, i)
    opposed = adversarial and i % 4 == 3
    prob = opposed_instance(rng, max(1, min(4, n_max // 2))) if opposed \
        else random_instance(rng, n_max, k_max)
    sol = solve_minimax(prob)
    orc = grid_minimax(prob)
    gap = abs(sol.y - orc.value)
    return {"instance": i, "family": "opposed" if opposed else "random", "N": int(prob.ptr[-1]),
            "K": prob.K, "gamma": prob.gamma, "alternatives": list(prob.alternatives),
            "solver": sol.y, "oracle": orc.value, "gap": gap, "certificate": sol.certificate,
            "fractional_u": bool(np.any((sol.u > 1e-3) & (sol.u < 1 - 1e-3)))}


def cmd_oracle_check(args) -> int:
    if not 2 <= args.n_max <= GRID_N_MAX:
        raise InputError(f"--n-max must lie in [2, {GRID_N_MAX}]")
    if not 1 <= args.k_max <= GRID_K_MAX:
        raise InputError(f"--k-max must lie in [1, {GRID_K_MAX}]")
    if args.instances < 0:
        raise InputError("--instances must be >= 0")
    if args.instances == 0:
        print("warning: no instances requested; the check passes vacuously", file=sys.stderr)
    jobs = [(args.seed, i, args.n_max, args.k_max, not args.no_adversarial)
            for i in range(args.instances)]
    rows = _pmap(_oracle_one, jobs, _threads(args))
    worst = max((r["gap"] for r in rows), default=0.0)
    failed = [r["instance"] for r in rows if not r["gap"] <= args.tol]
    body = {"instances": len(rows), "max_gap": worst, "tolerance": args.tol,
            "failed": failed, "passed": not failed, "results": rows}
    config = {"command": "oracle-check", "n_max": args.n_max, "k_max": args.k_max,
              "instances": args.instances, "adversarial": not args.no_adversarial,
              "tol": args.tol}
    write_text(dumps(envelope("oracle-check", body, config, seed=args.seed)), args.out)
    print(f"oracle-check: {len(rows)} instances, max gap {worst:.3g}, "
          f"{'PASS' if not failed else f'FAIL ({len(failed)})'}", file=sys.stderr)
    return EXIT_OK if not failed else EXIT_CHECK


# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sensi", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"sensi {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="sensitivity analysis of a matched dataset")
    a.add_argument("csv", help="one row per individual")
    a.add_argument("--stratum-col", default="stratum")
    a.add_argument("--treated-col", default="treated", help="0/1 treatment indicator")
    a.add_argument("--outcomes", required=True, help="comma-separated outcome columns")
    a.add_argument("--stat", default="aligned-rank",
                   help=f"statistic, one or per outcome: {', '.join(STATISTICS)}")
    a.add_argument("--alt", default="two-sided", help="two-sided, greater or less (or per outcome)")
    a.add_argument("--alpha", type=float, default=0.05)
    a.add_argument("--gamma", help=f"Gamma value(s): 1.5, 1,1.5,2 or lo:hi:step "
                                   f"(default {DEFAULT_GRID} without --gamma-search)")
    a.add_argument("--gamma-search", action="store_true", help="locate changepoints Gamma*")
    a.add_argument("--method", choices=("minimax", "separate", "closed-testing", "all"),
                   default="all", help="methods for --gamma-search")
    a.add_argument("--tol", type=float, default=1e-3, help="Gamma* bracket width")
    a.add_argument("--null", default="sharp",
                   help="sharp, additive:<tau> or multiplicative:<beta> (or per outcome)")
    a.add_argument("--trunc", type=float, default=2.5, help="Huber psi truncation")
    a.add_argument("--seed", type=int, default=0, help="recorded in the report")
    a.add_argument("--out", help="JSON report path (default stdout)")
    a.add_argument("--csv-out", help="also write the decision table as CSV")
    a.add_argument("--threads", type=int)
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", help="Monte Carlo power study",
                       epilog=SCENARIO_GRAMMAR, formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("--preset", help=f"one of: {', '.join(sorted(PRESETS))}")
    s.add_argument("--scenario", help="scenario file (grammar below)")
    s.add_argument("--reps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--gammas", help="override the Gamma grid")
    s.add_argument("--methods", help="comma-separated: separate, minimax, closed-testing")
    s.add_argument("--format", choices=("json", "csv"), default="json")
    s.add_argument("--out")
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_simulate)

    o = sub.add_parser("oracle-check", help="compare the solver with the grid oracle")
    o.add_argument("--n-max", type=int, default=GRID_N_MAX)
    o.add_argument("--k-max", type=int, default=GRID_K_MAX)
    o.add_argument("--instances", type=int, default=100)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--tol", type=float, default=1e-4)
    o.add_argument("--no-adversarial", action="store_true",
                   help="leave out the opposed-outcome instances")
    o.add_argument("--out")
    o.add_argument("--threads", type=int)
    o.set_defaults(func=cmd_oracle_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, DesignError, SimulationAborted, ValueError, OSError) as exc:
        if isinstance(exc, SimulationAborted):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_SOLVER
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SolverError, TesterFailure) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
