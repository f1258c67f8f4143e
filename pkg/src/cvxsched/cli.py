"""Command-line front end.

Subcommands: ``static``, ``compare``, ``simulate``, ``generate``, ``prices``.
Exit codes: 0 success, 2 invalid input, 3 oracle size cap, 4 I/O failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time

from . import oracle, simulator, traceio
from .model import PlacementProblem, PricingOptions, validate_problem
from .placement import greedy_place
from .pricing import PricingError, compute_prices

EXIT_OK, EXIT_INVALID, EXIT_ORACLE_CAP, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("cvxsched")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _setup_logging():
    level = os.environ.get("CVXSCHED_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _options(args, mode=None) -> PricingOptions:
    return PricingOptions(
        mode=mode or (args.pricing[0] if getattr(args, "pricing", None) else "shape"),
        anti_affinity_in_lp=args.aa_in_lp,
        gpu_penalty=args.gpu_penalty,
        gpu_surcharge=args.gpu_surcharge,
        gpu_priority_boost=args.gpu_boost,
        boost_in_lp=args.gpu_boost_in_lp,
        collapse_tasks=not args.no_collapse,
        seed=args.seed,
    )


def _load(args, options) -> PlacementProblem:
    try:
        problem = traceio.load_instance(args.cluster, args.tasks, options)
    except traceio.TraceError as exc:
        raise CliError(f"invalid input: {exc}", EXIT_INVALID) from None
    except ValueError as exc:
        raise CliError(f"invalid input: {exc}", EXIT_INVALID) from None
    except OSError as exc:
        raise CliError(f"cannot read input: {exc}", EXIT_IO) from None
    diags = validate_problem(problem)
    for d in diags:
        log.warning("%s", d)
    errors = [d for d in diags if d.severity == "error"]
    if errors:
        raise CliError("invalid instance:\n" + "\n".join(str(d) for d in errors), EXIT_INVALID)
    return problem


def _fresh(problem: PlacementProblem, options: PricingOptions) -> PlacementProblem:
    return PlacementProblem(problem.tasks, problem.cluster.copy(), problem.groups, options, problem.resources)


def _levels(problem: PlacementProblem) -> list:
    return sorted({t.priority for t in problem.tasks})


def _level_name(p: float) -> str:
    return str(int(p)) if float(p).is_integer() else repr(float(p))


def _run_pipeline(problem: PlacementProblem, seed: int):
    """Both stages on a private copy of the cluster. An empty batch skips the LP."""
    t0 = time.perf_counter()
    if not problem.tasks:
        from .placement import summarize
        result = summarize([], {})
        result.counters = {"lp_iterations": 0, "greedy_checks": 0}
        return result, None, 0.0
    prices = compute_prices(problem)
    result = greedy_place(problem, prices, seed)
    return result, prices, time.perf_counter() - t0


def _static_row(method: str, problem: PlacementProblem, result, wall_s: float, levels, timing: bool) -> dict:
    row = {
        "method": method,
        "tasks": len(problem.tasks),
        "servers": len(problem.cluster),
        "solve_time_s": wall_s if timing else 0.0,
        "lp_time_s": result.timing.get("lp_ms", 0.0) / 1e3 if timing else 0.0,
        "greedy_time_s": result.timing.get("greedy_ms", 0.0) / 1e3 if timing else 0.0,
        "objective": result.weighted_objective,
        "placement_pct": 100.0 * result.placement_rate,
        "lp_iterations": result.counters.get("lp_iterations", 0),
        "greedy_checks": result.counters.get("greedy_checks", 0),
    }
    for p in levels:
        row[f"placement_pct_p{_level_name(p)}"] = 100.0 * result.per_priority_rates.get(p, 0.0)
    return row


def _emit(rows: list, args, stream=None):
    if args.format == "json":
        text = json.dumps(rows if len(rows) != 1 else rows[0], indent=2, sort_keys=False) + "\n"
    else:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else [], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        text = buf.getvalue()
    _write(text, args.out, stream)


def _write(text: str, out, stream=None):
    if out:
        try:
            with open(out, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        except OSError as exc:
            raise CliError(f"cannot write {out}: {exc}", EXIT_IO) from None
    else:
        (stream or sys.stdout).write(text)


def cmd_static(args) -> int:
    modes = args.pricing or ["shape"]
    base = _load(args, _options(args, modes[0]))
    rows = []
    for mode in modes:
        problem = _fresh(base, _options(args, mode))
        result, _, wall = _run_pipeline(problem, args.seed)
        rows.append(_static_row(mode, problem, result, wall, _levels(base), not args.deterministic))
    _emit(rows, args)
    return EXIT_OK


def cmd_compare(args) -> int:
    base = _load(args, _options(args, "shape"))
    t, s = len(base.tasks), len(base.cluster)
    if t * s > args.oracle_cap:
        raise CliError(f"refusing to run the exact oracle: {t} tasks x {s} servers = {t * s} binary variables "
                       f"exceeds the cap of {args.oracle_cap}", EXIT_ORACLE_CAP)
    timing = not args.deterministic
    exact = oracle.solve_exact(base, node_limit=args.oracle_node_limit, time_limit_ms=args.oracle_time_ms,
                               cap=args.oracle_cap, engine=args.oracle_engine)
    row = {
        "tasks": t,
        "servers": s,
        "oracle_objective": exact.objective,
        "oracle_proven": exact.proven_optimal,
        "oracle_bound": exact.bound,
        "oracle_nodes": exact.nodes_explored,
        "oracle_time_s": exact.wall_ms / 1e3 if timing else 0.0,
    }
    for mode in ("shape", "global"):
        problem = _fresh(base, _options(args, mode))
        result, prices, wall = _run_pipeline(problem, args.seed)
        if exact.proven_optimal and result.weighted_objective > exact.objective + 1e-9:
            raise RuntimeError(f"{mode} greedy objective {result.weighted_objective} exceeds proven optimum "
                               f"{exact.objective}")
        gap = 1.0 - result.weighted_objective / exact.objective if exact.objective > 0 else 0.0
        row[f"{mode}_objective"] = result.weighted_objective
        row[f"{mode}_lp_objective"] = prices.lp_objective if prices else 0.0
        row[f"gap_{mode}"] = round(gap, 4)
        row[f"{mode}_time_s"] = wall if timing else 0.0
        row[f"speedup_{mode}"] = (exact.wall_ms / 1e3 / wall if wall > 0 else float("inf")) if timing else 0.0
        row[f"{mode}_placement_pct"] = 100.0 * result.placement_rate
    _emit([row], args)
    return EXIT_OK


def cmd_prices(args) -> int:
    problem = _load(args, _options(args))
    if not problem.tasks:
        raise CliError("no tasks: the relaxation has nothing to price", EXIT_INVALID)
    prices = compute_prices(problem)
    out = prices.to_dict(problem.resources)
    if not args.deterministic:
        out["solve_ms"] = prices.meta.get("lp_ms", 0.0)
    out["lp_iterations"] = prices.meta.get("lp_iterations", 0)
    _write(json.dumps(out, indent=2, sort_keys=True) + "\n", args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        with open(args.cluster, newline="", encoding="utf-8") as fh:
            cluster = traceio.parse_cluster(fh)
        with open(args.trace, newline="", encoding="utf-8") as fh:
            records = traceio.parse_trace(fh)
    except traceio.TraceError as exc:
        raise CliError(f"invalid input: {exc}", EXIT_INVALID) from None
    except OSError as exc:
        raise CliError(f"cannot read input: {exc}", EXIT_IO) from None
    options = _options(args)
    problem = traceio.make_problem(records, cluster, options)
    errors = [d for d in validate_problem(problem) if d.severity == "error"]
    if errors:
        raise CliError("invalid trace:\n" + "\n".join(str(d) for d in errors), EXIT_INVALID)
    config = simulator.SimConfig(round_interval=args.round_interval, options=options, seed=args.seed,
                                 horizon=args.horizon, record_timing=not args.deterministic)
    report = simulator.run(problem.tasks, problem.cluster, config, groups=problem.groups,
                           resources=problem.resources)
    if args.out:
        try:
            paths = report.write(args.out, prefix=args.prefix)
        except OSError as exc:
            raise CliError(f"cannot write report: {exc}", EXIT_IO) from None
        for p in paths:
            print(p)
    else:
        sys.stdout.write(report.summary_json())
    return EXIT_OK


def cmd_generate(args) -> int:
    try:
        cfg = traceio.load_gen_config(args.config) if args.config else traceio.GenConfig()
    except OSError as exc:
        raise CliError(f"cannot read config: {exc}", EXIT_IO) from None
    except (ValueError, TypeError) as exc:
        raise CliError(f"invalid config: {exc}", EXIT_INVALID) from None
    overrides = {k: v for k, v in (("rate", args.rate), ("horizon_s", args.horizon),
                                    ("num_tasks", args.num_tasks)) if v is not None}
    try:
        cfg = traceio.GenConfig.from_dict({**cfg.to_dict(), **overrides})
    except ValueError as exc:
        raise CliError(f"invalid config: {exc}", EXIT_INVALID) from None
    records = traceio.generate_trace(cfg, seed=args.seed)
    if args.gpu_fraction:
        records = traceio.synthesize_gpu(records, args.gpu_fraction, seed=args.seed)
    if args.speed_scale != 1.0:
        records = traceio.scale_speed(records, args.speed_scale)
    _write(traceio.trace_to_string(records), args.out)
    return EXIT_OK


def _common(p: argparse.ArgumentParser, pricing=True):
    p.add_argument("--seed", type=int, default=0)
    if pricing:
        p.add_argument("--aa-in-lp", action="store_true", help="price anti-affinity groups in the LP")
        p.add_argument("--gpu-penalty", type=float, default=None, metavar="R")
        p.add_argument("--gpu-surcharge", type=float, default=None, metavar="R")
        p.add_argument("--gpu-boost", type=float, default=None, metavar="R")
        p.add_argument("--gpu-boost-in-lp", action="store_true", help="also add the GPU boost to the LP objective")
        p.add_argument("--no-collapse", action="store_true",
                       help="solve the relaxation per task instead of per class of identical tasks")
    p.add_argument("--out", default=None, metavar="PATH")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--deterministic", action="store_true",
                   help="zero wall-clock fields so output is byte-reproducible")


def _instance(p: argparse.ArgumentParser):
    p.add_argument("--cluster", required=True, help="cluster CSV")
    p.add_argument("--tasks", required=True, help="task CSV (trace schema)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cvxsched", description="Shadow-price cluster placement toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("static", help="place a static instance and report one row per pricing mode")
    _instance(p)
    p.add_argument("--pricing", choices=("shape", "global"), action="append",
                   help="repeat to get one row per mode (default: shape)")
    _common(p)
    p.set_defaults(func=cmd_static)

    p = sub.add_parser("compare", help="exact oracle vs shape and global pricing")
    _instance(p)
    p.add_argument("--oracle-node-limit", type=int, default=100_000, metavar="N")
    p.add_argument("--oracle-time-ms", type=int, default=60_000, metavar="N")
    p.add_argument("--oracle-cap", type=int, default=oracle.DEFAULT_CAP, metavar="N")
    p.add_argument("--oracle-engine", choices=oracle.ENGINES, default="highs")
    _common(p)
    p.set_defaults(func=cmd_compare, pricing=None)

    p = sub.add_parser("simulate", help="replay a trace against a cluster")
    p.add_argument("--cluster", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--pricing", choices=("shape", "global"), action="append")
    p.add_argument("--round-interval", type=float, default=1.0, metavar="S")
    p.add_argument("--horizon", type=float, default=None, metavar="S")
    p.add_argument("--prefix", default="sim")
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("generate", help="write a synthetic trace")
    p.add_argument("--config", default=None, help="generator config (JSON)")
    p.add_argument("--rate", type=float, default=None)
    p.add_argument("--horizon", type=float, default=None)
    p.add_argument("--num-tasks", type=int, default=None)
    p.add_argument("--gpu-fraction", type=float, default=0.0)
    p.add_argument("--speed-scale", type=float, default=1.0)
    _common(p, pricing=False)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("prices", help="dump the shadow-price table as JSON")
    _instance(p)
    p.add_argument("--pricing", choices=("shape", "global"), action="append")
    _common(p)
    p.set_defaults(func=cmd_prices)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"cvxsched: {exc}", file=sys.stderr)
        return exc.code
    except oracle.OracleSizeError as exc:
        print(f"cvxsched: {exc}", file=sys.stderr)
        return EXIT_ORACLE_CAP
    except PricingError as exc:
        print(f"cvxsched: pricing failed: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
