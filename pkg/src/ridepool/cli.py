"""Command-line entry point: ``ridepool <command> ...``.

Exit codes: 0 on success, 2 on invalid input or configuration, 3 when a
solve stops early (guard abort or time budget) after writing its partial
outputs.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

from .demand import DemandConfig, DemandError, generate_demand, read_demand, write_demand
from .exmas import BehavioralParams, BudgetExceeded, enumerate_all, write_rides
from .experiment import ConfigError, SweepConfig, SweepError, report, run_sweep
from .matching import MatchingProblem, solve_exact, write_solution
from .metrics import (
    TIMED_OUT,
    ComplexityTrace,
    GuardLimits,
    graph_stats,
    kpis,
    log10_int,
    theoretical_search_space,
)
from .netgraph import NetworkError, build_skim, generate_grid, load_network, write_network

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_PARTIAL = 3

TRACE_HEADER = ["stage", "candidates_explored", "rides_retained", "pruned", "elapsed_ms",
                "logical_memory", "status"]
PARAM_KEYS = ("beta_c", "beta_t", "beta_s", "beta_d")


class UsageError(ValueError):
    """Bad command-line input; the message names the flag or file."""


def _int_list(flag: str, text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated integers, got {text!r}") from None
    if not values:
        raise UsageError(f"{flag}: empty list")
    return values


def _net_files(path: str) -> tuple[Path, Path]:
    p = Path(path)
    nodes, edges = p / "nodes.csv", p / "edges.csv"
    for f in (nodes, edges):
        if not f.is_file():
            raise UsageError(f"--net: {f} not found (expected a directory with nodes.csv and edges.csv)")
    return nodes, edges


def read_params(path: str | Path) -> BehavioralParams:
    """``key = value`` file with any of beta_c, beta_t, beta_s, beta_d."""
    values: dict[str, float] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"--params-file: cannot read {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        if not sep or key not in PARAM_KEYS:
            raise UsageError(f"{path}:{lineno}: expected one of {', '.join(PARAM_KEYS)} = <number>")
        try:
            values[key] = float(value)
        except ValueError:
            raise UsageError(f"{path}:{lineno}: {key} is not a number: {value!r}") from None
    try:
        return BehavioralParams(**values)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None


def cmd_net_grid(args) -> int:
    try:
        net = generate_grid(args.rows, args.cols, args.spacing, args.speed)
    except ValueError as exc:
        raise UsageError(f"net grid: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_network(net, out / "nodes.csv", out / "edges.csv")
    print(f"wrote {len(net.nodes)} nodes, {len(net.edges)} edges to {out}")
    return EXIT_OK


def cmd_net_import(args) -> int:
    net = load_network(args.nodes, args.edges)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_network(net, out / "nodes.csv", out / "edges.csv")
    print(f"imported {len(net.nodes)} nodes, {len(net.edges)} edges to {out}")
    return EXIT_OK


def cmd_demand_gen(args) -> int:
    net = load_network(*_net_files(args.net))
    requests = generate_demand(net, DemandConfig(args.n, args.batch_s, args.tau_origin, args.tau_dest, args.seed))
    write_demand(requests, args.out)
    print(f"wrote {len(requests)} requests to {args.out}")
    return EXIT_OK


def write_trace(trace: ComplexityTrace, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for name, rec in trace.stages.items():
            w.writerow([name, rec.candidates_explored, rec.rides_retained, rec.pruned,
                        f"{rec.elapsed_ms:.3f}", rec.logical_memory, rec.status])


def cmd_solve(args) -> int:
    if not 0 <= args.lam < 1:
        raise UsageError(f"--lambda must lie in [0, 1), got {args.lam}")
    params = read_params(args.params_file) if args.params_file else BehavioralParams()
    params = params.with_discount(args.lam)
    net = load_network(*_net_files(args.net))
    requests = read_demand(args.demand)
    missing = sorted({n for r in requests for n in (r.origin, r.destination) if n not in net})
    if missing:
        raise UsageError(f"--demand: node ids not in network: {missing[:10]}")
    try:
        limits = GuardLimits(args.max_avg_degree, args.max_rides_per_degree)
    except ValueError as exc:
        raise UsageError(f"guard flags: {exc}") from None
    deadline = time.monotonic() + args.budget if args.budget else None

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    skim = build_skim(net, [r.origin for r in requests] + [r.destination for r in requests])
    trace = ComplexityTrace()
    rides = enumerate_all(requests, skim, params, args.max_degree, trace, limits=limits, deadline=deadline)
    write_rides(rides.rides, out / "rides.csv")
    stats = graph_stats(rides.graph)
    shared = sum(c for d, c in rides.counts().items() if d >= 2)
    line = (f"rides={len(rides.rides)} search_space={shared} pair_edges={stats.edge_count} "
            f"avg_degree={stats.avg_degree:.4g}")

    solution = None
    if not rides.aborted:
        prob = MatchingProblem.from_rides([r.id for r in requests], rides.rides)
        with trace.timer("matching") as rec:
            rec.candidates_explored = len(prob.columns)
            try:
                solution = solve_exact(prob, deadline=deadline)
                rec.rides_retained = len(solution.selected)
            except BudgetExceeded as exc:
                trace.mark(TIMED_OUT, f"timed out in matching: {exc}", "matching")
    write_trace(trace, out / "trace.csv")
    if solution is not None:
        write_solution(solution, {r.id: r for r in rides.rides}, out / "solution.csv")
        k = kpis(requests, solution, params)
        line += (f" objective={solution.objective:.6g} share_pooled={k.share_pooled:.4g}"
                 f" rel_utility_gain={k.rel_utility_gain:.4g} mean_occupancy={k.mean_occupancy:.4g}")
    print(f"status={trace.status} {line}")
    if not trace.completed:
        print(f"stopped: {trace.reason}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_sweep(args) -> int:
    if args.jobs < 1:
        raise UsageError(f"--jobs must be at least 1, got {args.jobs}")
    cfg = SweepConfig.from_file(args.config)
    total = len(cfg.cells())

    def progress(row):
        print(f"[{row['demand_level']} lambda={row['lambda']} rep={row['replication']}] "
              f"{row['status']} search_space={row['search_space']}", file=sys.stderr)

    path = run_sweep(cfg, args.out, resume=args.resume, jobs=args.jobs, progress=progress)
    print(f"{path}: {total} cells")
    return EXIT_OK


def cmd_theory(args) -> int:
    qs = _int_list("--q-list", args.q_list)
    ds = _int_list("--d-list", args.d_list)
    if any(q < 0 for q in qs):
        raise UsageError("--q-list: values must be >= 0")
    if any(d < 1 for d in ds):
        raise UsageError("--d-list: values must be >= 1")
    lines = ["q,d,search_space,log10"]
    for q in qs:
        for d in ds:
            s = theoretical_search_space(q, d)
            lines.append(f"{q},{d},{s},{log10_int(s):.3f}" if s > 0 else f"{q},{d},0,")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args) -> int:
    print(report(args.results, args.out_dir))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ridepool", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    net = sub.add_parser("net", help="generate or import a road network").add_subparsers(dest="net_cmd", required=True)
    g = net.add_parser("grid", help="write a 4-neighbour grid network")
    g.add_argument("--rows", type=int, required=True)
    g.add_argument("--cols", type=int, required=True)
    g.add_argument("--spacing", type=float, required=True, help="meters between nodes")
    g.add_argument("--speed", type=float, required=True, help="meters per second")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_net_grid)
    i = net.add_parser("import", help="validate and copy nodes/edges CSV files")
    i.add_argument("--nodes", required=True)
    i.add_argument("--edges", required=True)
    i.add_argument("--out", required=True, help="output directory")
    i.set_defaults(func=cmd_net_import)

    dem = sub.add_parser("demand", help="trip requests").add_subparsers(dest="demand_cmd", required=True)
    d = dem.add_parser("gen", help="draw seeded synthetic requests")
    d.add_argument("--net", required=True, help="directory with nodes.csv and edges.csv")
    d.add_argument("--n", type=int, required=True)
    d.add_argument("--batch-s", type=float, default=600.0)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--tau-origin", type=float, default=None)
    d.add_argument("--tau-dest", type=float, default=None)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_demand_gen)

    s = sub.add_parser("solve", help="enumerate rides and match one batch")
    s.add_argument("--net", required=True, help="directory with nodes.csv and edges.csv")
    s.add_argument("--demand", required=True)
    s.add_argument("--lambda", dest="lam", type=float, required=True, help="fare discount for sharing")
    s.add_argument("--max-degree", type=int, default=4)
    s.add_argument("--params-file", default=None)
    s.add_argument("--max-avg-degree", type=float, default=GuardLimits.max_avg_degree)
    s.add_argument("--max-rides-per-degree", type=int, default=GuardLimits.max_rides_per_degree)
    s.add_argument("--budget", type=float, default=None, help="seconds for the whole solve")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_solve)

    w = sub.add_parser("sweep", help="run a demand x discount grid")
    w.add_argument("--config", required=True)
    w.add_argument("--out", required=True, help="results.csv path")
    w.add_argument("--resume", action="store_true")
    w.add_argument("--jobs", type=int, default=1)
    w.set_defaults(func=cmd_sweep)

    t = sub.add_parser("theory", help="table of unfiltered search-space sizes")
    t.add_argument("--q-list", required=True, help="comma-separated traveler counts")
    t.add_argument("--d-list", required=True, help="comma-separated ride degrees")
    t.add_argument("--out", default=None)
    t.set_defaults(func=cmd_theory)

    r = sub.add_parser("report", help="per-figure CSVs and a summary from results.csv")
    r.add_argument("--results", required=True)
    r.add_argument("--out-dir", required=True)
    r.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "max_degree", None) is not None and not 1 <= args.max_degree <= 4:
        print(f"error: --max-degree must lie in [1, 4], got {args.max_degree}", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except (UsageError, ConfigError, SweepError, NetworkError, DemandError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"error: {exc.filename}: file not found", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
