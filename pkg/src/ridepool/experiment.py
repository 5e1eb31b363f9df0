"""Demand-level x discount sweeps with per-cell budgets and CSV persistence.

Each cell (demand level, discount, replication) runs the full pipeline:
demand draw, endpoint skims, ride enumeration, exact matching and KPIs.
Budget exhaustion and guard aborts are recorded in the row, never raised,
and the row keeps whatever was computed before the stop.

Seeds depend on the base seed and the replication only. Every discount
level and demand level of a replication therefore sees the same random
stream, which (with prefix-nested demand draws) makes cells directly
comparable along both grid axes.
"""

from __future__ import annotations

import csv
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .demand import DemandConfig, generate_demand
from .exmas import DEGREE_CEILING, BehavioralParams, BudgetExceeded, enumerate_all
from .matching import MatchingProblem, solve_exact
from .metrics import (
    COMPLETED,
    TIMED_OUT,
    ComplexityTrace,
    GuardLimits,
    graph_stats,
    kpis,
    logical_memory,
    stage_names,
)
from .netgraph import Network, build_skim, generate_grid, load_network

SCHEMA_LINE = "# schema=1"
STAGES = stage_names(DEGREE_CEILING)
STAGE_FIELDS = ["candidates", "retained", "pruned", "memory", "status", "ms"]

COLUMNS = (
    ["demand_level", "lambda", "replication", "seed", "status", "reason"]
    + [f"{s}_{f}" for s in STAGES for f in STAGE_FIELDS]
    + ["graph_nodes", "graph_edges", "avg_degree", "density", "components"]
    + [f"rides_d{d}" for d in range(1, DEGREE_CEILING + 1)]
    + ["search_space", "objective", "matching_nodes", "share_pooled", "rel_utility_gain",
       "mean_occupancy", "demand_ms", "skim_ms", "total_ms"]
)
TIMING_COLUMNS = frozenset(c for c in COLUMNS if c.endswith("_ms"))


class ConfigError(ValueError):
    """Invalid sweep configuration."""


class SweepError(RuntimeError):
    """Results file cannot be written or resumed."""


@dataclass(frozen=True)
class NetworkSource:
    """Either a generated grid or a pair of CSV files."""

    kind: str = "grid"
    rows: int = 10
    cols: int = 10
    spacing: float = 300.0
    speed: float = 10.0
    nodes_file: str | None = None
    edges_file: str | None = None

    def __post_init__(self):
        if self.kind not in ("grid", "files"):
            raise ConfigError(f"network must be 'grid' or 'files', got {self.kind!r}")
        if self.kind == "files" and not (self.nodes_file and self.edges_file):
            raise ConfigError("network = files needs nodes_file and edges_file")

    def load(self) -> Network:
        return _load_network(self)


@lru_cache(maxsize=4)
def _load_network(src: NetworkSource) -> Network:
    if src.kind == "grid":
        return generate_grid(src.rows, src.cols, src.spacing, src.speed)
    return load_network(src.nodes_file, src.edges_file)


@dataclass(frozen=True)
class SweepConfig:
    demand_levels: tuple[int, ...] = tuple(range(50, 601, 50))
    lambdas: tuple[float, ...] = (0.05, 0.10, 0.20, 0.25, 0.30, 0.35, 0.40)
    replications: int = 3
    base_seed: int = 0
    max_degree: int = 4
    cell_time_budget: float = 300.0
    guard: GuardLimits = field(default_factory=GuardLimits)
    network: NetworkSource = field(default_factory=NetworkSource)
    params: BehavioralParams = field(default_factory=BehavioralParams)
    batch_length: float = 600.0
    tau_origin: float | None = None
    tau_dest: float | None = None

    def __post_init__(self):
        if not self.demand_levels or not self.lambdas:
            raise ConfigError("demand_levels and lambdas must be non-empty")
        if any(n < 1 for n in self.demand_levels):
            raise ConfigError("demand levels must be positive")
        if any(not 0 <= lam < 1 for lam in self.lambdas):
            raise ConfigError("lambdas must lie in [0, 1)")
        if self.replications < 1:
            raise ConfigError("replications must be at least 1")
        if not 1 <= self.max_degree <= DEGREE_CEILING:
            raise ConfigError(f"max_degree must lie in [1, {DEGREE_CEILING}]")
        if not self.cell_time_budget > 0:
            raise ConfigError("cell_time_budget must be positive")

    def cells(self) -> list[tuple[int, float, int]]:
        return [(n, lam, rep) for n in self.demand_levels for lam in self.lambdas
                for rep in range(self.replications)]

    @classmethod
    def from_file(cls, path: str | Path) -> "SweepConfig":
        return parse_config(Path(path).read_text(encoding="utf-8"), source=str(path),
                            base_dir=Path(path).parent)


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.split(",") if x.strip())


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(x) for x in v.split(",") if x.strip())


def _opt_float(v: str) -> float | None:
    return None if v.strip().lower() in ("", "none") else float(v)


# key -> (section, field, parser)
_KEYS: dict[str, tuple[str, str, Callable[[str], object]]] = {
    "demand_levels": ("cfg", "demand_levels", _ints),
    "lambdas": ("cfg", "lambdas", _floats),
    "replications": ("cfg", "replications", int),
    "base_seed": ("cfg", "base_seed", int),
    "max_degree": ("cfg", "max_degree", int),
    "cell_time_budget": ("cfg", "cell_time_budget", float),
    "batch_length": ("cfg", "batch_length", float),
    "tau_origin": ("cfg", "tau_origin", _opt_float),
    "tau_dest": ("cfg", "tau_dest", _opt_float),
    "max_avg_degree": ("guard", "max_avg_degree", float),
    "max_rides_per_degree": ("guard", "max_rides_per_degree", int),
    "max_stage_seconds": ("guard", "max_stage_seconds", _opt_float),
    "network": ("network", "kind", str),
    "grid_rows": ("network", "rows", int),
    "grid_cols": ("network", "cols", int),
    "grid_spacing": ("network", "spacing", float),
    "grid_speed": ("network", "speed", float),
    "nodes_file": ("network", "nodes_file", str),
    "edges_file": ("network", "edges_file", str),
    "beta_c": ("params", "beta_c", float),
    "beta_t": ("params", "beta_t", float),
    "beta_s": ("params", "beta_s", float),
    "beta_d": ("params", "beta_d", float),
}


def parse_config(text: str, source: str = "<config>", base_dir: Path | None = None) -> SweepConfig:
    """Parse a flat ``key = value`` file; ``#`` starts a comment.

    Relative network file paths are resolved against ``base_dir``.
    """
    parts: dict[str, dict[str, object]] = {"cfg": {}, "guard": {}, "network": {}, "params": {}}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        section, name, parse = _KEYS[key]
        try:
            parsed = parse(value)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {value!r}") from None
        if name in ("nodes_file", "edges_file") and base_dir is not None:
            parsed = str((base_dir / str(parsed)).resolve())
        parts[section][name] = parsed
    try:
        return SweepConfig(guard=GuardLimits(**parts["guard"]),
                           network=NetworkSource(**parts["network"]),
                           params=BehavioralParams(**parts["params"]),
                           **parts["cfg"])
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def cell_seed(base_seed: int, replication: int) -> int:
    """Seed for one replication, shared by all demand levels and discounts."""
    return int(np.random.SeedSequence([base_seed, replication]).generate_state(1)[0])


@dataclass
class CellResult:
    demand_level: int
    lam: float
    replication: int
    seed: int
    trace: ComplexityTrace
    status: str = COMPLETED
    reason: str = ""
    values: dict[str, object] = field(default_factory=dict)

    def row(self) -> dict[str, str]:
        out = {c: "" for c in COLUMNS}
        out.update(demand_level=str(self.demand_level), replication=str(self.replication),
                   seed=str(self.seed), status=self.status, reason=self.reason)
        out["lambda"] = repr(float(self.lam))
        for stage, rec in self.trace.stages.items():
            out.update({
                f"{stage}_candidates": str(rec.candidates_explored),
                f"{stage}_retained": str(rec.rides_retained),
                f"{stage}_pruned": str(rec.pruned),
                f"{stage}_memory": str(rec.logical_memory),
                f"{stage}_status": rec.status,
                f"{stage}_ms": f"{rec.elapsed_ms:.3f}",
            })
        for k, v in self.values.items():
            out[k] = _fmt(v)
        return out


def _fmt(v: object) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def run_cell(cfg: SweepConfig, demand_level: int, lam: float, replication: int) -> CellResult:
    """Run one grid cell; stops are recorded in the result, not raised."""
    t0 = time.monotonic()
    deadline = t0 + cfg.cell_time_budget
    seed = cell_seed(cfg.base_seed, replication)
    trace = ComplexityTrace()
    res = CellResult(demand_level, lam, replication, seed, trace)
    vals = res.values
    net = cfg.network.load()
    p = cfg.params.with_discount(lam)

    requests = generate_demand(net, DemandConfig(demand_level, cfg.batch_length, cfg.tau_origin,
                                                 cfg.tau_dest, seed))
    t1 = time.monotonic()
    vals["demand_ms"] = round((t1 - t0) * 1000.0, 3)
    skim = build_skim(net, [r.origin for r in requests] + [r.destination for r in requests])
    t2 = time.monotonic()
    vals["skim_ms"] = round((t2 - t1) * 1000.0, 3)

    def finish() -> CellResult:
        res.status, res.reason = trace.status, trace.reason
        vals["total_ms"] = round((time.monotonic() - t0) * 1000.0, 3)
        return res

    if t2 > deadline:
        trace.mark(TIMED_OUT, "timed out before enumeration")
        return finish()

    rides = enumerate_all(requests, skim, p, cfg.max_degree, trace, limits=cfg.guard, deadline=deadline)
    stats = graph_stats(rides.graph)
    vals.update(graph_nodes=stats.node_count, graph_edges=stats.edge_count,
                avg_degree=stats.avg_degree, density=stats.density, components=stats.component_count)
    counts = rides.counts()
    for d in range(1, DEGREE_CEILING + 1):
        vals[f"rides_d{d}"] = counts.get(d, 0) if d <= cfg.max_degree else None
    vals["search_space"] = sum(c for d, c in counts.items() if d >= 2)
    if rides.aborted:
        return finish()

    prob = MatchingProblem.from_rides([r.id for r in requests], rides.rides)
    with trace.timer("matching") as rec:
        rec.candidates_explored = len(prob.columns)
        rec.logical_memory = logical_memory(len(prob.columns), 0)
        try:
            solution = solve_exact(prob, deadline=deadline)
        except BudgetExceeded as exc:
            solution = None
            reason = f"timed out in matching: {exc}"
    if solution is None:
        trace.mark(TIMED_OUT, reason, "matching")
        return finish()
    rec.rides_retained = len(solution.selected)
    k = kpis(requests, solution, p)
    vals.update(objective=solution.objective, matching_nodes=solution.nodes_explored,
                share_pooled=k.share_pooled, rel_utility_gain=k.rel_utility_gain,
                mean_occupancy=k.mean_occupancy)
    return finish()


def _run_cell_args(args: tuple[SweepConfig, int, float, int]) -> dict[str, str]:
    return run_cell(*args).row()


def _cell_key(row: dict[str, str]) -> tuple[int, float, int]:
    return int(row["demand_level"]), float(row["lambda"]), int(row["replication"])


def read_results(path: str | Path) -> list[dict[str, str]]:
    """Rows of a results file (schema line and header checked)."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline().rstrip("\r\n")
        if first != SCHEMA_LINE:
            raise SweepError(f"{path}:1: expected '{SCHEMA_LINE}', got {first!r}")
        reader = csv.DictReader(fh)
        if reader.fieldnames != COLUMNS:
            raise SweepError(f"{path}:2: header does not match schema=1 columns")
        return list(reader)


def _repair_tail(path: Path) -> None:
    """Drop a trailing partial line left by an interrupted write."""
    data = path.read_bytes()
    if data and not data.endswith(b"\n"):
        cut = data.rfind(b"\n") + 1
        with open(path, "r+b") as fh:
            fh.truncate(cut)


def run_sweep(cfg: SweepConfig, out: str | Path, resume: bool = False, jobs: int = 1,
              progress: Callable[[dict[str, str]], None] | None = None) -> Path:
    """Run every pending cell and append its row to ``out``.

    Rows are flushed and fsynced one at a time, so an interrupted sweep
    keeps all finished rows; ``resume`` skips cells already present.
    """
    out = Path(out)
    done: set[tuple[int, float, int]] = set()
    if out.exists() and out.stat().st_size > 0:
        if not resume:
            raise SweepError(f"{out} already exists; resume it (--resume) or choose another path")
        _repair_tail(out)
        done = {_cell_key(r) for r in read_results(out)}
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="", encoding="utf-8") as fh:
            fh.write(SCHEMA_LINE + "\n")
            csv.writer(fh, lineterminator="\n").writerow(COLUMNS)

    pending = [(cfg, n, lam, rep) for n, lam, rep in cfg.cells() if (n, float(lam), rep) not in done]
    with open(out, "a", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=COLUMNS, lineterminator="\n")
        if jobs > 1 and len(pending) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                rows: Iterable[dict[str, str]] = pool.map(_run_cell_args, pending)
                _write_rows(rows, writer, fh, progress)
        else:
            _write_rows(map(_run_cell_args, pending), writer, fh, progress)
    return out


def _write_rows(rows, writer, fh, progress) -> None:
    for row in rows:
        writer.writerow(row)
        fh.flush()
        os.fsync(fh.fileno())
        if progress is not None:
            progress(row)


# figure name -> (x column, y column, KPI figure?)
FIGURES: dict[str, tuple[str, str, bool]] = {
    "fig3a": ("demand_level", "search_space", False),
    "fig3b": ("demand_level", "total_ms", False),
    "fig4a": ("demand_level", "rides_d2", False),
    "fig4b": ("demand_level", "rides_d3", False),
    "fig5a": ("demand_level", "rel_utility_gain", True),
    "fig5b": ("demand_level", "share_pooled", True),
    "fig6a": ("search_space", "rel_utility_gain", True),
    "fig6b": ("avg_degree", "search_space", False),
    "fig7": ("demand_level", "avg_degree", False),
}
SUMMARY_COLUMNS = ["search_space", "avg_degree", "share_pooled", "rel_utility_gain", "total_ms"]


def _num(v: str) -> float | None:
    return float(v) if v not in ("", None) else None


def figure_points(rows: Sequence[dict[str, str]], x: str, y: str, kpi: bool) -> list[tuple[float, float, float]]:
    """Per-cell medians ``(x, lambda, y)`` over replications.

    KPI figures use completed rows only; the others use every row that
    has the value (aborted rows carry counts of their completed degrees).
    """
    cells: dict[tuple[int, float], list[dict[str, str]]] = {}
    for r in rows:
        if kpi and r["status"] != COMPLETED:
            continue
        cells.setdefault((int(r["demand_level"]), float(r["lambda"])), []).append(r)
    points = []
    for (_, lam), group in sorted(cells.items()):
        xs = [v for v in (_num(r[x]) for r in group) if v is not None]
        ys = [v for v in (_num(r[y]) for r in group) if v is not None]
        if xs and ys:
            points.append((statistics.median(xs), lam, statistics.median(ys)))
    return points


def summarize(rows: Sequence[dict[str, str]]) -> str:
    """Min / median / max of each indicator per discount level."""
    lines = ["indicator,lambda,min,median,max,n"]
    lambdas = sorted({float(r["lambda"]) for r in rows})
    for col in SUMMARY_COLUMNS:
        kpi = col in ("share_pooled", "rel_utility_gain")
        for lam in lambdas:
            vals = [v for r in rows if float(r["lambda"]) == lam and (not kpi or r["status"] == COMPLETED)
                    for v in [_num(r[col])] if v is not None]
            if vals:
                lines.append(f"{col},{lam:g},{min(vals):.6g},{statistics.median(vals):.6g},"
                             f"{max(vals):.6g},{len(vals)}")
    return "\n".join(lines)


def report(results: str | Path, out_dir: str | Path) -> str:
    """Write one tidy ``x,series,y`` CSV per figure; return the summary text."""
    rows = read_results(results)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, (x, y, kpi) in FIGURES.items():
        with open(out_dir / f"{name}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "series", "y"])
            for px, lam, py in figure_points(rows, x, y, kpi):
                w.writerow([repr(px), f"lambda={lam:g}", repr(py)])
    summary = summarize(rows)
    (out_dir / "summary.csv").write_text(summary + "\n", encoding="utf-8")
    return summary

