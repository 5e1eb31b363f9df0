"""Complexity indicators: search-space size, traces, graph topology, KPIs.

The stage trace follows the enumeration pipeline: ``init`` (skims and solo
rides), ``degree2`` .. ``degreeN`` and finally ``matching``. Memory is a
logical, platform-independent model (record counts times nominal sizes)
rather than process RSS.
"""

from __future__ import annotations

import math
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable

import networkx as nx

if TYPE_CHECKING:
    from .demand import TripRequest
    from .exmas import BehavioralParams
    from .matching import MatchingSolution

RIDE_RECORD_BYTES = 128
EDGE_RECORD_BYTES = 16

COMPLETED = "completed"
ABORTED = "aborted"
TIMED_OUT = "timed-out"


def stage_names(max_degree: int) -> list[str]:
    return ["init"] + [f"degree{d}" for d in range(2, max_degree + 1)] + ["matching"]


def theoretical_search_space(q: int, d: int) -> int:
    """Unfiltered count of ordered rides: ``C(q, d) * d! * d!``.

    Exact integer arithmetic; zero when ``d > q``.
    """
    if q < 0 or d < 1:
        raise ValueError("need q >= 0 and d >= 1")
    return math.comb(q, d) * math.factorial(d) ** 2


def log10_int(value: int) -> float:
    """log10 of an arbitrarily large positive integer without float overflow."""
    if value <= 0:
        raise ValueError("log10 of non-positive value")
    digits = len(str(value))
    if digits <= 300:
        return math.log10(value)
    head = int(str(value)[:17])
    return math.log10(head) + digits - 17


def logical_memory(rides: int, edges: int, ride_bytes: int = RIDE_RECORD_BYTES,
                   edge_bytes: int = EDGE_RECORD_BYTES) -> int:
    return rides * ride_bytes + edges * edge_bytes


@dataclass
class StageRecord:
    candidates_explored: int = 0
    rides_retained: int = 0
    pruned: int = 0
    elapsed_ms: float = 0.0
    logical_memory: int = 0
    status: str = COMPLETED


@dataclass
class ComplexityTrace:
    """Per-stage counters for one enumeration + matching run."""

    stages: dict[str, StageRecord] = field(default_factory=dict)
    status: str = COMPLETED
    reason: str = ""

    def stage(self, name: str) -> StageRecord:
        return self.stages.setdefault(name, StageRecord())

    def mark(self, status: str, reason: str, stage: str | None = None) -> None:
        self.status = status
        self.reason = reason
        if stage is not None:
            self.stage(stage).status = status

    @property
    def completed(self) -> bool:
        return self.status == COMPLETED

    def timer(self, name: str) -> "_StageTimer":
        return _StageTimer(self.stage(name))

    def merge(self, other: "ComplexityTrace") -> None:
        """Add another trace's counters into this one (associative)."""
        for name, rec in other.stages.items():
            mine = self.stage(name)
            mine.candidates_explored += rec.candidates_explored
            mine.rides_retained += rec.rides_retained
            mine.pruned += rec.pruned
            mine.elapsed_ms += rec.elapsed_ms
            mine.logical_memory += rec.logical_memory


class _StageTimer:
    def __init__(self, rec: StageRecord):
        self.rec = rec

    def __enter__(self):
        self._t0 = time.perf_counter()
        return self.rec

    def __exit__(self, *exc):
        self.rec.elapsed_ms += (time.perf_counter() - self._t0) * 1000.0
        return False


@dataclass(frozen=True)
class GraphStats:
    node_count: int
    edge_count: int
    avg_degree: float
    density: float
    component_count: int


def graph_stats(g: nx.Graph) -> GraphStats:
    n = g.number_of_nodes()
    e = g.number_of_edges()
    if n == 0:
        return GraphStats(0, 0, 0.0, 0.0, 0)
    density = 2.0 * e / (n * (n - 1)) if n > 1 else 0.0
    return GraphStats(n, e, 2.0 * e / n, density, nx.number_connected_components(g))


@dataclass(frozen=True)
class Kpis:
    share_pooled: float
    rel_utility_gain: float
    mean_occupancy: float


def kpis(requests: Iterable["TripRequest"], solution: "MatchingSolution", p: "BehavioralParams") -> Kpis:
    """Pooling efficiency of a matching.

    ``rel_utility_gain`` divides the objective by the absolute total private
    (non-shared) utility of all travelers.
    """
    from .exmas import private_utility

    requests = list(requests)
    n = len(requests)
    if n == 0:
        return Kpis(0.0, 0.0, 0.0)
    size = Counter(solution.assignment.values())
    degree = {r.id: size[solution.assignment[r.id]] for r in requests}
    pooled = sum(1 for d in degree.values() if d >= 2)
    baseline = abs(math.fsum(private_utility(p, r.length_km, r.direct_time) for r in requests))
    rel = solution.objective / baseline if baseline > 0 else 0.0
    return Kpis(pooled / n, rel, sum(degree.values()) / n)


@dataclass(frozen=True)
class GuardLimits:
    max_avg_degree: float = 80.0
    max_rides_per_degree: int = 10**6
    max_stage_seconds: float | None = None

    def __post_init__(self):
        if not (self.max_avg_degree > 0 and self.max_rides_per_degree > 0):
            raise ValueError("guard limits must be positive")
        if self.max_stage_seconds is not None and not self.max_stage_seconds > 0:
            raise ValueError("guard limits must be positive")


def explosion_guard(stats: GraphStats, trace: ComplexityTrace, limits: GuardLimits) -> str | None:
    """Return an abort reason when any limit is exceeded, else ``None``."""
    if stats.avg_degree > limits.max_avg_degree:
        return f"avg_degree {stats.avg_degree:g} > {limits.max_avg_degree:g}"
    for name, rec in trace.stages.items():
        if name.startswith("degree") and rec.rides_retained > limits.max_rides_per_degree:
            return f"rides_retained {rec.rides_retained} at {name} > {limits.max_rides_per_degree}"
    if limits.max_stage_seconds is not None:
        for name, rec in trace.stages.items():
            if rec.elapsed_ms > limits.max_stage_seconds * 1000.0:
                return f"elapsed {rec.elapsed_ms / 1000.0:.3f}s at {name} > {limits.max_stage_seconds:g}s"
    return None
