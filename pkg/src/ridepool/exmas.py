"""Utility-filtered enumeration of pooled rides.

A pooled ride visits all pickups first, then all drop-offs. For each
traveler the pooled utility is compared to riding alone::

    gain = beta_c * discount * length_km
           + beta_t * (direct_time - beta_s * (shared_time + beta_d * delay))

and a ride is kept only when every co-traveler gains strictly. Rides of
degree two come from an exhaustive pairwise search; higher degrees extend
attractive rides by travelers adjacent (in the shareability graph) to
every current member.

Vehicle timing: route offsets are fixed by the stop order, pickups never
precede request times, and the vehicle leaves as late as possible subject
to that (``departure = max_k(request_k - offset_k)``), which minimises
every traveler's delay at once.

For ``beta_d <= 1`` the filter is hereditary: dropping a traveler from an
attractive sequence leaves an attractive sequence for the others, because
each remaining traveler's ``shared_time + beta_d * delay`` can only shrink.
The clique-based extension is then exhaustive.
"""

from __future__ import annotations

import csv
import itertools
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import networkx as nx
import numpy as np

from .demand import TripRequest
from .metrics import (
    ABORTED,
    TIMED_OUT,
    ComplexityTrace,
    GuardLimits,
    explosion_guard,
    graph_stats,
    logical_memory,
)
from .netgraph import SkimMatrix, UnreachableError

DEGREE_CEILING = 4
RIDES_HEADER = ["ride_id", "degree", "travelers", "pickup_order", "dropoff_order", "total_gain",
                "per_traveler_delta_u"]

# relative slack on the pruning bound; keeps pruning sound under rounding
_BOUND_SLACK = 1e-9
# sets evaluated per vectorised chunk, by degree
_CHUNK = {2: 8192, 3: 2048, 4: 128}


class BudgetExceeded(RuntimeError):
    """Cooperative time budget ran out during enumeration."""


class GuardAbort(RuntimeError):
    """An explosion-guard limit was exceeded during enumeration."""


@dataclass(frozen=True)
class BehavioralParams:
    beta_c: float = 1.0      # utility per km of fare
    beta_t: float = 0.005    # utility per second
    beta_s: float = 1.2      # sharing discomfort multiplier
    beta_d: float = 1.0      # delay sensitivity multiplier
    discount: float = 0.0

    def __post_init__(self):
        if not self.beta_t > 0:
            raise ValueError("beta_t must be positive")
        if not self.beta_c > 0:
            raise ValueError("beta_c must be positive")
        if not self.beta_s >= 1:
            raise ValueError("beta_s must be >= 1")
        if not self.beta_d >= 0:
            raise ValueError("beta_d must be >= 0")
        if not 0 <= self.discount < 1:
            raise ValueError("discount must lie in [0, 1)")

    def with_discount(self, discount: float) -> "BehavioralParams":
        return replace(self, discount=discount)


def utility_gain(p: BehavioralParams, l: float, t: float, t_s: float, t_d: float) -> float:
    return p.beta_c * p.discount * l + p.beta_t * (t - p.beta_s * (t_s + p.beta_d * t_d))


def max_shared_time_bound(p: BehavioralParams, l: float, t: float) -> float:
    """Shared time at which the gain hits zero with no delay.

    Any sequence giving a traveler at least this much in-vehicle time is
    unattractive whatever its delay.
    """
    return t / p.beta_s + p.beta_c * p.discount * l / (p.beta_t * p.beta_s)


def private_utility(p: BehavioralParams, l: float, t: float) -> float:
    """Utility of riding alone at full fare (the non-shared baseline)."""
    return -(p.beta_c * l + p.beta_t * t)


@dataclass(frozen=True)
class StopSequence:
    pickups: tuple[int, ...]
    dropoffs: tuple[int, ...]

    def __post_init__(self):
        if sorted(self.pickups) != sorted(self.dropoffs) or len(set(self.pickups)) != len(self.pickups):
            raise ValueError("pickups and dropoffs must be permutations of the same travelers")


@dataclass(frozen=True)
class RideEvaluation:
    """Per-traveler outcome, aligned with the ride's sorted traveler ids."""

    travelers: tuple[int, ...]
    shared_time: tuple[float, ...]
    delay: tuple[float, ...]
    delta_u: tuple[float, ...]


@dataclass(frozen=True)
class Unattractive:
    traveler: int
    delta_u: float | None = None
    pruned: bool = False


@dataclass(frozen=True)
class Ride:
    id: int
    travelers: tuple[int, ...]
    sequence: StopSequence | None
    evaluation: RideEvaluation

    @property
    def degree(self) -> int:
        return len(self.travelers)

    @property
    def total_gain(self) -> float:
        return math.fsum(self.evaluation.delta_u)

    def key(self) -> tuple:
        if self.sequence is None:
            return (self.travelers, (), ())
        return (self.travelers, self.sequence.pickups, self.sequence.dropoffs)


def _sort_requests(requests: Iterable[TripRequest]) -> list[TripRequest]:
    reqs = sorted(requests, key=lambda r: r.id)
    if len({r.id for r in reqs}) != len(reqs):
        raise ValueError("duplicate request ids")
    return reqs


def solo_ride(r: TripRequest, ride_id: int = 0) -> Ride:
    ev = RideEvaluation((r.id,), (r.direct_time,), (0.0,), (0.0,))
    return Ride(ride_id, (r.id,), None, ev)


def evaluate_sequence(skim: SkimMatrix, requests: Sequence[TripRequest], seq: StopSequence,
                      p: BehavioralParams, prune: bool = True) -> RideEvaluation | Unattractive:
    """Evaluate one stop order for the given co-travelers.

    Degree-one sequences are the solo baseline and always evaluate with zero
    gain. Raises :class:`UnreachableError` when a leg has no path.
    """
    by_id = {r.id: r for r in requests}
    if set(seq.pickups) != set(by_id):
        raise ValueError("sequence must cover exactly the given requests")
    travelers = tuple(sorted(by_id))
    if len(travelers) == 1:
        return solo_ride(by_id[travelers[0]]).evaluation

    stops = [by_id[i].origin for i in seq.pickups] + [by_id[i].destination for i in seq.dropoffs]
    offsets = [0.0]
    for a, b in zip(stops, stops[1:]):
        offsets.append(offsets[-1] + skim.time(a, b))
    d = len(travelers)
    pick = {tid: offsets[k] for k, tid in enumerate(seq.pickups)}
    drop = {tid: offsets[d + k] for k, tid in enumerate(seq.dropoffs)}
    shared = {tid: drop[tid] - pick[tid] for tid in travelers}

    if prune:
        for tid in travelers:
            r = by_id[tid]
            bound = max_shared_time_bound(p, r.length_km, r.direct_time)
            if shared[tid] > bound + _BOUND_SLACK * (1.0 + abs(bound)):
                return Unattractive(tid, None, pruned=True)

    departure = max(by_id[tid].request_time - pick[tid] for tid in travelers)
    delay = {tid: max(0.0, departure + pick[tid] - by_id[tid].request_time) for tid in travelers}
    gains = {}
    for tid in travelers:
        r = by_id[tid]
        gains[tid] = utility_gain(p, r.length_km, r.direct_time, shared[tid], delay[tid])
        if not gains[tid] > 0:
            return Unattractive(tid, gains[tid])
    return RideEvaluation(travelers,
                          tuple(shared[t] for t in travelers),
                          tuple(delay[t] for t in travelers),
                          tuple(gains[t] for t in travelers))


class _BatchEvaluator:
    """Vectorised evaluation of every stop order for many traveler sets.

    Arithmetic follows :func:`evaluate_sequence` operation for operation,
    so both paths agree bit for bit.
    """

    def __init__(self, requests: Sequence[TripRequest], skim: SkimMatrix, p: BehavioralParams):
        self.requests = _sort_requests(requests)
        self.pos = {r.id: k for k, r in enumerate(self.requests)}
        self.ids = np.array([r.id for r in self.requests], dtype=np.int64)
        idx = skim.index
        try:
            self.orig = np.array([idx[r.origin] for r in self.requests], dtype=np.int64)
            self.dest = np.array([idx[r.destination] for r in self.requests], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"node {exc.args[0]} missing from skim") from None
        self.req = np.array([r.request_time for r in self.requests], dtype=float)
        self.t = np.array([r.direct_time for r in self.requests], dtype=float)
        self.l = np.array([r.length_km for r in self.requests], dtype=float)
        self.bound = np.array([max_shared_time_bound(p, r.length_km, r.direct_time) for r in self.requests])
        self.skim = skim
        self.tt = skim.travel_time
        self.p = p
        self._perms: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def perms(self, d: int) -> tuple[np.ndarray, np.ndarray]:
        if d not in self._perms:
            perms = np.array(list(itertools.permutations(range(d))), dtype=np.int64)
            self._perms[d] = (perms, np.argsort(perms, axis=1))
        return self._perms[d]

    def _legs(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        legs = self.tt[a, b]
        if not np.all(np.isfinite(legs)):
            bad = np.argwhere(~np.isfinite(legs))[0]
            ai, bi = a[tuple(bad)], b[tuple(bad)]
            raise UnreachableError(self.skim.node_ids[ai], self.skim.node_ids[bi])
        return legs

    def evaluate(self, sets: np.ndarray, prune: bool):
        """Evaluate all ``d! * d!`` orders of each row of ``sets``.

        ``sets`` holds request positions, ascending within a row. Returns
        ``(hits, explored, pruned)`` where ``hits`` lists
        ``(row, pickup_perm, dropoff_perm, shared, delay, gain)`` for every
        attractive order, in row-major order.
        """
        S, d = sets.shape
        perms, inv = self.perms(d)
        P = len(perms)
        p = self.p

        po = self.orig[sets][:, perms]                      # (S,P,d) origins in pickup order
        pick_ord = np.zeros(po.shape)
        for k in range(1, d):
            pick_ord[..., k] = pick_ord[..., k - 1] + self._legs(po[..., k - 1], po[..., k])
        pick_at = np.take_along_axis(pick_ord, np.broadcast_to(inv, po.shape), axis=2)

        pd_ = self.dest[sets][:, perms]                     # (S,P,d) destinations in drop-off order
        transfer = self._legs(po[:, :, -1][:, :, None], pd_[:, :, 0][:, None, :])   # (S,P,P)
        drop_ord = np.empty((S, P, P, d))
        drop_ord[..., 0] = pick_ord[:, :, -1][:, :, None] + transfer
        for k in range(1, d):
            drop_ord[..., k] = drop_ord[..., k - 1] + self._legs(pd_[..., k - 1], pd_[..., k])[:, None, :]
        drop_at = np.take_along_axis(drop_ord, np.broadcast_to(inv[None, :, :], (S, P, P, d)), axis=3)
        shared = drop_at - pick_at[:, :, None, :]           # (S,P,P,d)

        explored = S * P * P
        if prune:
            bound = self.bound[sets]
            limit = bound + _BOUND_SLACK * (1.0 + np.abs(bound))
            keep = np.all(shared <= limit[:, None, None, :], axis=3)
        else:
            keep = np.ones((S, P, P), dtype=bool)
        rs, pp, dp = np.nonzero(keep)
        n_pruned = explored - rs.size if prune else 0
        if rs.size == 0:
            return [], explored, n_pruned

        req = self.req[sets]                                # (S,d)
        departure = np.max(req[:, None, :] - pick_at, axis=2)   # (S,P)
        delay = np.maximum(0.0, departure[:, :, None] + pick_at - req[:, None, :])   # (S,P,d)

        sh = shared[rs, pp, dp]                             # (K,d)
        dl = delay[rs, pp]
        rows = sets[rs]
        gain = (p.beta_c * p.discount * self.l[rows]
                + p.beta_t * (self.t[rows] - p.beta_s * (sh + p.beta_d * dl)))
        ok = np.all(gain > 0, axis=1)
        hits = [(int(rs[k]), int(pp[k]), int(dp[k]), sh[k], dl[k], gain[k]) for k in np.flatnonzero(ok)]
        return hits, explored, n_pruned


def _run_sets(ev: _BatchEvaluator, sets: list[tuple[int, ...]], d: int, trace: ComplexityTrace,
              stage: str, prune: bool, deadline: float | None, limits: GuardLimits | None,
              start_id: int) -> list[Ride]:
    """Evaluate candidate sets (tuples of request ids) and build rides."""
    rec = trace.stage(stage)
    perms, _ = ev.perms(d)
    rides: list[Ride] = []
    chunk = _CHUNK.get(d, 32)
    for lo in range(0, len(sets), chunk):
        if deadline is not None and time.monotonic() > deadline:
            raise BudgetExceeded(f"time budget exhausted at {stage}")
        block = sets[lo:lo + chunk]
        arr = np.array([[ev.pos[i] for i in s] for s in block], dtype=np.int64).reshape(len(block), d)
        hits, explored, pruned = ev.evaluate(arr, prune)
        rec.candidates_explored += explored
        rec.pruned += pruned
        for row, pp, dp, sh, dl, gain in hits:
            travelers = block[row]
            pick = tuple(travelers[k] for k in perms[pp])
            drop = tuple(travelers[k] for k in perms[dp])
            evaluation = RideEvaluation(travelers, tuple(sh.tolist()), tuple(dl.tolist()), tuple(gain.tolist()))
            rides.append(Ride(start_id + len(rides), travelers, StopSequence(pick, drop), evaluation))
        rec.rides_retained = len(rides)
        if limits is not None and len(rides) > limits.max_rides_per_degree:
            raise GuardAbort(f"rides_retained {len(rides)} at {stage} > {limits.max_rides_per_degree}")
    return rides


def explore_pairs(requests: Sequence[TripRequest], skim: SkimMatrix, p: BehavioralParams,
                  trace: ComplexityTrace | None = None, *, prune: bool = True,
                  deadline: float | None = None, limits: GuardLimits | None = None,
                  start_id: int = 0) -> tuple[nx.Graph, list[Ride]]:
    """Pairwise search: all four orders of every unordered pair.

    Returns the shareability graph (every request is a node; an edge carries
    the best total gain over the pair's attractive orders) and the
    attractive degree-2 rides.
    """
    trace = trace if trace is not None else ComplexityTrace()
    ev = _BatchEvaluator(requests, skim, p)
    ids = [r.id for r in ev.requests]
    with trace.timer("degree2"):
        rides = _run_sets(ev, list(itertools.combinations(ids, 2)), 2, trace, "degree2",
                          prune, deadline, limits, start_id)
    graph = nx.Graph()
    graph.add_nodes_from(ids)
    for ride in rides:
        i, j = ride.travelers
        g = ride.total_gain
        if not graph.has_edge(i, j) or g > graph[i][j]["gain"]:
            graph.add_edge(i, j, gain=g)
    return graph, rides


def extension_candidates(rides: Iterable[Ride], graph: nx.Graph) -> list[tuple[int, ...]]:
    """Traveler sets one larger than an attractive set, forming a clique."""
    adj = {v: set(graph.adj[v]) for v in graph.nodes}
    out: set[tuple[int, ...]] = set()
    seen: set[tuple[int, ...]] = set()
    for ride in rides:
        base = ride.travelers
        if base in seen:
            continue
        seen.add(base)
        common = set.intersection(*(adj[v] for v in base)) - set(base)
        for k in common:
            out.add(tuple(sorted(base + (k,))))
    return sorted(out)


def extend_degree(rides: Sequence[Ride], graph: nx.Graph, requests: Sequence[TripRequest],
                  skim: SkimMatrix, p: BehavioralParams, trace: ComplexityTrace | None = None, *,
                  prune: bool = True, deadline: float | None = None,
                  limits: GuardLimits | None = None, start_id: int = 0) -> list[Ride]:
    """Attractive rides of degree ``d + 1`` grown from degree-``d`` rides."""
    if not rides:
        return []
    d = rides[0].degree
    if d < 2 or any(r.degree != d for r in rides):
        raise ValueError("extend_degree needs rides of a single degree >= 2")
    stage = f"degree{d + 1}"
    trace = trace if trace is not None else ComplexityTrace()
    with trace.timer(stage):
        cands = extension_candidates(rides, graph)
        ev = _BatchEvaluator(requests, skim, p)
        return _run_sets(ev, cands, d + 1, trace, stage, prune, deadline, limits, start_id)


@dataclass
class RideSet:
    rides: list[Ride]
    graph: nx.Graph
    trace: ComplexityTrace
    max_degree: int

    @property
    def aborted(self) -> bool:
        return not self.trace.completed

    def by_degree(self, d: int) -> list[Ride]:
        return [r for r in self.rides if r.degree == d]

    def counts(self) -> dict[int, int]:
        out = {d: 0 for d in range(1, self.max_degree + 1)}
        for r in self.rides:
            out[r.degree] = out.get(r.degree, 0) + 1
        return out

    def keys(self) -> set[tuple]:
        return {r.key() for r in self.rides}


def enumerate_all(requests: Sequence[TripRequest], skim: SkimMatrix, p: BehavioralParams,
                  max_degree: int = 4, trace: ComplexityTrace | None = None, *,
                  limits: GuardLimits | None = None, deadline: float | None = None,
                  prune: bool = True, degree_ceiling: int = DEGREE_CEILING) -> RideSet:
    """All attractive rides up to ``max_degree``, solo rides included.

    Output order is by degree, then traveler ids, then pickup and drop-off
    order; ride ids follow that order. A guard abort or an exhausted time
    budget returns the rides of all completed degrees with the trace
    flagged.
    """
    if not 1 <= max_degree <= degree_ceiling:
        raise ValueError(f"max_degree must lie in [1, {degree_ceiling}]")
    trace = trace if trace is not None else ComplexityTrace()
    reqs = _sort_requests(requests)
    with trace.timer("init") as rec:
        rides = [solo_ride(r, k) for k, r in enumerate(reqs)]
        rec.candidates_explored = rec.rides_retained = len(rides)
        rec.logical_memory = logical_memory(len(rides), 0)
    graph = nx.Graph()
    graph.add_nodes_from(r.id for r in reqs)
    result = RideSet(rides, graph, trace, max_degree)
    if max_degree < 2 or not reqs:
        return result

    current: list[Ride] = []
    for d in range(2, max_degree + 1):
        stage = f"degree{d}"
        try:
            if d == 2:
                graph, current = explore_pairs(reqs, skim, p, trace, prune=prune, deadline=deadline,
                                               limits=limits, start_id=len(rides))
                result.graph = graph
            else:
                current = extend_degree(current, graph, reqs, skim, p, trace, prune=prune,
                                        deadline=deadline, limits=limits, start_id=len(rides))
                trace.stage(stage)
        except BudgetExceeded as exc:
            trace.mark(TIMED_OUT, f"timed out at degree {d}: {exc}", stage)
            return result
        except GuardAbort as exc:
            trace.mark(ABORTED, f"aborted at degree {d}: {exc}", stage)
            return result
        rides.extend(current)
        rec = trace.stage(stage)
        rec.logical_memory = logical_memory(len(rides), graph.number_of_edges())
        if limits is not None:
            reason = explosion_guard(graph_stats(graph), trace, limits)
            if reason is not None:
                trace.mark(ABORTED, f"aborted at degree {d}: {reason}", stage)
                return result
    return result


def _fmt_ids(ids: Iterable[int]) -> str:
    return ";".join(str(i) for i in ids)


def write_rides(rides: Iterable[Ride], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RIDES_HEADER)
        for r in rides:
            seq = r.sequence
            w.writerow([r.id, r.degree, _fmt_ids(r.travelers),
                        _fmt_ids(seq.pickups) if seq else "", _fmt_ids(seq.dropoffs) if seq else "",
                        repr(r.total_gain), ";".join(repr(x) for x in r.evaluation.delta_u)])
