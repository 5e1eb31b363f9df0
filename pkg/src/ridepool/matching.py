"""Traveler-to-ride assignment as weighted set partitioning.

Every traveler must end up in exactly one selected ride; the objective is
the total utility gain of the selected rides. Solo rides (gain 0) keep the
problem feasible.

Ties between optimal partitions are resolved by fewer rides, then by the
lexicographically smallest sorted list of ride ids. Partitions are compared
on the exact sum of their gains (doubles are dyadic rationals, so the sum is
kept as a scaled integer); the reported objective is that sum correctly
rounded, as :func:`math.fsum` gives it. Comparing rounded sums instead would
let two partitions whose exact sums differ tie, and the tie-break would then
depend on how the search splits the problem.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import reverse_cuthill_mckee

from .exmas import BudgetExceeded, Ride

BRUTE_FORCE_LIMIT = 10


@dataclass(frozen=True)
class Column:
    id: int
    travelers: tuple[int, ...]
    gain: float

    @property
    def degree(self) -> int:
        return len(self.travelers)


@dataclass
class MatchingProblem:
    requests: tuple[int, ...]
    columns: list[Column]

    def __post_init__(self):
        self.requests = tuple(sorted(self.requests))
        known = set(self.requests)
        solo = set()
        for c in self.columns:
            if not set(c.travelers) <= known:
                raise ValueError(f"ride {c.id} covers unknown travelers")
            if c.degree == 1:
                solo.add(c.travelers[0])
        missing = known - solo
        if missing:
            raise ValueError(f"travelers without a solo ride: {sorted(missing)[:10]}")

    @classmethod
    def from_rides(cls, requests: Iterable[int], rides: Iterable[Ride]) -> "MatchingProblem":
        """Keep only the best-gain order per traveler set (first id on ties)."""
        best: dict[tuple[int, ...], Column] = {}
        for r in rides:
            g = r.total_gain
            cur = best.get(r.travelers)
            if cur is None or g > cur.gain or (g == cur.gain and r.id < cur.id):
                best[r.travelers] = Column(r.id, r.travelers, g)
        return cls(tuple(requests), sorted(best.values(), key=lambda c: c.id))


@dataclass
class MatchingSolution:
    selected: list[int]
    objective: float
    assignment: dict[int, int]
    nodes_explored: int = 0
    degrees: dict[int, int] = field(default_factory=dict)


_SHIFT = 1074  # 2**-1074 is the smallest positive double


def _exact(g: float) -> int:
    """``g * 2**_SHIFT`` as an exact integer."""
    num, den = g.as_integer_ratio()
    return num << (_SHIFT - den.bit_length() + 1)


def _key(cols: Sequence[Column]) -> tuple:
    """Sort key where smaller is better."""
    return (-sum(_exact(c.gain) for c in cols), len(cols), sorted(c.id for c in cols))


def _value(key: tuple) -> float:
    return -key[0] / (1 << _SHIFT)


def _solution(cols: Sequence[Column], nodes: int = 0) -> MatchingSolution:
    cols = sorted(cols, key=lambda c: c.id)
    assignment = {t: c.id for c in cols for t in c.travelers}
    return MatchingSolution([c.id for c in cols], math.fsum(c.gain for c in cols),
                            dict(sorted(assignment.items())), nodes, {c.id: c.degree for c in cols})


def _components(prob: MatchingProblem) -> list[tuple[list[int], list[Column]]]:
    parent = {t: t for t in prob.requests}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for c in prob.columns:
        root = find(c.travelers[0])
        for t in c.travelers[1:]:
            other = find(t)
            if other != root:
                parent[max(root, other)] = min(root, other)
                root = min(root, other)
    groups: dict[int, tuple[list[int], list[Column]]] = {}
    for t in prob.requests:
        groups.setdefault(find(t), ([], []))[0].append(t)
    for c in prob.columns:
        groups[find(c.travelers[0])][1].append(c)
    return [groups[k] for k in sorted(groups)]


def solve_greedy(prob: MatchingProblem) -> MatchingSolution:
    """Highest gain first (ties: lower degree, then id), skipping overlaps."""
    order = sorted(prob.columns, key=lambda c: (-c.gain, c.degree, c.id))
    covered: set[int] = set()
    chosen = []
    for c in order:
        if covered.isdisjoint(c.travelers):
            chosen.append(c)
            covered.update(c.travelers)
    return _solution(chosen)


def _bandwidth_order(travelers: list[int], columns: list[Column]) -> list[int]:
    """Travelers in reverse Cuthill-McKee order of the co-ride graph.

    Branching along a low-bandwidth order keeps the boundary between
    covered and uncovered travelers narrow, which is what lets memoisation
    and splitting bite.
    """
    pos = {t: k for k, t in enumerate(travelers)}
    rows, cols = [], []
    for c in columns:
        for a in c.travelers:
            for b in c.travelers:
                if a != b:
                    rows.append(pos[a])
                    cols.append(pos[b])
    n = len(travelers)
    adj = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    perm = reverse_cuthill_mckee(adj, symmetric_mode=True)
    return [travelers[k] for k in perm]


def _triangles(columns: Sequence[Column]) -> list[tuple[int, int, int]]:
    """Traveler triples whose three pairs are all shareable."""
    adj: dict[int, set[int]] = {}
    for c in columns:
        if c.degree == 2:
            x, y = c.travelers
            adj.setdefault(x, set()).add(y)
            adj.setdefault(y, set()).add(x)
    out = []
    for x in sorted(adj):
        for y in sorted(t for t in adj[x] if t > x):
            out.extend((x, y, z) for z in sorted(adj[x] & adj[y]) if z > y)
    return out


@dataclass
class _Relaxation:
    """Multipliers of the additive bound and what they yield at the root."""

    allot: dict[int, float]
    cliques: list[tuple[tuple[int, int, int], float]]
    reduced: list[float]
    bound: float
    packed: list[int]


def _multipliers(travelers: list[int], columns: list[Column], floor: float,
                 iterations: int = 300) -> _Relaxation:
    """Multipliers for the additive bound, by projected subgradient steps.

    Each traveler gets an allotment ``u`` and each triangle of mutually
    shareable travelers a weight ``v >= 0``. Rides holding two or more of a
    triangle's travelers pairwise overlap, so at most one of them is chosen.
    For a traveler set ``F`` the gain of any partition is then at most
    ``sum(u[F]) + sum(v of triangles with two members in F)`` plus the
    positive reduced gains ``gain_c - u(c) - v(triangles of c)`` of rides
    inside ``F``. ``floor`` is a known feasible objective used for the step
    size; rides are also packed greedily by reduced gain along the way and
    the best such partition is kept.
    """
    pos = {t: k for k, t in enumerate(travelers)}
    rows = [pos[t] for c in columns for t in c.travelers]
    cols = [j for j, c in enumerate(columns) for _ in c.travelers]
    member = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(travelers), len(columns)))
    triangles = _triangles(columns)
    by_pair: dict[tuple[int, int], list[int]] = {}
    for j, c in enumerate(columns):
        for pair in combinations(sorted(c.travelers), 2):
            by_pair.setdefault(pair, []).append(j)
    k_rows, k_cols = [], []
    for k, (x, y, z) in enumerate(triangles):
        js = set(by_pair[(x, y)]) | set(by_pair[(x, z)]) | set(by_pair[(y, z)])
        k_rows += [k] * len(js)
        k_cols += sorted(js)
    clique = csr_matrix((np.ones(len(k_rows)), (k_rows, k_cols)), shape=(len(triangles), len(columns)))

    gain = np.array([c.gain for c in columns])
    u = np.zeros(len(travelers))
    np.maximum.at(u, rows, np.repeat(gain / np.array([c.degree for c in columns]),
                                     [c.degree for c in columns]))
    v = np.zeros(len(triangles))
    members = [[pos[t] for t in c.travelers] for c in columns]
    incumbent: list[int] = []
    incumbent_value = -math.inf

    def pack(rc):
        nonlocal incumbent, incumbent_value
        taken = [False] * len(travelers)
        chosen = []
        for j in np.lexsort((-gain, -rc)).tolist():
            if not any(taken[i] for i in members[j]):
                chosen.append(j)
                for i in members[j]:
                    taken[i] = True
        value = math.fsum(columns[j].gain for j in chosen)
        if value > incumbent_value:
            incumbent, incumbent_value = chosen, value

    def evaluate(u, v):
        rc = gain - member.T @ u - clique.T @ v
        return u.sum() + v.sum() + rc[rc > 0].sum(), rc

    best_u, best_v = u.copy(), v.copy()
    best, rc = evaluate(u, v)
    theta = 1.0
    stall = 0
    for it in range(iterations):
        if it % 10 == 0:
            pack(rc)
            floor = max(floor, incumbent_value)
        on = rc > 0
        grad_u = 1.0 - member @ on
        grad_v = 1.0 - clique @ on
        grad_v[(v <= 0) & (grad_v > 0)] = 0.0
        norm = float(grad_u @ grad_u + grad_v @ grad_v)
        if norm == 0 or best - floor <= 1e-9 * (1.0 + abs(floor)):
            break
        step = theta * (best - floor) / norm
        u = u - step * grad_u
        v = np.maximum(v - step * grad_v, 0.0)
        val, rc = evaluate(u, v)
        if val < best - 1e-12:
            best, best_u, best_v, stall = val, u.copy(), v.copy(), 0
        else:
            stall += 1
            if stall >= 10:
                theta, stall = theta / 2.0, 0
                u, v = best_u.copy(), best_v.copy()
                val, rc = evaluate(u, v)
    rc = gain - member.T @ best_u - clique.T @ best_v
    pack(rc)
    cliques = [(tri, w) for tri, w in zip(triangles, best_v.tolist()) if w > 0]
    # recompute the bound exactly as the search will, so fixing stays sound
    allot = dict(zip(travelers, best_u.tolist()))
    reduced = rc.tolist()
    bound = (math.fsum(allot.values()) + math.fsum(w for _, w in cliques)
             + math.fsum(r for r in reduced if r > 0))
    return _Relaxation(allot, cliques, reduced, bound, incumbent)


class _Search:
    """Depth-first branch and bound over one connected group of travelers.

    A node is the set of still-uncovered travelers (a bitmask). It branches
    over the rides covering the first uncovered traveler and is asked for
    its best completion only if that completion reaches ``floor``; the
    additive bound (each uncovered traveler's best per-capita gain among
    rides still available) discards options that cannot. Exact node results
    and "below floor" proofs are memoised, and a node whose remaining rides
    fall apart into independent groups is solved group by group.
    """

    def __init__(self, travelers: list[int], columns: list[Column], reduced: list[float],
                 relax: _Relaxation, deadline: float | None, counter: list[int]):
        order = _bandwidth_order(travelers, columns)
        self.bit = {t: k for k, t in enumerate(order)}
        self.deadline = deadline
        self.counter = counter
        self.columns = columns
        self.exact_gain = [_exact(c.gain) for c in columns]
        self.masks = []
        for c in columns:
            m = 0
            for t in c.travelers:
                m |= 1 << self.bit[t]
            self.masks.append(m)
        n = len(travelers)
        # per traveler: column indices, best per-capita first
        self.by_member: list[list[int]] = [[] for _ in range(n)]
        # per traveler: columns whose first member (in branching order) it is
        self.by_first: list[list[int]] = [[] for _ in range(n)]
        for k, c in enumerate(columns):
            bits = [self.bit[t] for t in c.travelers]
            for b in bits:
                self.by_member[b].append(k)
            self.by_first[min(bits)].append(k)
        for lst in self.by_member:
            lst.sort(key=lambda k: (-columns[k].gain / columns[k].degree, k))
        for lst in self.by_first:
            lst.sort(key=lambda k: (-columns[k].gain, columns[k].degree, columns[k].id))
        self.tol = 1e-9 * (1.0 + math.fsum(c.gain for c in columns))
        self.neighbours = [0] * n
        for k, c in enumerate(columns):
            for t in c.travelers:
                self.neighbours[self.bit[t]] |= self.masks[k]

        u_bit = [relax.allot[t] for t in order]
        # byte-wise lookup tables for sum(u[free])
        self.u_tables = []
        for lo in range(0, n, 8):
            vals = u_bit[lo:lo + 8]
            table = [0.0] * 256
            for byte in range(1, 256):
                low = (byte & -byte).bit_length() - 1
                table[byte] = table[byte & (byte - 1)] + (vals[low] if low < len(vals) else 0.0)
            self.u_tables.append(table)
        self.positive = [(self.masks[k], rc) for k, rc in enumerate(reduced) if rc > 0]
        self.cliques = []
        for tri, w in relax.cliques:
            m = 0
            for t in tri:
                m |= 1 << self.bit[t]
            self.cliques.append((m, w))
        self.reduced = reduced
        self.member_bits = [[self.bit[t] for t in c.travelers] for c in columns]
        self.lowered = [0.0] * n
        self.exact: dict[int, tuple[tuple, tuple[int, ...]]] = {}
        self.below: dict[int, float] = {}

    @staticmethod
    def _bits(mask: int):
        while mask:
            low = mask & -mask
            yield low.bit_length() - 1
            mask ^= low

    def bound(self, free: int) -> float:
        total = 0.0
        rest = free
        for table in self.u_tables:
            if not rest:
                break
            total += table[rest & 0xFF]
            rest >>= 8
        for mask, rc in self.positive:
            if mask & ~free == 0:
                total += rc
        for mask, w in self.cliques:
            live = mask & free
            if live & (live - 1):
                total += w
        return total

    def tight_bound(self, free: int) -> float:
        """:meth:`bound` after lowering allotments within ``free``.

        Each uncovered traveler not in a positive ride gives up its smallest
        slack over the rides still available; lowered allotments raise the
        reduced gains of rides sharing that traveler, so the pass is
        sequential.
        """
        total = self.bound(free)
        masks, reduced, member_bits = self.masks, self.reduced, self.member_bits
        lowered = self.lowered
        touched = []
        rest = free
        while rest:
            b = (rest & -rest).bit_length() - 1
            rest &= rest - 1
            slack = math.inf
            for k in self.by_member[b]:
                if masks[k] & ~free:
                    continue
                rc = reduced[k]
                for j in member_bits[k]:
                    rc += lowered[j]
                if -rc < slack:
                    slack = -rc
                    if slack <= 0.0:
                        break
            if 0.0 < slack < math.inf:
                lowered[b] = slack
                touched.append(b)
                total -= slack
        for b in touched:
            lowered[b] = 0.0
        return total

    def split(self, free: int) -> list[int]:
        """Independent groups of ``free`` (linked by sharing any ride)."""
        groups = []
        rest = free
        nbr = self.neighbours
        while rest:
            group = frontier = rest & -rest
            while frontier:
                b = (frontier & -frontier).bit_length() - 1
                frontier &= frontier - 1
                new = nbr[b] & free & ~group
                group |= new
                frontier |= new
            groups.append(group)
            rest &= ~group
        return groups

    def _key(self, chosen) -> tuple:
        exact = self.exact_gain
        return (-sum(exact[k] for k in chosen), len(chosen), sorted(self.columns[k].id for k in chosen))

    def solve(self, free: int, floor: float):
        """Best ``(key, column indices)`` covering ``free``.

        Returns ``None`` only when the best objective is provably below
        ``floor``; any completion reaching ``floor`` is found exactly.
        """
        if free == 0:
            return ((0, 0, []), ())
        hit = self.exact.get(free)
        if hit is not None:
            return hit
        known = self.below.get(free)
        if known is not None and known <= floor:
            return None
        self.counter[0] += 1
        if self.deadline is not None and self.counter[0] % 256 == 0 and time.monotonic() > self.deadline:
            raise BudgetExceeded("time budget exhausted in matching")
        groups = self.split(free)
        if len(groups) == 1 and self.tight_bound(free) < floor - self.tol:
            result = None
        elif len(groups) > 1:
            result = self._groups(groups, floor)
        else:
            result = self._branch(free, floor)
        if result is None:
            self.below[free] = min(floor, self.below.get(free, floor))
        else:
            self.exact[free] = result
        return result

    def _groups(self, groups: list[int], floor: float):
        bounds = [self.bound(g) for g in groups]
        if math.fsum(bounds) < floor - self.tol:
            return None
        chosen: tuple[int, ...] = ()
        for i, g in enumerate(groups):
            sub = self.solve(g, floor - math.fsum(bounds[:i] + bounds[i + 1:]))
            if sub is None:
                return None
            bounds[i] = _value(sub[0])
            chosen += sub[1]
        chosen = tuple(sorted(chosen))
        return self._key(chosen), chosen

    def _branch(self, free: int, floor: float):
        first = (free & -free).bit_length() - 1
        options = []
        for k in self.by_first[first]:
            m = self.masks[k]
            if m & ~free:
                continue
            rest = free & ~m
            options.append((self.columns[k].gain + self.bound(rest), k, rest))
        options.sort(key=lambda o: -o[0])
        best_key, best = None, ()
        target = floor
        for ub, k, rest in options:
            if ub < target - self.tol:
                break
            sub = self.solve(rest, target - self.columns[k].gain)
            if sub is None:
                continue
            chosen = tuple(sorted((k,) + sub[1]))
            key = self._key(chosen)
            if best_key is None or key < best_key:
                best_key, best = key, chosen
                target = max(target, _value(key))
        if best_key is None or _value(best_key) < floor - self.tol:
            return None
        return best_key, best


def _branch_and_bound(travelers: list[int], columns: list[Column], deadline: float | None,
                      counter: list[int]) -> list[Column]:
    floor = solve_greedy(MatchingProblem(tuple(travelers), columns)).objective
    relax = _multipliers(travelers, columns, floor)
    bound = relax.bound
    incumbent = max(floor, math.fsum(columns[j].gain for j in relax.packed))
    tol = 1e-9 * (1.0 + math.fsum(abs(c.gain) for c in columns))
    # Search for partitions reaching an optimistic floor first and relax it
    # towards the incumbent; the first floor that is reached yields the
    # optimum because every partition at or above a floor is searched.
    gap = max(bound - incumbent, 0.0)
    step = gap / 64.0
    while True:
        floor = max(incumbent, bound - step)
        # a ride with reduced gain rc caps every partition using it at bound + rc
        keep = [k for k, rc in enumerate(relax.reduced) if bound + min(0.0, rc) >= floor - tol]
        kept = [columns[k] for k in keep]
        search = _Search(travelers, kept, [relax.reduced[k] for k in keep], relax, deadline, counter)
        result = search.solve((1 << len(travelers)) - 1, floor)
        if result is not None:
            return [kept[k] for k in result[1]]
        assert floor > incumbent, "incumbent must be reachable"
        step *= 2.0


def solve_exact(prob: MatchingProblem, deadline: float | None = None) -> MatchingSolution:
    """Optimal partition by branch and bound per connected component.

    Branches over the rides covering the lowest-id uncovered traveler with
    an additive per-capita bound; see :class:`_Search`.
    """
    counter = [0]
    chosen: list[Column] = []
    for travelers, columns in _components(prob):
        if len(travelers) == 1:
            chosen.extend(c for c in columns if c.degree == 1)
            counter[0] += 1
            continue
        if deadline is not None and time.monotonic() > deadline:
            raise BudgetExceeded("time budget exhausted in matching")
        chosen.extend(_branch_and_bound(travelers, columns, deadline, counter))
    return _solution(chosen, counter[0])


def brute_force_partition(prob: MatchingProblem, max_n: int = BRUTE_FORCE_LIMIT) -> MatchingSolution:
    """Exhaustive search over every partition of the travelers into rides."""
    if len(prob.requests) > max_n:
        raise ValueError(f"brute force limited to {max_n} travelers, got {len(prob.requests)}")
    covering: dict[int, list[Column]] = {t: [] for t in prob.requests}
    for c in prob.columns:
        covering[min(c.travelers)].append(c)
    best: list = [None, None]

    def walk(covered: frozenset, chosen: list[Column]):
        rest = [t for t in prob.requests if t not in covered]
        if not rest:
            key = _key(chosen)
            if best[0] is None or key < best[0]:
                best[0], best[1] = key, list(chosen)
            return
        for c in covering[rest[0]]:
            if covered.isdisjoint(c.travelers):
                walk(covered | set(c.travelers), chosen + [c])

    walk(frozenset(), [])
    return _solution(best[1])


SOLUTION_HEADER = ["request_id", "ride_id", "degree", "delta_u"]


def write_solution(solution: MatchingSolution, rides: Mapping[int, Ride], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SOLUTION_HEADER)
        for req, rid in solution.assignment.items():
            ride = rides[rid]
            du = ride.evaluation.delta_u[ride.travelers.index(req)]
            w.writerow([req, rid, ride.degree, repr(du)])
        fh.write(f"# objective={solution.objective!r}\n")
