"""Road network model, shortest-path travel times and skim matrices.

Networks are planar (coordinates in meters) with directed edges. Travel
time on an edge is ``length / speed``. Shortest paths are computed with
Dijkstra from :mod:`scipy.sparse.csgraph`.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, dijkstra

NODES_HEADER = ["id", "x", "y"]
EDGES_HEADER = ["from", "to", "length_m", "speed_mps"]


class NetworkError(ValueError):
    """Raised for malformed or inconsistent network input."""


class UnreachableError(LookupError):
    """Raised when a travel time is requested for an unreachable pair."""

    def __init__(self, a: int, b: int):
        super().__init__(f"node {b} is unreachable from node {a}")
        self.a = a
        self.b = b


@dataclass(frozen=True)
class Node:
    id: int
    x: float
    y: float


@dataclass(frozen=True)
class Edge:
    source: int
    target: int
    length: float
    speed: float

    @property
    def time(self) -> float:
        return self.length / self.speed


@dataclass
class Network:
    """Immutable-by-convention directed road network.

    ``center`` defaults to the centroid of node coordinates.
    """

    nodes: list[Node]
    edges: list[Edge]
    center: tuple[float, float] | None = None
    _index: dict[int, int] = field(init=False, repr=False)
    _time_csr: csr_matrix = field(init=False, repr=False)
    _length_csr: csr_matrix = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._index = {}
        for i, node in enumerate(self.nodes):
            if node.id in self._index:
                raise NetworkError(f"duplicate node id {node.id}")
            if not (math.isfinite(node.x) and math.isfinite(node.y)):
                raise NetworkError(f"node {node.id} has non-finite coordinates")
            self._index[node.id] = i
        if self.center is None:
            xs = [n.x for n in self.nodes]
            ys = [n.y for n in self.nodes]
            self.center = (float(np.mean(xs)), float(np.mean(ys))) if self.nodes else (0.0, 0.0)

        # parallel edges collapse to the fastest one
        best: dict[tuple[int, int], Edge] = {}
        for e in self.edges:
            for end in (e.source, e.target):
                if end not in self._index:
                    raise NetworkError(f"edge {e.source}->{e.target} references unknown node {end}")
            if not (e.length > 0 and e.speed > 0 and math.isfinite(e.length) and math.isfinite(e.speed)):
                raise NetworkError(f"edge {e.source}->{e.target} needs positive finite length and speed")
            key = (e.source, e.target)
            if key not in best or e.time < best[key].time:
                best[key] = e
        n = len(self.nodes)
        rows = [self._index[s] for s, _ in best]
        cols = [self._index[t] for _, t in best]
        self._time_csr = csr_matrix(([e.time for e in best.values()], (rows, cols)), shape=(n, n))
        self._length_csr = csr_matrix(([e.length for e in best.values()], (rows, cols)), shape=(n, n))

    def __contains__(self, node_id: int) -> bool:
        return node_id in self._index

    def index_of(self, node_id: int) -> int:
        try:
            return self._index[node_id]
        except KeyError:
            raise NetworkError(f"unknown node id {node_id}") from None

    @property
    def node_ids(self) -> list[int]:
        return [n.id for n in self.nodes]

    def coords(self) -> np.ndarray:
        return np.array([[n.x, n.y] for n in self.nodes], dtype=float).reshape(-1, 2)

    def distance_to_center(self) -> np.ndarray:
        """Euclidean distance of every node (in node order) to the center."""
        cx, cy = self.center
        xy = self.coords()
        return np.hypot(xy[:, 0] - cx, xy[:, 1] - cy)

    def radius(self) -> float:
        d = self.distance_to_center()
        return float(d.max()) if d.size else 0.0

    def strong_components(self) -> list[int]:
        """Sizes of strongly connected components, largest first."""
        _, labels = connected_components(self._time_csr, directed=True, connection="strong")
        return sorted(np.bincount(labels).tolist(), reverse=True)

    def shortest_paths(self, sources: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Times and lengths from each source to every node.

        Returns two ``(len(sources), N)`` arrays. Lengths are measured along
        the time-shortest path; unreachable entries are ``inf``.
        """
        idx = np.array([self.index_of(s) for s in sources], dtype=int)
        if idx.size == 0:
            n = len(self.nodes)
            return np.zeros((0, n)), np.zeros((0, n))
        times, pred = dijkstra(self._time_csr, directed=True, indices=idx, return_predecessors=True)
        lengths = np.full_like(times, np.inf)
        for row, src in enumerate(idx):
            lengths[row] = _tree_lengths(times[row], pred[row], src, self._length_csr)
        return times, lengths


def _tree_lengths(times: np.ndarray, pred: np.ndarray, src: int, length_csr: csr_matrix) -> np.ndarray:
    out = np.full(times.shape, np.inf)
    out[src] = 0.0
    reached = np.flatnonzero(np.isfinite(times) & (pred >= 0))
    if reached.size == 0:
        return out
    step = np.asarray(length_csr[pred[reached], reached]).ravel()
    step_of = dict(zip(reached.tolist(), step.tolist()))
    parent = pred.tolist()
    acc = out.tolist()
    # parents settle before children in order of increasing time
    for v in reached[np.argsort(times[reached], kind="stable")].tolist():
        acc[v] = acc[parent[v]] + step_of[v]
    return np.asarray(acc)


@dataclass(frozen=True)
class SkimMatrix:
    """Pairwise shortest travel times (seconds) among a subset of nodes.

    Unreachable entries are stored as ``inf`` and surface as
    :class:`UnreachableError` through :meth:`time`.
    """

    node_ids: tuple[int, ...]
    travel_time: np.ndarray
    length: np.ndarray

    @property
    def index(self) -> dict[int, int]:
        return {nid: i for i, nid in enumerate(self.node_ids)}

    def time(self, a: int, b: int) -> float:
        idx = self.index
        value = float(self.travel_time[idx[a], idx[b]])
        if not math.isfinite(value):
            raise UnreachableError(a, b)
        return value

    def distance(self, a: int, b: int) -> float:
        idx = self.index
        value = float(self.length[idx[a], idx[b]])
        if not math.isfinite(value):
            raise UnreachableError(a, b)
        return value

    def unreachable_pairs(self) -> list[tuple[int, int]]:
        rows, cols = np.nonzero(~np.isfinite(self.travel_time))
        return [(self.node_ids[r], self.node_ids[c]) for r, c in zip(rows, cols)]


def shortest_travel_time(net: Network, a: int, b: int) -> float | None:
    """Shortest travel time from ``a`` to ``b`` in seconds, ``None`` if unreachable."""
    net.index_of(b)
    if a == b:
        net.index_of(a)
        return 0.0
    times, _ = net.shortest_paths([a])
    value = float(times[0, net.index_of(b)])
    return value if math.isfinite(value) else None


def build_skim(net: Network, nodes: Iterable[int]) -> SkimMatrix:
    """Skim matrix over the listed nodes only (duplicates are dropped)."""
    ids = tuple(dict.fromkeys(nodes))
    if not ids:
        return SkimMatrix((), np.zeros((0, 0)), np.zeros((0, 0)))
    times, lengths = net.shortest_paths(ids)
    cols = [net.index_of(i) for i in ids]
    tt = times[:, cols]
    ll = lengths[:, cols]
    np.fill_diagonal(tt, 0.0)
    np.fill_diagonal(ll, 0.0)
    return SkimMatrix(ids, tt, ll)


def generate_grid(rows: int, cols: int, spacing: float, speed: float) -> Network:
    """4-neighbour lattice with edges in both directions.

    Node ``r * cols + c`` sits at ``(c * spacing, r * spacing)``.
    """
    if rows < 2 or cols < 2:
        raise ValueError("grid needs at least 2 rows and 2 columns")
    if not (spacing > 0 and speed > 0):
        raise ValueError("spacing and speed must be positive")
    nodes = [Node(r * cols + c, c * spacing, r * spacing) for r in range(rows) for c in range(cols)]
    edges = []
    for r in range(rows):
        for c in range(cols):
            u = r * cols + c
            if c + 1 < cols:
                edges += [Edge(u, u + 1, spacing, speed), Edge(u + 1, u, spacing, speed)]
            if r + 1 < rows:
                edges += [Edge(u, u + cols, spacing, speed), Edge(u + cols, u, spacing, speed)]
    center = ((cols - 1) * spacing / 2.0, (rows - 1) * spacing / 2.0)
    return Network(nodes, edges, center)


def _read_rows(path: Path, header: list[str]) -> list[tuple[int, list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise NetworkError(f"{path}: empty file, expected header {','.join(header)}") from None
        if [h.strip() for h in first] != header:
            raise NetworkError(f"{path}:1: expected header {','.join(header)}, got {','.join(first)}")
        rows = []
        for row in reader:
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise NetworkError(f"{path}:{reader.line_num}: expected {len(header)} fields, got {len(row)}")
            rows.append((reader.line_num, row))
    return rows


def load_network(nodes_file: str | Path, edges_file: str | Path, center: tuple[float, float] | None = None) -> Network:
    """Read ``nodes.csv`` / ``edges.csv`` into a validated :class:`Network`.

    A network that is not strongly connected loads with a warning listing
    component sizes.
    """
    nodes_file, edges_file = Path(nodes_file), Path(edges_file)
    nodes: list[Node] = []
    seen: set[int] = set()
    for line, row in _read_rows(nodes_file, NODES_HEADER):
        try:
            node = Node(int(row[0]), float(row[1]), float(row[2]))
        except ValueError as exc:
            raise NetworkError(f"{nodes_file}:{line}: malformed row ({exc})") from None
        if node.id in seen:
            raise NetworkError(f"{nodes_file}:{line}: duplicate node id {node.id}")
        seen.add(node.id)
        nodes.append(node)
    edges: list[Edge] = []
    for line, row in _read_rows(edges_file, EDGES_HEADER):
        try:
            edge = Edge(int(row[0]), int(row[1]), float(row[2]), float(row[3]))
        except ValueError as exc:
            raise NetworkError(f"{edges_file}:{line}: malformed row ({exc})") from None
        for end in (edge.source, edge.target):
            if end not in seen:
                raise NetworkError(f"{edges_file}:{line}: dangling edge endpoint {end}")
        if not (edge.length > 0 and edge.speed > 0):
            raise NetworkError(f"{edges_file}:{line}: length_m and speed_mps must be positive")
        edges.append(edge)
    net = Network(nodes, edges, center)
    sizes = net.strong_components()
    if len(sizes) > 1:
        warnings.warn(f"network is not strongly connected; component sizes {sizes}", stacklevel=2)
    return net


def write_network(net: Network, nodes_file: str | Path, edges_file: str | Path) -> None:
    with open(nodes_file, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(NODES_HEADER)
        for n in net.nodes:
            w.writerow([n.id, repr(float(n.x)), repr(float(n.y))])
    with open(edges_file, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EDGES_HEADER)
        for e in net.edges:
            w.writerow([e.source, e.target, repr(float(e.length)), repr(float(e.speed))])
