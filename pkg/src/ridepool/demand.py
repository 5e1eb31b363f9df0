"""Seeded synthetic trip requests for a single batch window.

Origins and destinations are drawn from network nodes with weights
``exp(-distance_to_center / tau)``; a large origin scale and a small
destination scale give dispersed origins and centre-bound destinations,
the usual morning-peak pattern.

Requests are drawn one at a time from a single generator, so for a fixed
seed the first ``k`` requests of an ``n``-request draw equal a ``k``-request
draw. Sweeps rely on this to nest demand levels.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .netgraph import Network

DEMAND_HEADER = ["id", "origin", "destination", "request_time_s", "direct_time_s", "length_km"]


class DemandError(ValueError):
    pass


@dataclass(frozen=True)
class TripRequest:
    id: int
    origin: int
    destination: int
    request_time: float
    direct_time: float
    length_km: float


@dataclass(frozen=True)
class DemandConfig:
    n: int
    batch_length: float = 600.0
    tau_origin: float | None = None
    tau_dest: float | None = None
    seed: int = 0
    max_retries: int = 1000

    def __post_init__(self):
        if self.n < 1:
            raise DemandError("n must be at least 1")
        if not self.batch_length > 0:
            raise DemandError("batch_length must be positive")
        for name in ("tau_origin", "tau_dest"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise DemandError(f"{name} must be positive")

    def scales(self, net: Network) -> tuple[float, float]:
        """Resolved (tau_origin, tau_dest); defaults are radius and radius / 10."""
        radius = net.radius() or 1.0
        tau_o = self.tau_origin if self.tau_origin is not None else radius
        tau_d = self.tau_dest if self.tau_dest is not None else radius / 10.0
        return tau_o, tau_d


def _cdf(dist: np.ndarray, tau: float) -> np.ndarray:
    w = np.exp(-(dist - dist.min()) / tau)
    c = np.cumsum(w)
    return c / c[-1]


def generate_demand(net: Network, cfg: DemandConfig) -> list[TripRequest]:
    """Draw ``cfg.n`` requests; deterministic given ``cfg.seed``.

    Pairs with ``origin == destination`` or no path are redrawn, up to
    ``cfg.max_retries`` times per request.
    """
    tau_o, tau_d = cfg.scales(net)
    dist = net.distance_to_center()
    cdf_o, cdf_d = _cdf(dist, tau_o), _cdf(dist, tau_d)
    ids = net.node_ids
    rng = np.random.default_rng(cfg.seed)

    cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def paths_from(o: int) -> tuple[np.ndarray, np.ndarray]:
        if o not in cache:
            times, lengths = net.shortest_paths([o])
            cache[o] = (times[0], lengths[0])
        return cache[o]

    requests = []
    for rid in range(cfg.n):
        for _ in range(cfg.max_retries):
            o = ids[min(int(np.searchsorted(cdf_o, rng.random(), side="right")), len(ids) - 1)]
            d = ids[min(int(np.searchsorted(cdf_d, rng.random(), side="right")), len(ids) - 1)]
            t_req = float(rng.random() * cfg.batch_length)
            if o == d:
                continue
            times, lengths = paths_from(o)
            j = net.index_of(d)
            if not math.isfinite(times[j]):
                continue
            requests.append(TripRequest(rid, o, d, t_req, float(times[j]), float(lengths[j]) / 1000.0))
            break
        else:
            raise DemandError(f"retry budget of {cfg.max_retries} exhausted drawing request {rid}")
    return requests


def write_demand(requests: list[TripRequest], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DEMAND_HEADER)
        for r in requests:
            w.writerow([r.id, r.origin, r.destination, repr(r.request_time), repr(r.direct_time), repr(r.length_km)])


def read_demand(path: str | Path) -> list[TripRequest]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != DEMAND_HEADER:
            raise DemandError(f"{path}:1: expected header {','.join(DEMAND_HEADER)}")
        out = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(DEMAND_HEADER):
                raise DemandError(f"{path}:{reader.line_num}: expected {len(DEMAND_HEADER)} fields, got {len(row)}")
            try:
                out.append(TripRequest(int(row[0]), int(row[1]), int(row[2]),
                                       float(row[3]), float(row[4]), float(row[5])))
            except ValueError as exc:
                raise DemandError(f"{path}:{reader.line_num}: malformed row ({exc})") from None
    return out
