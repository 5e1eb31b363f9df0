from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ridepool.demand import DemandConfig, generate_demand  # noqa: E402
from ridepool.exmas import BehavioralParams  # noqa: E402
from ridepool.netgraph import Edge, Network, Node, build_skim, generate_grid  # noqa: E402

import oracles  # noqa: E402

# (criterion number, title, passed, detail) recorded by the acceptance suite
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'} - {title} ({detail})")


def line_network(hops: int = 3, length: float = 600.0, speed: float = 10.0) -> Network:
    """Nodes 0..hops on a straight line, both directions."""
    nodes = [Node(i, i * length, 0.0) for i in range(hops + 1)]
    edges = []
    for i in range(hops):
        edges += [Edge(i, i + 1, length, speed), Edge(i + 1, i, length, speed)]
    return Network(nodes, edges)


def oracle_view(net: Network, requests):
    """Requests and travel times in the plain-dict form the oracles expect."""
    tt = oracles.travel_times([n.id for n in net.nodes],
                              [(e.source, e.target, e.length, e.speed) for e in net.edges])
    reqs = {r.id: {"o": r.origin, "d": r.destination, "req": r.request_time,
                   "t": r.direct_time, "l": r.length_km} for r in requests}
    return reqs, tt


def beta_of(p: BehavioralParams) -> tuple[float, float, float, float]:
    return p.beta_c, p.beta_t, p.beta_s, p.beta_d


def small_instance(k: int, grid: Network, max_n: int = 6):
    """The k-th seeded oracle instance: varied size, window and discount."""
    n = 2 + k % (max_n - 1)
    batch = (60.0, 180.0, 600.0)[k % 3]
    lam = (0.2, 0.3, 0.4, 0.45)[k % 4]
    requests = generate_demand(grid, DemandConfig(n, batch_length=batch, seed=1000 + k))
    skim = build_skim(grid, [r.origin for r in requests] + [r.destination for r in requests])
    return requests, skim, BehavioralParams(discount=lam)


@pytest.fixture(scope="session")
def grid5() -> Network:
    return generate_grid(5, 5, 300.0, 10.0)


@pytest.fixture(scope="session")
def grid10() -> Network:
    return generate_grid(10, 10, 300.0, 10.0)
