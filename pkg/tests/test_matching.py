import csv
import math
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from scipy.optimize import Bounds, LinearConstraint, milp
from scipy.sparse import csr_matrix

import oracles
from ridepool.demand import DemandConfig, generate_demand
from ridepool.exmas import BehavioralParams, BudgetExceeded, enumerate_all
from ridepool.matching import (
    SOLUTION_HEADER,
    Column,
    MatchingProblem,
    brute_force_partition,
    solve_exact,
    solve_greedy,
    write_solution,
)
from ridepool.netgraph import build_skim


def problem(n, shared):
    """Travelers 1..n with solo rides 0..n-1 and shared rides numbered after."""
    cols = [Column(i - 1, (i,), 0.0) for i in range(1, n + 1)]
    cols += [Column(n + k, tuple(sorted(t)), g) for k, (t, g) in enumerate(shared)]
    return MatchingProblem(tuple(range(1, n + 1)), cols)


def milp_objective(prob):
    pos = {t: i for i, t in enumerate(prob.requests)}
    rows, cols = zip(*((pos[t], j) for j, c in enumerate(prob.columns) for t in c.travelers))
    a = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(pos), len(prob.columns)))
    g = np.array([c.gain for c in prob.columns])
    res = milp(-g, constraints=LinearConstraint(a, 1, 1), integrality=np.ones(len(g)), bounds=Bounds(0, 1))
    assert res.success
    return -res.fun


def assert_milp_optimal(prob, objective):
    # HiGHS stops within its own small optimality gap, so it may trail slightly
    reference = milp_objective(prob)
    assert objective >= reference - 1e-9
    assert objective == pytest.approx(reference, abs=1e-7)


def assert_partition(prob, sol):
    by_id = {c.id: c for c in prob.columns}
    covered = [t for rid in sol.selected for t in by_id[rid].travelers]
    assert sorted(covered) == list(prob.requests)
    assert sol.assignment == {t: rid for rid in sol.selected for t in by_id[rid].travelers}
    assert sol.objective == math.fsum(by_id[rid].gain for rid in sol.selected)


def test_no_shared_rides():
    prob = problem(4, [])
    for solve in (solve_exact, solve_greedy, brute_force_partition):
        sol = solve(prob)
        assert sol.objective == 0.0 and sol.selected == [0, 1, 2, 3]


def test_single_traveler():
    sol = brute_force_partition(problem(1, []))
    assert sol.selected == [0] and sol.assignment == {1: 0}


def test_triple_beats_pairs():
    prob = problem(3, [((1, 2), 0.5), ((2, 3), 0.6), ((1, 2, 3), 0.9)])
    for solve in (solve_exact, solve_greedy, brute_force_partition):
        sol = solve(prob)
        assert sol.selected == [5] and sol.objective == 0.9


def test_pairs_beat_triple():
    prob = problem(4, [((1, 2), 0.5), ((3, 4), 0.5), ((1, 2, 3), 0.7)])
    sol = solve_exact(prob)
    assert sol.selected == [4, 5] and sol.objective == 1.0
    assert brute_force_partition(prob).selected == [4, 5]


def test_greedy_trap():
    prob = problem(4, [((1, 2), 0.6), ((1, 3), 0.5), ((2, 4), 0.5)])
    assert solve_greedy(prob).objective == 0.6
    exact = solve_exact(prob)
    assert exact.objective == 1.0 and exact.selected == [5, 6]


def test_single_pair_greedy_equals_exact():
    prob = problem(2, [((1, 2), 0.3)])
    assert solve_greedy(prob).selected == solve_exact(prob).selected == [2]


def test_ties_prefer_fewer_rides_then_smaller_ids():
    # {1,2,3,4} as one ride or as two pairs: same gain, fewer rides wins
    prob = problem(4, [((1, 2), 0.5), ((3, 4), 0.5), ((1, 2, 3, 4), 1.0)])
    assert solve_exact(prob).selected == [6]
    # two equal pairings: the smaller id list wins
    prob = problem(4, [((1, 3), 0.5), ((2, 4), 0.5), ((1, 2), 0.5), ((3, 4), 0.5)])
    assert solve_exact(prob).selected == [4, 5]
    assert brute_force_partition(prob).selected == [4, 5]


def test_brute_force_limit():
    with pytest.raises(ValueError, match="limited to 10"):
        brute_force_partition(problem(11, []))
    assert brute_force_partition(problem(11, []), max_n=11).objective == 0.0


def test_problem_validation():
    with pytest.raises(ValueError, match="without a solo ride"):
        MatchingProblem((1, 2), [Column(0, (1,), 0.0)])
    with pytest.raises(ValueError, match="unknown travelers"):
        MatchingProblem((1,), [Column(0, (1,), 0.0), Column(1, (1, 5), 0.2)])


def test_expired_deadline():
    rng = np.random.default_rng(0)
    shared = [(tuple(rng.choice(np.arange(1, 61), size=rng.integers(2, 5), replace=False).tolist()),
               float(rng.uniform(0.1, 1))) for _ in range(3000)]
    with pytest.raises(BudgetExceeded):
        solve_exact(problem(60, shared), deadline=time.monotonic() - 1)


@st.composite
def random_problems(draw, max_n=9):
    n = draw(st.integers(1, max_n))
    ids = list(range(1, n + 1))
    shared = []
    if n >= 2:
        for _ in range(draw(st.integers(0, 25))):
            size = draw(st.integers(2, min(4, n)))
            members = draw(st.lists(st.sampled_from(ids), min_size=size, max_size=size, unique=True))
            # coarse gains make ties common
            shared.append((tuple(members), draw(st.integers(0, 12)) / 10))
    seen, unique = set(), []
    for t, g in shared:
        if tuple(sorted(t)) not in seen:
            seen.add(tuple(sorted(t)))
            unique.append((t, g))
    return problem(n, unique)


@settings(max_examples=300, deadline=None)
@given(random_problems())
def test_exact_matches_oracle(prob):
    obj, ids = oracles.best_partition(prob.requests, [(c.id, c.travelers, c.gain) for c in prob.columns])
    exact = solve_exact(prob)
    assert exact.objective == obj and exact.selected == ids
    assert brute_force_partition(prob).selected == ids
    assert_partition(prob, exact)


@settings(max_examples=200, deadline=None)
@given(random_problems())
def test_greedy_feasible_and_dominated(prob):
    greedy = solve_greedy(prob)
    assert_partition(prob, greedy)
    assert greedy.objective <= solve_exact(prob).objective


@settings(max_examples=20, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(20, 45), st.integers(0, 10**6), st.floats(0.0, 2.0))
def test_exact_matches_milp_on_random_columns(n, seed, spread):
    rng = np.random.default_rng(seed)
    shared = {}
    for _ in range(4 * n):
        members = tuple(sorted(rng.choice(np.arange(1, n + 1), size=rng.integers(2, 5), replace=False).tolist()))
        shared[members] = float(rng.uniform(0, 1) + spread * (len(members) - 2))
    prob = problem(n, list(shared.items()))
    sol = solve_exact(prob)
    assert_partition(prob, sol)
    assert_milp_optimal(prob, sol.objective)


@pytest.mark.parametrize("n,lam,seed", [(40, 0.3, 0), (80, 0.35, 1), (120, 0.25, 2), (150, 0.35, 3)])
def test_exact_matches_milp_on_enumerated_rides(grid10, n, lam, seed):
    reqs = generate_demand(grid10, DemandConfig(n, seed=seed))
    skim = build_skim(grid10, [r.origin for r in reqs] + [r.destination for r in reqs])
    rides = enumerate_all(reqs, skim, BehavioralParams(discount=lam), 4).rides
    prob = MatchingProblem.from_rides([r.id for r in reqs], rides)
    sol = solve_exact(prob)
    assert_partition(prob, sol)
    assert_milp_optimal(prob, sol.objective)
    assert solve_greedy(prob).objective <= sol.objective


def test_objective_grows_with_discount(grid10):
    reqs = generate_demand(grid10, DemandConfig(60, seed=7))
    skim = build_skim(grid10, [r.origin for r in reqs] + [r.destination for r in reqs])
    objectives = []
    for lam in (0.0, 0.1, 0.2, 0.3, 0.4):
        rides = enumerate_all(reqs, skim, BehavioralParams(discount=lam), 4).rides
        objectives.append(solve_exact(MatchingProblem.from_rides([r.id for r in reqs], rides)).objective)
    assert objectives == sorted(objectives) and objectives[-1] > 0


def test_from_rides_keeps_best_order(grid10):
    reqs = generate_demand(grid10, DemandConfig(30, batch_length=120, seed=3))
    skim = build_skim(grid10, [r.origin for r in reqs] + [r.destination for r in reqs])
    rides = enumerate_all(reqs, skim, BehavioralParams(discount=0.4), 3).rides
    prob = MatchingProblem.from_rides([r.id for r in reqs], rides)
    best = {}
    for r in rides:
        best[r.travelers] = max(best.get(r.travelers, -math.inf), r.total_gain)
    assert {c.travelers: c.gain for c in prob.columns} == best


def test_write_solution(tmp_path, grid10):
    reqs = generate_demand(grid10, DemandConfig(20, batch_length=60, seed=5))
    skim = build_skim(grid10, [r.origin for r in reqs] + [r.destination for r in reqs])
    rides = enumerate_all(reqs, skim, BehavioralParams(discount=0.4), 4).rides
    sol = solve_exact(MatchingProblem.from_rides([r.id for r in reqs], rides))
    path = tmp_path / "solution.csv"
    write_solution(sol, {r.id: r for r in rides}, path)
    lines = path.read_text().splitlines()
    assert lines[-1] == f"# objective={sol.objective!r}"
    rows = list(csv.reader(lines[:-1]))
    assert rows[0] == SOLUTION_HEADER and len(rows) == 21
    assert [int(r[0]) for r in rows[1:]] == sorted(r.id for r in reqs)
    assert math.fsum(float(r[3]) for r in rows[1:]) == pytest.approx(sol.objective, abs=1e-12)
