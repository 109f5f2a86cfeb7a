import numpy as np
import pytest

from flowsched import mcmf
from flowsched.flow_network import K_M, K_R, K_U, K_X, build_skeleton
from flowsched.topology import build_topology

from oracles import (
    assignment_oracle_min_cost,
    build_flow_network,
    enumerate_flows_min_cost,
    has_negative_cycle,
    random_sched_net,
)


def test_single_task_two_paths():
    topo = build_topology(1, 48, 16, 1)
    net = build_skeleton(topo)
    net.add_task((1, 0), 1, [(K_U, 0, 1001), (K_X, 0, 100)])
    sol = mcmf.solve(net)
    assert sol.total_cost == 100
    delta = mcmf.extract_placements(net, sol, {})
    assert delta.placed == {(1, 0): 0}


def test_two_tasks_one_slot():
    topo = build_topology(1, 48, 16, 1)
    net = build_skeleton(topo)
    net.add_task((1, 0), 1, [(K_U, 0, 1001), (K_X, 0, 100)])
    net.add_task((1, 1), 1, [(K_U, 0, 1001), (K_X, 0, 100)])
    sol = mcmf.solve(net)
    assert sol.total_cost == 100 + 1001
    delta = mcmf.extract_placements(net, sol, {})
    assert len(delta.placed) == 1 and len(delta.unplaced) == 1


def test_oracle_equivalence_on_random_scheduling_networks():
    rng = np.random.default_rng(1234)
    for i in range(120):
        spec = random_sched_net(rng)
        _, net = build_flow_network(spec)
        sol = mcmf.solve(net)
        expect = assignment_oracle_min_cost(spec)
        assert sol.total_cost == expect, f"net {i}: {sol.total_cost} != {expect}"


def test_oracle_equivalence_general_tiny_graphs():
    rng = np.random.default_rng(77)
    for i in range(60):
        num_v = int(rng.integers(3, 8))
        m = int(rng.integers(2, 9))
        u = rng.integers(0, num_v, m).astype(np.int64)
        v = rng.integers(0, num_v, m).astype(np.int64)
        keep = u != v
        u, v = u[keep], v[keep]
        m = len(u)
        if m == 0:
            continue
        cap = rng.integers(0, 3, m).astype(np.int64)
        cost = rng.integers(-3, 8, m).astype(np.int64)
        if has_negative_cycle(num_v, u, v, cap, cost):
            continue  # out of the solver's contract (circulations change the optimum)
        supply = np.zeros(num_v, dtype=np.int64)
        # one unit from vertex 0 to vertex num_v-1 when connected
        supply[0], supply[num_v - 1] = 1, -1
        expect = enumerate_flows_min_cost(num_v, u, v, cap, cost, supply)
        if expect is None:
            with pytest.raises(RuntimeError, match="infeasible"):
                mcmf.solve_arrays(num_v, u, v, cap, cost, supply)
        else:
            flow, pot, stats = mcmf.solve_arrays(num_v, u, v, cap, cost, supply)
            assert int((flow * cost).sum()) == expect, f"graph {i}"


def test_jit_and_python_kernels_agree():
    rng = np.random.default_rng(5)
    for _ in range(25):
        spec = random_sched_net(rng)
        _, net = build_flow_network(spec)
        arr = net.assemble()
        f1, p1, _ = mcmf.solve_arrays(
            arr.num_vertices, arr.u, arr.v, arr.cap, arr.cost, arr.supply, use_jit=True
        )
        f2, p2, _ = mcmf.solve_arrays(
            arr.num_vertices, arr.u, arr.v, arr.cap, arr.cost, arr.supply, use_jit=False
        )
        assert np.array_equal(f1, f2)
        assert np.array_equal(p1, p2)


def test_deterministic_given_identical_input():
    rng = np.random.default_rng(9)
    spec = random_sched_net(rng)
    _, net = build_flow_network(spec)
    s1 = mcmf.solve(net)
    s2 = mcmf.solve(net)
    assert np.array_equal(s1.arc_flow, s2.arc_flow)
    assert s1.total_cost == s2.total_cost


def test_complementary_slackness():
    rng = np.random.default_rng(31)
    for _ in range(40):
        spec = random_sched_net(rng)
        _, net = build_flow_network(spec)
        sol = mcmf.solve(net)
        arr = sol.assembly
        rc = arr.cost + sol.potentials[arr.u] - sol.potentials[arr.v]
        assert (rc[sol.arc_flow > 0] <= 0).all()
        assert (rc[sol.arc_flow < arr.cap] >= 0).all()


def test_flow_feasibility_invariants():
    rng = np.random.default_rng(13)
    for _ in range(30):
        spec = random_sched_net(rng)
        _, net = build_flow_network(spec)
        sol = mcmf.solve(net)
        arr = sol.assembly
        assert (sol.arc_flow >= 0).all()
        assert (sol.arc_flow <= arr.cap).all()
        balance = np.zeros(arr.num_vertices, dtype=np.int64)
        np.add.at(balance, arr.u, sol.arc_flow)
        np.add.at(balance, arr.v, -sol.arc_flow)
        assert np.array_equal(balance, arr.supply)


def test_extraction_covers_all_tasks_once():
    rng = np.random.default_rng(21)
    for _ in range(25):
        spec = random_sched_net(rng)
        topo, net = build_flow_network(spec)
        sol = mcmf.solve(net)
        delta = mcmf.extract_placements(net, sol, {})
        keys = set(delta.placed) | set(delta.unplaced)
        assert keys == set(net.task_vid)
        loads = {}
        for task, m in delta.placed.items():
            loads[m] = loads.get(m, 0) + 1
        for m, n in loads.items():
            assert n <= spec.cores


def test_extraction_prefers_previous_machine_on_aggregated_routes():
    # two identical machines reachable only via the cluster aggregator; an
    # arbitrary decomposition could swap them, the walk must not
    topo = build_topology(2, 2, 16, 1)
    net = build_skeleton(topo)
    net.add_task((1, 0), 1, [(K_U, 0, 1001), (K_X, 0, 100)])
    net.add_task((1, 1), 1, [(K_U, 0, 1001), (K_X, 0, 100)])
    sol = mcmf.solve(net)
    prev = {(1, 0): 1, (1, 1): 0}  # both already placed, swapped order
    delta = mcmf.extract_placements(net, sol, prev)
    assert delta.placed == prev
    assert delta.migrations == []


def test_migration_and_preemption_records():
    topo = build_topology(2, 2, 16, 1)
    net = build_skeleton(topo)
    net.add_task((1, 0), 1, [(K_U, 0, 1001), (K_M, 1, 50)])
    sol = mcmf.solve(net)
    delta = mcmf.extract_placements(net, sol, {(1, 0): 0})
    assert delta.migrations == [((1, 0), 0, 1)]
    # force the unit through U: only arc
    net.update_arcs((1, 0), [(K_U, 0, 10)])
    sol = mcmf.solve(net)
    delta = mcmf.extract_placements(net, sol, {(1, 0): 0})
    assert delta.preemptions == [((1, 0), 0)]
    assert delta.unplaced == [(1, 0)]


def test_dimacs_roundtrip_and_solve():
    rng = np.random.default_rng(3)
    spec = random_sched_net(rng)
    _, net = build_flow_network(spec)
    text = net.to_dimacs()
    nv, u, v, cap, cost, sup = mcmf.parse_dimacs(text)
    flow, pot, stats = mcmf.solve_arrays(nv, u, v, cap, cost, sup)
    assert int((flow * cost).sum()) == mcmf.solve(net).total_cost


def test_parse_dimacs_errors():
    with pytest.raises(ValueError, match="problem line"):
        mcmf.parse_dimacs("a 1 2 0 1 5\n")
    with pytest.raises(ValueError, match="lower bounds"):
        mcmf.parse_dimacs("p min 2 1\nn 1 1\nn 2 -1\na 1 2 1 2 5\n")


def test_reachable_negative_cycle_rejected():
    # 0 -> 1 -> 0 with total cost -2, reachable from the supply at 0
    u = np.array([0, 1, 0], dtype=np.int64)
    v = np.array([1, 0, 2], dtype=np.int64)
    cap = np.array([1, 1, 1], dtype=np.int64)
    cost = np.array([-3, 1, 0], dtype=np.int64)
    supply = np.array([1, 0, -1], dtype=np.int64)
    with pytest.raises(ValueError, match="negative-cost cycle"):
        mcmf.solve_arrays(3, u, v, cap, cost, supply)


def test_unbalanced_supply_rejected():
    with pytest.raises(ValueError, match="balance"):
        mcmf.solve_arrays(
            2,
            np.array([0]),
            np.array([1]),
            np.array([1]),
            np.array([0]),
            np.array([1, 0]),
        )
