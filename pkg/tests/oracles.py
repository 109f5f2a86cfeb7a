"""Independent brute-force references used by solver tests.

These deliberately avoid the production flow machinery: the assignment
oracle reasons about scheduling-shaped networks combinatorially, and the
flow enumerator tries every integral arc-flow combination on tiny graphs.
"""

import itertools
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from flowsched.flow_network import K_M, K_R, K_U, K_X, build_skeleton
from flowsched.topology import build_topology


@dataclass
class SchedNet:
    """A randomly generated scheduling-shaped problem (slot-model capacities)."""

    machines: int
    racks: int
    per_rack: int
    cores: int
    tasks: List[dict] = field(default_factory=list)  # job, u_cost, x_cost, rack_costs, mach_costs

    def rack_of(self, m: int) -> int:
        return m // self.per_rack


def random_sched_net(rng: np.random.Generator) -> SchedNet:
    racks = int(rng.integers(1, 3))
    per_rack = int(rng.integers(1, 3))
    machines = int(rng.integers(1, racks * per_rack + 1))
    cores = int(rng.integers(1, 4))
    n_tasks = int(rng.integers(1, 7))
    net = SchedNet(machines, racks, per_rack, cores)
    for t in range(n_tasks):
        job = int(rng.integers(1, 3))
        task = {
            "job": job,
            "u_cost": int(rng.integers(500, 1500)),
            "x_cost": int(rng.integers(50, 300)) if rng.random() < 0.8 else None,
            "rack_costs": {},
            "mach_costs": {},
        }
        present_racks = {m // per_rack for m in range(machines)}
        for r in present_racks:
            if rng.random() < 0.4:
                task["rack_costs"][r] = int(rng.integers(50, 300))
        for m in range(machines):
            if rng.random() < 0.5:
                task["mach_costs"][m] = int(rng.integers(50, 300))
        net.tasks.append(task)
    return net


def build_flow_network(spec: SchedNet):
    """Realize a SchedNet as a production FlowNetwork (Table-style capacities)."""
    topo = build_topology(spec.machines, spec.per_rack, 16, spec.cores)
    net = build_skeleton(topo)
    for t, task in enumerate(spec.tasks):
        arcs = [(K_U, 0, task["u_cost"])]
        if task["x_cost"] is not None:
            arcs.append((K_X, 0, task["x_cost"]))
        for r, c in sorted(task["rack_costs"].items()):
            if r in net.rack_vid:
                arcs.append((K_R, r, c))
        for m, c in sorted(task["mach_costs"].items()):
            arcs.append((K_M, m, c))
        net.add_task((task["job"], t), task["job"], arcs)
    return topo, net


def assignment_oracle_min_cost(spec: SchedNet) -> int:
    """Exhaustive minimum cost over task -> machine-or-unscheduled assignments.

    Valid because slot-model capacities only bind at machines: any
    assignment with per-machine counts <= cores is realizable, and a task
    reaches machine m at the cheapest of its direct arc, its arc to m's
    rack, or its cluster arc.
    """
    options: List[List[Tuple[Optional[int], int]]] = []
    for task in spec.tasks:
        opts: List[Tuple[Optional[int], int]] = [(None, task["u_cost"])]
        for m in range(spec.machines):
            costs = []
            if m in task["mach_costs"]:
                costs.append(task["mach_costs"][m])
            r = spec.rack_of(m)
            if r in task["rack_costs"]:
                costs.append(task["rack_costs"][r])
            if task["x_cost"] is not None:
                costs.append(task["x_cost"])
            if costs:
                opts.append((m, min(costs)))
        options.append(opts)

    min_rest = [0] * (len(options) + 1)
    for i in range(len(options) - 1, -1, -1):
        min_rest[i] = min_rest[i + 1] + min(c for _, c in options[i])

    best = [None]
    loads = [0] * spec.machines

    def rec(i: int, total: int):
        if best[0] is not None and total + min_rest[i] >= best[0]:
            return
        if i == len(options):
            best[0] = total
            return
        for machine, cost in options[i]:
            if machine is None:
                rec(i + 1, total + cost)
            elif loads[machine] < spec.cores:
                loads[machine] += 1
                rec(i + 1, total + cost)
                loads[machine] -= 1

    rec(0, 0)
    assert best[0] is not None  # unscheduled arcs make every instance feasible
    return best[0]


def has_negative_cycle(num_v, u, v, cap, cost) -> bool:
    """Bellman-Ford over all capacitated arcs from a virtual root."""
    dist = [0] * num_v  # virtual root connects to everything at cost 0
    arcs = [(int(u[i]), int(v[i]), int(cost[i])) for i in range(len(u)) if cap[i] > 0]
    for _ in range(num_v):
        changed = False
        for a, b, c in arcs:
            if dist[a] + c < dist[b]:
                dist[b] = dist[a] + c
                changed = True
        if not changed:
            return False
    return True


def enumerate_flows_min_cost(num_v, u, v, cap, cost, supply) -> Optional[int]:
    """Try every integral flow on every arc; return the min cost feasible one."""
    m = len(u)
    # admissible lower bound on the cost the remaining arcs can still add
    suffix_neg = [0] * (m + 1)
    for i in range(m - 1, -1, -1):
        suffix_neg[i] = suffix_neg[i + 1] + min(0, int(cap[i]) * int(cost[i]))
    best = None

    def rec(i: int, balance: List[int], total: int):
        nonlocal best
        if best is not None and total + suffix_neg[i] >= best:
            return
        if i == m:
            if all(balance[x] == supply[x] for x in range(num_v)):
                best = total
            return
        for f in range(int(cap[i]) + 1):
            balance[u[i]] += f
            balance[v[i]] -= f
            rec(i + 1, balance, total + f * int(cost[i]))
            balance[u[i]] -= f
            balance[v[i]] += f

    rec(0, [0] * num_v, 0)
    return best
