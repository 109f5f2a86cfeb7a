"""Integer min-cost max-flow solver and placement extraction.

The solver is a primal-dual variant of successive shortest augmenting paths:
each phase runs Dijkstra with vertex potentials (reduced costs stay
non-negative), then saturates the zero-reduced-cost subgraph with a blocking
flow, so all units at one path-cost level augment together. This matters
because a scheduling round can carry thousands of task supplies but only a
few dozen distinct path costs.

The inner kernel is array-based and JIT-compiled with numba when available;
the same function runs as plain Python otherwise, with identical integer
semantics. Tie-breaking follows arc insertion order, so results are a
deterministic function of the assembled network.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Optional, Tuple

import numpy as np

from .flow_network import ArcArrays, FlowNetwork, VertexKind

log = logging.getLogger(__name__)

INF = np.int64(2**62)


def _pd_kernel(nv, src, snk, r_to, r_cost, r_res, adj_arc, adj_start, total, init_bf):
    """Primal-dual min-cost max-flow over paired residual arcs.

    Residual arcs come in adjacent pairs (forward 2i, backward 2i+1).
    Returns (potentials, phases, augmentations, ops, routed).
    """
    big = np.int64(2**62)
    pot = np.zeros(nv, np.int64)
    dist = np.empty(nv, np.int64)
    done = np.empty(nv, np.uint8)
    level = np.empty(nv, np.int64)
    arc_it = np.empty(nv, np.int64)
    bfs_q = np.empty(nv, np.int64)
    hcap = r_to.shape[0] + 4
    hd = np.empty(hcap, np.int64)
    hv = np.empty(hcap, np.int64)
    path_arc = np.empty(nv + 2, np.int64)
    path_v = np.empty(nv + 2, np.int64)

    ops = 0
    phases = 0
    augs = 0
    routed = 0

    if init_bf:
        # prime potentials with Bellman-Ford so negative input costs are legal
        dist[:] = big
        dist[src] = 0
        changed = True
        rounds_left = nv + 1
        while changed and rounds_left > 0:
            rounds_left -= 1
            changed = False
            for v in range(nv):
                dv = dist[v]
                if dv >= big:
                    continue
                for k in range(adj_start[v], adj_start[v + 1]):
                    e = adj_arc[k]
                    ops += 1
                    if r_res[e] > 0:
                        w = r_to[e]
                        nd = dv + r_cost[e]
                        if nd < dist[w]:
                            dist[w] = nd
                            changed = True
        if changed:
            # still relaxing after |V| rounds: a negative cycle is reachable
            return pot, -1, 0, ops, -1
        for v in range(nv):
            if dist[v] < big:
                pot[v] = dist[v]

    while routed < total:
        # Dijkstra on reduced costs, stopping once the sink is finalised
        dist[:] = big
        done[:] = 0
        dist[src] = 0
        hd[0] = 0
        hv[0] = src
        hn = 1
        dsink = big
        while hn > 0:
            d0 = hd[0]
            v0 = hv[0]
            hn -= 1
            hd[0] = hd[hn]
            hv[0] = hv[hn]
            i = 0
            while True:
                l = 2 * i + 1
                r = 2 * i + 2
                m = i
                if l < hn and hd[l] < hd[m]:
                    m = l
                if r < hn and hd[r] < hd[m]:
                    m = r
                if m == i:
                    break
                td = hd[i]
                hd[i] = hd[m]
                hd[m] = td
                tv = hv[i]
                hv[i] = hv[m]
                hv[m] = tv
                i = m
            if done[v0] == 1:
                continue
            done[v0] = 1
            ops += 1
            if v0 == snk:
                dsink = d0
                break
            pv0 = pot[v0]
            for k in range(adj_start[v0], adj_start[v0 + 1]):
                e = adj_arc[k]
                ops += 1
                if r_res[e] <= 0:
                    continue
                w = r_to[e]
                if done[w] == 1:
                    continue
                nd = d0 + r_cost[e] + pv0 - pot[w]
                if nd < dist[w]:
                    dist[w] = nd
                    j = hn
                    hd[j] = nd
                    hv[j] = w
                    hn += 1
                    while j > 0:
                        p = (j - 1) >> 1
                        if hd[p] <= hd[j]:
                            break
                        td = hd[p]
                        hd[p] = hd[j]
                        hd[j] = td
                        tv = hv[p]
                        hv[p] = hv[j]
                        hv[j] = tv
                        j = p
        if dsink >= big:
            break  # sink unreachable: no further augmenting paths
        for v in range(nv):
            dv = dist[v]
            if dv < dsink:
                pot[v] += dv
            else:
                pot[v] += dsink
        phases += 1

        # blocking flow over admissible (zero reduced cost) residual arcs
        while True:
            level[:] = -1
            level[src] = 0
            bfs_q[0] = src
            qh = 0
            qt = 1
            while qh < qt:
                v0 = bfs_q[qh]
                qh += 1
                pv0 = pot[v0]
                for k in range(adj_start[v0], adj_start[v0 + 1]):
                    e = adj_arc[k]
                    ops += 1
                    if r_res[e] <= 0:
                        continue
                    w = r_to[e]
                    if level[w] >= 0:
                        continue
                    if r_cost[e] + pv0 - pot[w] != 0:
                        continue
                    level[w] = level[v0] + 1
                    bfs_q[qt] = w
                    qt += 1
            if level[snk] < 0:
                break
            for v in range(nv):
                arc_it[v] = adj_start[v]
            v0 = src
            plen = 0
            path_v[0] = src
            exhausted = False
            while not exhausted:
                if v0 == snk:
                    b = big
                    for q in range(plen):
                        e = path_arc[q]
                        if r_res[e] < b:
                            b = r_res[e]
                    for q in range(plen):
                        e = path_arc[q]
                        r_res[e] -= b
                        r_res[e ^ 1] += b
                    routed += b
                    augs += 1
                    v0 = src
                    plen = 0
                    continue
                advanced = False
                k = arc_it[v0]
                stop = adj_start[v0 + 1]
                while k < stop:
                    e = adj_arc[k]
                    ops += 1
                    if r_res[e] > 0:
                        w = r_to[e]
                        if level[w] == level[v0] + 1 and r_cost[e] + pot[v0] - pot[w] == 0:
                            arc_it[v0] = k
                            path_arc[plen] = e
                            plen += 1
                            path_v[plen] = w
                            v0 = w
                            advanced = True
                            break
                    k += 1
                if advanced:
                    continue
                arc_it[v0] = stop
                level[v0] = -2  # dead end for this blocking flow
                if v0 == src:
                    exhausted = True
                else:
                    plen -= 1
                    v0 = path_v[plen]
    return pot, phases, augs, ops, routed


try:  # pragma: no cover - exercised implicitly
    from numba import njit

    _pd_kernel_jit = njit(cache=True)(_pd_kernel)
except ImportError:  # pragma: no cover
    _pd_kernel_jit = None


@dataclass
class SolverStats:
    phases: int
    augmentations: int
    ops: int
    wall_ms: float


@dataclass
class FlowSolution:
    arc_flow: np.ndarray  # aligned with the assembled arc arrays
    total_cost: int
    potentials: np.ndarray  # per original vertex id
    stats: SolverStats
    assembly: ArcArrays


def solve_arrays(
    num_v: int,
    u: np.ndarray,
    v: np.ndarray,
    cap: np.ndarray,
    cost: np.ndarray,
    supply: np.ndarray,
    use_jit: bool = True,
):
    """Solve min-cost max-flow for explicit arc arrays and vertex supplies.

    Returns (flow per input arc, potentials, stats). Raises RuntimeError when
    the full supply cannot be routed (infeasible network).
    """
    u = np.asarray(u, dtype=np.int64)
    v = np.asarray(v, dtype=np.int64)
    cap = np.asarray(cap, dtype=np.int64)
    cost = np.asarray(cost, dtype=np.int64)
    supply = np.asarray(supply, dtype=np.int64)
    if supply.sum() != 0:
        raise ValueError("supplies must balance to zero")
    m_real = len(u)
    pos = np.nonzero(supply > 0)[0]
    neg = np.nonzero(supply < 0)[0]
    total = int(supply[pos].sum())
    src = num_v
    snk = num_v + 1

    tails = np.concatenate([u, np.full(len(pos), src, dtype=np.int64), neg])
    heads = np.concatenate([v, pos, np.full(len(neg), snk, dtype=np.int64)])
    caps = np.concatenate([cap, supply[pos], -supply[neg]])
    costs = np.concatenate([cost, np.zeros(len(pos) + len(neg), dtype=np.int64)])

    m_all = len(tails)
    r_to = np.empty(2 * m_all, dtype=np.int64)
    r_to[0::2] = heads
    r_to[1::2] = tails
    r_cost = np.empty(2 * m_all, dtype=np.int64)
    r_cost[0::2] = costs
    r_cost[1::2] = -costs
    r_res = np.empty(2 * m_all, dtype=np.int64)
    r_res[0::2] = caps
    r_res[1::2] = 0
    r_tail = np.empty(2 * m_all, dtype=np.int64)
    r_tail[0::2] = tails
    r_tail[1::2] = heads

    nv = num_v + 2
    order = np.argsort(r_tail, kind="stable").astype(np.int64)
    counts = np.bincount(r_tail, minlength=nv)
    adj_start = np.zeros(nv + 1, dtype=np.int64)
    np.cumsum(counts, out=adj_start[1:])

    init_bf = bool((cost < 0).any())
    kernel = _pd_kernel_jit if (use_jit and _pd_kernel_jit is not None) else _pd_kernel
    t0 = time.perf_counter()
    pot, phases, augs, ops, routed = kernel(
        nv, src, snk, r_to, r_cost, r_res, order, adj_start, total, init_bf
    )
    wall_ms = (time.perf_counter() - t0) * 1000.0
    if routed < 0:
        raise ValueError("graph has a reachable negative-cost cycle")
    if routed != total:
        raise RuntimeError(
            f"infeasible flow network: routed {routed} of {total} supply units"
        )
    flow = caps[:m_real] - r_res[0 : 2 * m_real : 2]
    stats = SolverStats(int(phases), int(augs), int(ops), wall_ms)
    return flow, pot[:num_v], stats


def solve(
    net: FlowNetwork,
    shuffle_rng: Optional[np.random.Generator] = None,
    use_jit: bool = True,
) -> FlowSolution:
    """Compute an optimal flow over the network's current state."""
    arr = net.assemble(shuffle_rng)
    flow, pot, stats = solve_arrays(
        arr.num_vertices, arr.u, arr.v, arr.cap, arr.cost, arr.supply, use_jit=use_jit
    )
    total_cost = int((flow * arr.cost).sum())
    return FlowSolution(flow, total_cost, pot, stats, arr)


@dataclass
class SchedulingDelta:
    """Per-round outcome extracted from an optimal flow."""

    placed: Dict[Hashable, int] = field(default_factory=dict)  # task -> machine now
    unplaced: List[Hashable] = field(default_factory=list)
    new_placements: Dict[Hashable, int] = field(default_factory=dict)
    migrations: List[Tuple[Hashable, int, int]] = field(default_factory=list)
    preemptions: List[Tuple[Hashable, int]] = field(default_factory=list)

    def is_empty(self) -> bool:
        return not (self.new_placements or self.migrations or self.preemptions)


def extract_placements(
    net: FlowNetwork,
    sol: FlowSolution,
    previous: Optional[Dict[Hashable, int]] = None,
) -> SchedulingDelta:
    """Decode per-task outcomes from the flow and diff against previous state.

    A task's unit either reaches the sink through a machine vertex (placed
    there) or through its unscheduled aggregator (not placed). Units that
    enter an aggregator are resolved by walking a path decomposition of the
    remaining flow; when several decompositions exist the walk prefers the
    task's previous machine, so unchanged assignments are not misreported as
    migrations.
    """
    previous = previous or {}
    arr = sol.assembly
    flow = sol.arc_flow.copy()

    # adjacency over non-task arcs for the decomposition walk, in arc order;
    # direct task->machine and task->U units are resolved without walking
    out_arcs: Dict[int, List[int]] = {}
    drain_arc: Dict[int, int] = {}  # machine/U vid -> its arc to the sink
    for i in range(arr.n_nontask):
        tail = int(arr.u[i])
        out_arcs.setdefault(tail, []).append(i)
        tail_kind = net.vertices[tail].kind
        if tail_kind in (VertexKind.MACHINE, VertexKind.UNSCHEDULED):
            drain_arc[tail] = i

    delta = SchedulingDelta()
    for task in sorted(net.task_vid):
        start, count = arr.task_arc_start[task]
        chosen = -1
        for i in range(start, start + count):
            if flow[i] > 0:
                chosen = i
                break
        if chosen < 0:
            raise RuntimeError(f"task {task!r} supply not routed")
        flow[chosen] -= 1
        prev_machine = previous.get(task)
        target = int(arr.v[chosen])
        target_kind = net.vertices[target].kind
        if target_kind is VertexKind.MACHINE:
            machine = net.vertices[target].ref
            flow[drain_arc[target]] -= 1
        elif target_kind is VertexKind.UNSCHEDULED:
            machine = None
            flow[drain_arc[target]] -= 1
        else:
            machine = _walk_to_sink(net, arr, flow, out_arcs, target, prev_machine)
            if machine is None:
                raise RuntimeError(f"task {task!r} routed through neither machine nor U")
        if machine is not None:
            delta.placed[task] = machine
            if prev_machine is None:
                delta.new_placements[task] = machine
            elif prev_machine != machine:
                delta.migrations.append((task, prev_machine, machine))
        else:
            delta.unplaced.append(task)
            if prev_machine is not None:
                delta.preemptions.append((task, prev_machine))
    return delta


def _walk_to_sink(net, arr, flow, out_arcs, vid, prev_machine):
    """Follow one unit of decomposable flow from vid to the sink.

    Returns the machine id traversed, or None if the unit drains through an
    unscheduled aggregator.
    """
    machine = None
    prev_rack = None
    if prev_machine is not None and prev_machine in net.topo.machines:
        prev_rack = net.topo.rack_of(prev_machine)
    while True:
        vert = net.vertices[vid]
        if vert.kind is VertexKind.SINK:
            return machine
        if vert.kind is VertexKind.MACHINE:
            machine = vert.ref
        candidates = out_arcs.get(vid, ())
        chosen = -1
        preferred_ref = None
        if vert.kind is VertexKind.CLUSTER_AGG:
            preferred_ref = prev_rack
        elif vert.kind is VertexKind.RACK_AGG:
            preferred_ref = prev_machine
        if preferred_ref is not None:
            for i in candidates:
                if flow[i] > 0 and net.vertices[int(arr.v[i])].ref == preferred_ref:
                    chosen = i
                    break
        if chosen < 0:
            for i in candidates:
                if flow[i] > 0:
                    chosen = i
                    break
        if chosen < 0:
            raise RuntimeError(
                f"flow decomposition stuck at vertex {vid} ({vert.kind.value})"
            )
        flow[chosen] -= 1
        vid = int(arr.v[chosen])


def parse_dimacs(text: str):
    """Parse a DIMACS min-cost-flow problem into solver inputs.

    Returns (num_vertices, u, v, cap, cost, supply); node ids are converted
    to 0-based. Only zero lower bounds are supported.
    """
    num_v = None
    us: List[int] = []
    vs: List[int] = []
    caps: List[int] = []
    costs: List[int] = []
    supplies: Dict[int, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("c"):
            continue
        parts = line.split()
        if parts[0] == "p":
            if len(parts) != 4 or parts[1] != "min":
                raise ValueError(f"line {lineno}: expected 'p min <nodes> <arcs>'")
            num_v = int(parts[2])
        elif parts[0] == "n":
            supplies[int(parts[1]) - 1] = int(parts[2])
        elif parts[0] == "a":
            if len(parts) != 6:
                raise ValueError(f"line {lineno}: expected 'a <u> <v> <low> <cap> <cost>'")
            if int(parts[3]) != 0:
                raise ValueError(f"line {lineno}: nonzero lower bounds unsupported")
            us.append(int(parts[1]) - 1)
            vs.append(int(parts[2]) - 1)
            caps.append(int(parts[4]))
            costs.append(int(parts[5]))
        else:
            raise ValueError(f"line {lineno}: unknown record {parts[0]!r}")
    if num_v is None:
        raise ValueError("missing problem line")
    supply = np.zeros(num_v, dtype=np.int64)
    for node, s in supplies.items():
        supply[node] = s
    return (
        num_v,
        np.array(us, dtype=np.int64),
        np.array(vs, dtype=np.int64),
        np.array(caps, dtype=np.int64),
        np.array(costs, dtype=np.int64),
        supply,
    )
