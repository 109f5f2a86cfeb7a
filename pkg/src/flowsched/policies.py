"""Placement policies expressed as per-task arc lists over the flow network.

The latency-aware policy ("nomora") schedules each job's root task first on
any available machine, then gives the remaining tasks preference arcs toward
machines and racks whose predicted-performance cost clears the thresholds
p_m / p_r, always relative to the root task's machine. Costs derive from the
job's discretised performance table queried with the conservative trailing
maximum of the pair's measured latency.

Baselines: a random policy (fixed-cost arc to the cluster aggregator, ties
broken by the per-round arc shuffle) and a load-spreading policy (machine
arc cost grows with the machine's current task count).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np

from .flow_network import ArcSpec, FlowNetwork, K_M, K_R, K_U, K_X, VertexKind
from .latency import LatencyProvider
from .perf_model import DiscretizedTable, max_placement_cost, perf_to_cost_vec
from .topology import ClusterTopology, TopologyArrays

log = logging.getLogger(__name__)

RANDOM_X_COST = 10  # fixed placement cost used by the random baseline

TaskKey = Tuple[int, int]  # (job id, task index)


@dataclass
class NoMoraParams:
    p_m: int = 105  # cost threshold for direct machine preference arcs
    p_r: int = 110  # cost threshold for rack preference arcs
    omega: int = 10  # unscheduled cost units per second of wait
    gamma: int = 1001  # unscheduled base cost, above any placement cost
    preemption: bool = False
    beta_enabled: bool = True  # subtract executed seconds from the keep-arc
    window_s: int = 60  # trailing max-latency window

    def __post_init__(self):
        if self.omega <= 0 or self.gamma <= 0:
            raise ValueError("omega and gamma must be > 0")
        if self.p_m > self.p_r:
            log.warning("p_m=%d exceeds p_r=%d; machine lists will dominate", self.p_m, self.p_r)
        if self.beta_enabled and not self.preemption:
            # beta only matters when running tasks can be re-routed
            pass

    def validate_against_models(self, tables: Dict[str, DiscretizedTable]) -> None:
        worst = max_placement_cost([t.model for t in tables.values()])
        if self.gamma <= worst:
            raise ValueError(
                f"gamma={self.gamma} must exceed the largest achievable "
                f"placement cost {worst} or tasks may starve"
            )


@dataclass
class TaskState:
    job_id: int
    index: int
    submit_time: float
    runtime_us: int
    model: str
    machine: Optional[int] = None
    alpha_accum: float = 0.0  # seconds spent unplaced so far
    unplaced_since: Optional[float] = None
    run_since: Optional[float] = None
    run_epoch: int = 0  # bumped on every (re)start; stale end events are dropped
    first_placed_at: Optional[float] = None
    first_placed_round: Optional[int] = None
    completed_at: Optional[float] = None
    preempt_count: int = 0
    migrate_count: int = 0

    @property
    def is_root(self) -> bool:
        return self.index == 0

    @property
    def key(self) -> TaskKey:
        return (self.job_id, self.index)

    def alpha(self, now: float) -> float:
        waited = self.alpha_accum
        if self.unplaced_since is not None:
            waited += now - self.unplaced_since
        return waited

    def beta_seconds(self, now: float) -> float:
        if self.run_since is None:
            return 0.0
        return now - self.run_since


@dataclass
class RoundContext:
    """Per-round snapshot shared by cost computations."""

    topo: ClusterTopology
    arrays: TopologyArrays
    net: FlowNetwork
    provider: LatencyProvider
    tables: Dict[str, DiscretizedTable]
    params: NoMoraParams
    now: float
    tasks: Dict[TaskKey, TaskState]
    audit: bool = False
    rng: Optional[np.random.Generator] = None
    alpha_quantum: float = 1.0  # queue age advances at scheduler resolution
    free: np.ndarray = field(init=False)
    counts: np.ndarray = field(init=False)
    mvids: np.ndarray = field(init=False)
    provider_rows: np.ndarray = field(init=False)
    _id_to_idx: Dict[int, int] = field(init=False)
    _rack_sort: np.ndarray = field(init=False)
    _rack_starts: np.ndarray = field(init=False)
    rack_ids_sorted: np.ndarray = field(init=False)
    rvids: np.ndarray = field(init=False)
    rack_free: np.ndarray = field(init=False)
    _job_cost_cache: Dict[int, tuple] = field(default_factory=dict)

    def __post_init__(self):
        ids = self.arrays.ids
        self.counts = np.array([self.topo.task_count(int(m)) for m in ids], dtype=np.int64)
        self.free = self.arrays.cores - self.counts
        self.mvids = np.array([self.net.machine_vid[int(m)] for m in ids], dtype=np.int64)
        self.provider_rows = self.provider.rows_for(ids)
        self._id_to_idx = {int(m): i for i, m in enumerate(ids)}
        racks = self.arrays.racks
        order = np.argsort(racks, kind="stable")
        self._rack_sort = order
        sorted_racks = racks[order]
        starts = np.nonzero(np.r_[True, sorted_racks[1:] != sorted_racks[:-1]])[0]
        self._rack_starts = starts
        self.rack_ids_sorted = sorted_racks[starts]
        self.rvids = np.array(
            [self.net.rack_vid[int(r)] for r in self.rack_ids_sorted], dtype=np.int64
        )
        self.rack_free = np.add.reduceat(self.free[order], starts)

    def rack_max(self, values: np.ndarray) -> np.ndarray:
        """Per-rack maximum of a per-machine vector (rack order = rack_ids_sorted)."""
        return np.maximum.reduceat(values[self._rack_sort], self._rack_starts)

    def unsched_cost(self, task: TaskState) -> int:
        quantum = max(self.alpha_quantum, 1e-9)
        alpha = math.floor(task.alpha(self.now) / quantum) * quantum
        return int(self.params.gamma + round(self.params.omega * alpha))

    def machine_index(self, machine_id: int) -> int:
        try:
            return self._id_to_idx[machine_id]
        except KeyError:
            raise KeyError(f"machine {machine_id} not in topology") from None


class _JobCosts:
    """One job's per-round cost vectors plus prebuilt preference arc arrays.

    Waiting workers of a job share identical arcs except the unscheduled
    cost, so the template arrays are built once and shared (the vid array is
    never mutated downstream; cost arrays are copied per task).
    """

    __slots__ = ("d", "c", "b", "tmpl_vids", "tmpl_costs", "mach_idx")

    def __init__(self, ctx: "RoundContext", model: str, root_machine: int, u_vid: int):
        p = ctx.params
        table = ctx.tables[model]
        lat = ctx.provider.max_latency_row(
            root_machine, ctx.arrays.ids, ctx.now, p.window_s, rows=ctx.provider_rows
        )
        self.d = perf_to_cost_vec(table.lookup_vec(lat))
        self.c = ctx.rack_max(self.d)
        self.b = int(self.c.max())
        if ctx.audit:
            per_machine_c = self.c[np.searchsorted(ctx.rack_ids_sorted, ctx.arrays.racks)]
            assert (per_machine_c >= self.d).all()
            assert self.b >= int(self.c.max())
        rack_ok = np.nonzero((self.c <= p.p_r) & (ctx.rack_free > 0))[0]
        mach_ok = np.nonzero((self.d <= p.p_m) & (ctx.free > 0))[0]
        self.mach_idx = mach_ok
        self.tmpl_vids = np.concatenate(
            [
                np.array([u_vid, ctx.net.x_vid], dtype=np.int64),
                ctx.rvids[rack_ok],
                ctx.mvids[mach_ok],
            ]
        )
        self.tmpl_costs = np.concatenate(
            [
                np.array([0, self.b], dtype=np.int64),
                self.c[rack_ok],
                self.d[mach_ok],
            ]
        )


def _nomora_job_costs(ctx: RoundContext, job_id: int, model: str, root_machine: int) -> _JobCosts:
    cached = ctx._job_cost_cache.get(job_id)
    if cached is None:
        cached = _JobCosts(ctx, model, root_machine, ctx.net._u_vid(job_id))
        ctx._job_cost_cache[job_id] = cached
    return cached


def _nomora_resolved(task: TaskState, ctx: RoundContext):
    """(target vid array, cost array) for one task under the latency policy.

    Unplaced root: a zero-cost arc to the cluster aggregator plus the
    mandatory unscheduled arc. Workers wait (unscheduled arc only) until the
    root is placed, then get preference arcs to machines under p_m and racks
    under p_r, the cluster arc at the worst-rack cost, and the unscheduled
    arc at omega*wait + gamma. A placed root keeps only its own machine (plus
    the mandatory unscheduled arc when preemption keeps it unpinned).
    """
    p = ctx.params
    net = ctx.net
    a_cost = ctx.unsched_cost(task)
    u_vid = net._u_vid(task.job_id)
    if task.is_root:
        if task.machine is None:
            target = net.x_vid
        else:
            # placed roots never move: workers' costs are anchored to them
            target = net.machine_vid[task.machine]
        return (
            np.array([u_vid, target], dtype=np.int64),
            np.array([a_cost, 0], dtype=np.int64),
        )

    root = ctx.tasks.get((task.job_id, 0))
    root_machine = root.machine if root is not None else None
    if root_machine is None:
        return np.array([u_vid], dtype=np.int64), np.array([a_cost], dtype=np.int64)

    jc = _nomora_job_costs(ctx, task.job_id, task.model, root_machine)
    if task.machine is None:
        costs = jc.tmpl_costs.copy()
        costs[0] = a_cost
        return jc.tmpl_vids, costs

    # running task: the keep-arc always exists and precedes the other machine
    # arcs so cost ties resolve to staying put; executed time discounts it so
    # that migrating is worthwhile only when the cost gap exceeds beta
    cur = ctx.machine_index(task.machine)
    discount = int(task.beta_seconds(ctx.now)) if (p.preemption and p.beta_enabled) else 0
    keep_cost = max(0, int(jc.d[cur]) - discount)
    n_pref = len(jc.tmpl_vids) - len(jc.mach_idx)  # U, X and rack entries
    mach_v = jc.tmpl_vids[n_pref:]
    mach_c = jc.tmpl_costs[n_pref:]
    pos = int(np.searchsorted(jc.mach_idx, cur))
    if pos < len(jc.mach_idx) and jc.mach_idx[pos] == cur:
        mach_v = np.delete(mach_v, pos)
        mach_c = np.delete(mach_c, pos)
    head_v = np.array([u_vid, net.x_vid, ctx.mvids[cur]], dtype=np.int64)
    head_c = np.array([a_cost, jc.b, keep_cost], dtype=np.int64)
    vids = np.concatenate([head_v, jc.tmpl_vids[2:n_pref], mach_v])
    costs = np.concatenate([head_c, jc.tmpl_costs[2:n_pref], mach_c])
    return vids, costs


def nomora_arcs(task: TaskState, ctx: RoundContext) -> List[ArcSpec]:
    """Arc list for one task under the latency-aware policy (see _nomora_resolved)."""
    vids, costs = _nomora_resolved(task, ctx)
    kind_of = {
        VertexKind.UNSCHEDULED: K_U,
        VertexKind.CLUSTER_AGG: K_X,
        VertexKind.RACK_AGG: K_R,
        VertexKind.MACHINE: K_M,
    }
    arcs: List[ArcSpec] = []
    for vid, cost in zip(vids.tolist(), costs.tolist()):
        vert = ctx.net.vertices[vid]
        kind = kind_of[vert.kind]
        arcs.append((kind, vert.ref if kind in (K_R, K_M) else 0, int(cost)))
    return arcs


def random_arcs(task: TaskState, ctx: RoundContext) -> List[ArcSpec]:
    """Fixed-cost arcs placing the task at a per-task random machine.

    A slightly cheaper arc points at one uniformly drawn free machine; the
    cluster arc guarantees any idle slot is still taken when that machine is
    contended. Min-cost ties inside one round would otherwise funnel a whole
    arrival batch down a single aggregator path, which is anything but
    random placement.
    """
    arcs: List[ArcSpec] = [(K_U, 0, ctx.unsched_cost(task)), (K_X, 0, RANDOM_X_COST)]
    free_idx = np.nonzero(ctx.free > 0)[0]
    if len(free_idx) and ctx.rng is not None:
        pick = int(ctx.rng.integers(0, len(free_idx)))
        arcs.append((K_M, int(ctx.arrays.ids[free_idx[pick]]), RANDOM_X_COST - 1))
    return arcs


def load_spreading_arcs(task: TaskState, ctx: RoundContext) -> List[ArcSpec]:
    """Machine arcs costed 1 + current task count, so minimising spreads load.

    Counts only move between rounds, so each task's machine order is
    shuffled: equal-cost ties then scatter an arrival batch instead of
    stacking it onto the lowest machine ids.
    """
    arcs: List[ArcSpec] = [(K_U, 0, ctx.unsched_cost(task))]
    free_idx = np.nonzero(ctx.free > 0)[0]
    if ctx.rng is not None and len(free_idx) > 1:
        free_idx = free_idx[ctx.rng.permutation(len(free_idx))]
    for mi in free_idx:
        arcs.append((K_M, int(ctx.arrays.ids[mi]), int(1 + ctx.counts[mi])))
    return arcs


class Policy:
    """Builds/refreshes task arcs; subclasses choose the cost scheme."""

    name = "base"
    root_first = False

    def arcs_for(self, task: TaskState, ctx: RoundContext) -> List[ArcSpec]:
        raise NotImplementedError

    def wants_refresh(self, task: TaskState, ctx: RoundContext) -> bool:
        return task.machine is None  # waiting tasks are always re-costed

    def refresh_costs(self, ctx: RoundContext) -> None:
        """Recompute arcs for every task this policy considers movable.

        Placed tasks under a no-preemption policy stay pinned and untouched.
        """
        net = ctx.net
        for key in sorted(net.task_vid):
            task = ctx.tasks[key]
            if task.machine is not None and not self.wants_refresh(task, ctx):
                continue
            net.update_arcs(key, self.arcs_for(task, ctx))


class NomoraPolicy(Policy):
    name = "nomora"
    root_first = True

    def arcs_for(self, task, ctx):
        return nomora_arcs(task, ctx)

    def wants_refresh(self, task, ctx):
        if task.machine is None:
            return True
        # running tasks are re-costed only when preemption may move them
        return ctx.params.preemption

    def refresh_costs(self, ctx: RoundContext) -> None:
        net = ctx.net
        preempting = ctx.params.preemption
        for key in sorted(net.task_vid):
            if key in net.pinned:
                continue
            task = ctx.tasks[key]
            if task.machine is not None and not preempting:
                continue
            vids, costs = _nomora_resolved(task, ctx)
            net.set_resolved_arcs_fast(key, vids, costs)


class RandomPolicy(Policy):
    name = "random"

    def arcs_for(self, task, ctx):
        return random_arcs(task, ctx)


class LoadSpreadingPolicy(Policy):
    name = "load-spreading"

    def arcs_for(self, task, ctx):
        return load_spreading_arcs(task, ctx)

    def refresh_costs(self, ctx: RoundContext) -> None:
        net = ctx.net
        free_idx = np.nonzero(ctx.free > 0)[0]
        base_v = ctx.mvids[free_idx]
        base_c = (1 + ctx.counts[free_idx]).astype(np.int64)
        shuffle = ctx.rng is not None and len(free_idx) > 1
        for key in sorted(net.task_vid):
            if key in net.pinned:
                continue
            task = ctx.tasks[key]
            if task.machine is not None:
                continue
            if shuffle:
                perm = ctx.rng.permutation(len(free_idx))
                mv, mc = base_v[perm], base_c[perm]
            else:
                mv, mc = base_v, base_c
            u = np.array([net._u_vid(task.job_id)], dtype=np.int64)
            a = np.array([ctx.unsched_cost(task)], dtype=np.int64)
            net.set_resolved_arcs_fast(
                key, np.concatenate([u, mv]), np.concatenate([a, mc])
            )


POLICIES = {
    "nomora": NomoraPolicy,
    "random": RandomPolicy,
    "load-spreading": LoadSpreadingPolicy,
}


def make_policy(name: str) -> Policy:
    try:
        return POLICIES[name]()
    except KeyError:
        raise ValueError(f"unknown policy {name!r} (expected one of {sorted(POLICIES)})") from None
