"""Directed flow network for scheduling: tasks, aggregators, machines, sink.

Each runnable or running task vertex supplies one unit of flow; the sink
drains it. A unit routed through a machine vertex means the task runs there;
a unit routed through its job's unscheduled aggregator means it waits.
Arc capacities follow the slot model: task arcs carry 1, a rack-to-machine
or machine-to-sink arc carries the machine's core count, the cluster
aggregator reaches each rack at the rack's total core count.

The network is mutated incrementally between solver rounds (task arrival,
completion, arc cost refresh, machine add/remove) and assembled into flat
arc arrays for the solver on demand.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Dict, Hashable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .topology import ClusterTopology

log = logging.getLogger(__name__)

# arc target kinds used by policies when describing a task's out-arcs
K_U = 0  # own job's unscheduled aggregator
K_X = 1  # cluster aggregator
K_R = 2  # rack aggregator
K_M = 3  # machine

ArcSpec = Tuple[int, int, int]  # (kind, ref, cost); ref unused for K_U / K_X


class VertexKind(enum.Enum):
    TASK = "task"
    UNSCHEDULED = "unscheduled"
    CLUSTER_AGG = "cluster_agg"
    RACK_AGG = "rack_agg"
    MACHINE = "machine"
    SINK = "sink"


@dataclass
class Vertex:
    kind: VertexKind
    ref: Hashable  # task key / job id / rack id / machine id / None


@dataclass
class ArcArrays:
    """Flat arc representation handed to the solver."""

    num_vertices: int
    u: np.ndarray
    v: np.ndarray
    cap: np.ndarray
    cost: np.ndarray
    supply: np.ndarray
    task_arc_start: Dict[Hashable, Tuple[int, int]]  # task key -> (first arc idx, count)
    n_nontask: int = 0  # skeleton and U->S arcs occupy the leading positions


class FlowNetwork:
    def __init__(self, topo: ClusterTopology, preemption: bool = False):
        self.topo = topo
        self.preemption = preemption
        self.vertices: Dict[int, Vertex] = {}
        self._next_vid = 0
        self.x_vid = self._new_vertex(VertexKind.CLUSTER_AGG, None)
        self.sink_vid = self._new_vertex(VertexKind.SINK, None)
        self.machine_vid: Dict[int, int] = {}
        self.rack_vid: Dict[int, int] = {}
        self.task_vid: Dict[Hashable, int] = {}
        self.unsched_vid: Dict[int, int] = {}
        self.task_job: Dict[Hashable, int] = {}
        # per-task out-arcs as (target vid array, cost array), all capacity 1
        self.task_arcs: Dict[Hashable, Tuple[np.ndarray, np.ndarray]] = {}
        self.pinned: Dict[Hashable, int] = {}  # task key -> machine id
        self._u_count: Dict[int, int] = {}  # job -> tasks holding an arc to U
        self._job_tasks: Dict[int, int] = {}  # job -> task vertices present
        self._skeleton: Optional[Tuple[np.ndarray, ...]] = None
        for mid in topo.machine_ids():
            self._wire_machine(mid)

    # -- vertices ---------------------------------------------------------

    def _new_vertex(self, kind: VertexKind, ref: Hashable) -> int:
        vid = self._next_vid
        self._next_vid += 1
        self.vertices[vid] = Vertex(kind, ref)
        return vid

    def _wire_machine(self, mid: int) -> None:
        rack = self.topo.rack_of(mid)
        if rack not in self.rack_vid:
            self.rack_vid[rack] = self._new_vertex(VertexKind.RACK_AGG, rack)
        self.machine_vid[mid] = self._new_vertex(VertexKind.MACHINE, mid)
        self._skeleton = None

    def add_machine(self, mid: int) -> None:
        """Wire a machine that was just added to the topology."""
        if mid in self.machine_vid:
            raise ValueError(f"machine {mid} already in network")
        self._wire_machine(mid)

    def remove_machine(self, mid: int) -> None:
        vid = self.machine_vid.pop(mid)
        del self.vertices[vid]
        live_racks = {self.topo.rack_of(m) for m in self.machine_vid}
        for r in list(self.rack_vid):
            if r not in live_racks:
                del self.vertices[self.rack_vid[r]]
                del self.rack_vid[r]
        self._skeleton = None

    # -- task arcs ----------------------------------------------------------

    def resolve_arcs(self, job: int, arcs: Sequence[ArcSpec]) -> Tuple[np.ndarray, np.ndarray]:
        """Resolve (kind, ref, cost) arc specs to (target vid, cost) arrays."""
        vids = np.empty(len(arcs), dtype=np.int64)
        costs = np.empty(len(arcs), dtype=np.int64)
        for i, (kind, ref, cost) in enumerate(arcs):
            if kind == K_U:
                vids[i] = self._u_vid(job)
            elif kind == K_X:
                vids[i] = self.x_vid
            elif kind == K_R:
                vids[i] = self.rack_vid[ref]
            elif kind == K_M:
                vids[i] = self.machine_vid[ref]
            else:
                raise ValueError(f"unknown arc kind {kind}")
            costs[i] = cost
        return vids, costs

    def _u_vid(self, job: int) -> int:
        vid = self.unsched_vid.get(job)
        if vid is None:
            vid = self._new_vertex(VertexKind.UNSCHEDULED, job)
            self.unsched_vid[job] = vid
        return vid

    def _check_arcs(self, job: int, vids: np.ndarray, task: Hashable) -> None:
        if len(vids) == 0:
            raise ValueError(f"task {task!r} must have at least one arc")
        if len(set(vids.tolist())) != len(vids):
            raise ValueError(f"task {task!r} has duplicate arc targets")
        u = self.unsched_vid.get(job)
        if u is None or u not in vids:
            raise ValueError(
                f"task {task!r} must carry an arc to its unscheduled aggregator"
            )

    def add_task(self, task: Hashable, job: int, arcs: Sequence[ArcSpec]) -> None:
        """Add a runnable task vertex with its out-arcs (one must target U)."""
        if task in self.task_vid:
            raise ValueError(f"task {task!r} already present")
        vids, costs = self.resolve_arcs(job, arcs)
        self._check_arcs(job, vids, task)
        self.task_vid[task] = self._new_vertex(VertexKind.TASK, task)
        self.task_job[task] = job
        self.task_arcs[task] = (vids, costs)
        self._u_count[job] = self._u_count.get(job, 0) + 1
        self._job_tasks[job] = self._job_tasks.get(job, 0) + 1

    def remove_task(self, task: Hashable) -> None:
        """Remove a task vertex; unknown tasks are a warned no-op."""
        vid = self.task_vid.pop(task, None)
        if vid is None:
            log.warning("remove_task: unknown task %r", task)
            return
        job = self.task_job.pop(task)
        vids, _ = self.task_arcs.pop(task)
        del self.vertices[vid]
        if task in self.pinned:
            del self.pinned[task]
        elif self.unsched_vid.get(job) in vids:
            self._u_count[job] -= 1
        self._job_tasks[job] -= 1
        if self._job_tasks[job] == 0:
            uvid = self.unsched_vid.pop(job, None)
            if uvid is not None:
                del self.vertices[uvid]
            self._u_count.pop(job, None)
            del self._job_tasks[job]

    def update_arcs(self, task: Hashable, arcs: Sequence[ArcSpec]) -> None:
        """Replace a task's out-arcs (capacities stay 1, costs as given)."""
        if task not in self.task_vid:
            raise KeyError(f"unknown task {task!r}")
        job = self.task_job[task]
        vids, costs = self.resolve_arcs(job, arcs)
        self._check_arcs(job, vids, task)
        had_u = task not in self.pinned
        if not had_u:
            del self.pinned[task]
            self._u_count[job] = self._u_count.get(job, 0) + 1
        self.task_arcs[task] = (vids, costs)

    def set_resolved_arcs(self, task: Hashable, vids: np.ndarray, costs: np.ndarray) -> None:
        """Update with pre-resolved vid/cost arrays, validated."""
        job = self.task_job[task]
        self._check_arcs(job, vids, task)
        self.set_resolved_arcs_fast(task, vids, costs)

    def set_resolved_arcs_fast(self, task: Hashable, vids: np.ndarray, costs: np.ndarray) -> None:
        """Unvalidated arc replacement for the per-round policy hot path.

        The caller guarantees an arc to the job's unscheduled aggregator and
        no duplicate targets; audits recheck both after the fact.
        """
        job = self.task_job[task]
        if task in self.pinned:
            del self.pinned[task]
            self._u_count[job] = self._u_count.get(job, 0) + 1
        self.task_arcs[task] = (vids, costs)

    def pin_task(self, task: Hashable, machine: int) -> None:
        """Restrict a placed task to the arc toward its current machine.

        Only meaningful when preemption is disabled; with preemption on, a
        running task keeps its full preference arcs instead.
        """
        if self.preemption:
            raise RuntimeError("pin_task is not allowed when preemption is enabled")
        if task not in self.task_vid:
            raise KeyError(f"unknown task {task!r}")
        mvid = self.machine_vid.get(machine)
        if mvid is None:
            raise RuntimeError(f"machine {machine} not in network")
        job = self.task_job[task]
        if task not in self.pinned:
            self._u_count[job] -= 1
        self.pinned[task] = machine
        # pinned arcs carry cost 0: the path is forced, so its cost only
        # offsets solution totals
        self.task_arcs[task] = (
            np.array([mvid], dtype=np.int64),
            np.array([0], dtype=np.int64),
        )

    def supply(self) -> int:
        return len(self.task_vid)

    def arc_count(self) -> int:
        skel = sum(arr[0].shape[0] for arr in self._skeleton_arrays())
        u_s = sum(1 for j, c in self._u_count.items() if c > 0 and j in self.unsched_vid)
        return skel + u_s + sum(len(v[0]) for v in self.task_arcs.values())

    # -- assembly -------------------------------------------------------------

    def _skeleton_arrays(self):
        if self._skeleton is None:
            xr_u, xr_v, xr_c = [], [], []
            rm_u, rm_v, rm_c = [], [], []
            ms_u, ms_v, ms_c = [], [], []
            rack_cores: Dict[int, int] = {}
            for mid in sorted(self.machine_vid):
                rack_cores[self.topo.rack_of(mid)] = (
                    rack_cores.get(self.topo.rack_of(mid), 0) + self.topo.cores(mid)
                )
            for rack in sorted(self.rack_vid):
                xr_u.append(self.x_vid)
                xr_v.append(self.rack_vid[rack])
                xr_c.append(rack_cores.get(rack, 0))
            for mid in sorted(self.machine_vid):
                rvid = self.rack_vid[self.topo.rack_of(mid)]
                cores = self.topo.cores(mid)
                rm_u.append(rvid)
                rm_v.append(self.machine_vid[mid])
                rm_c.append(cores)
                ms_u.append(self.machine_vid[mid])
                ms_v.append(self.sink_vid)
                ms_c.append(cores)
            self._skeleton = tuple(
                (np.array(a, dtype=np.int64), np.array(b, dtype=np.int64), np.array(c, dtype=np.int64))
                for a, b, c in ((xr_u, xr_v, xr_c), (rm_u, rm_v, rm_c), (ms_u, ms_v, ms_c))
            )
        return self._skeleton

    def assemble(self, shuffle_rng: Optional[np.random.Generator] = None) -> ArcArrays:
        """Flatten the network into arc arrays for the solver.

        When a generator is given, the skeleton arc order is permuted; the
        solver breaks cost ties by arc order, so this supplies the "any
        available machine" randomness without touching costs.
        """
        blocks_u, blocks_v, blocks_cap, blocks_cost = [], [], [], []
        for bu, bv, bc in self._skeleton_arrays():
            if shuffle_rng is not None and len(bu) > 1:
                perm = shuffle_rng.permutation(len(bu))
                bu, bv, bc = bu[perm], bv[perm], bc[perm]
            blocks_u.append(bu)
            blocks_v.append(bv)
            blocks_cap.append(bc)
            blocks_cost.append(np.zeros(len(bu), dtype=np.int64))

        us_u, us_v, us_c = [], [], []
        for job in sorted(self.unsched_vid):
            cnt = self._u_count.get(job, 0)
            if cnt > 0:
                us_u.append(self.unsched_vid[job])
                us_v.append(self.sink_vid)
                us_c.append(cnt)
        blocks_u.append(np.array(us_u, dtype=np.int64))
        blocks_v.append(np.array(us_v, dtype=np.int64))
        blocks_cap.append(np.array(us_c, dtype=np.int64))
        blocks_cost.append(np.zeros(len(us_u), dtype=np.int64))

        n_nontask = sum(len(b) for b in blocks_u)
        task_keys = sorted(self.task_vid)
        n_tasks = len(task_keys)
        tvids = np.fromiter((self.task_vid[k] for k in task_keys), dtype=np.int64, count=n_tasks)
        lens = np.fromiter(
            (len(self.task_arcs[k][0]) for k in task_keys), dtype=np.int64, count=n_tasks
        )
        task_arc_start: Dict[Hashable, Tuple[int, int]] = {}
        pos = n_nontask
        for k, n in zip(task_keys, lens.tolist()):
            task_arc_start[k] = (pos, n)
            pos += n
        if n_tasks:
            blocks_u.append(np.repeat(tvids, lens))
            blocks_v.append(np.concatenate([self.task_arcs[k][0] for k in task_keys]))
            blocks_cap.append(np.ones(int(lens.sum()), dtype=np.int64))
            blocks_cost.append(np.concatenate([self.task_arcs[k][1] for k in task_keys]))

        u = np.concatenate(blocks_u) if blocks_u else np.empty(0, dtype=np.int64)
        v = np.concatenate(blocks_v) if blocks_v else np.empty(0, dtype=np.int64)
        cap = np.concatenate(blocks_cap) if blocks_cap else np.empty(0, dtype=np.int64)
        cost = np.concatenate(blocks_cost) if blocks_cost else np.empty(0, dtype=np.int64)

        supply = np.zeros(self._next_vid, dtype=np.int64)
        if n_tasks:
            supply[tvids] = 1
        supply[self.sink_vid] = -n_tasks
        return ArcArrays(self._next_vid, u, v, cap, cost, supply, task_arc_start, n_nontask)

    # -- integrity checks ---------------------------------------------------------

    def audit_capacities(self) -> List[str]:
        """Verify every arc's capacity against the slot-model schema.

        Task arcs carry 1; X->R the rack's total cores; R->M and M->S the
        machine's cores; U->S the count of the job's tasks currently holding
        an arc to U (each such unit must be drainable). Returns violations.
        """
        violations: List[str] = []
        arr = self.assemble()
        for i in range(len(arr.u)):
            ku = self.vertices[int(arr.u[i])]
            kv = self.vertices[int(arr.v[i])]
            cap = int(arr.cap[i])
            pair = (ku.kind, kv.kind)
            if ku.kind == VertexKind.TASK:
                ok = cap == 1
            elif pair == (VertexKind.CLUSTER_AGG, VertexKind.RACK_AGG):
                rack_cores = sum(
                    self.topo.cores(m) for m in self.machine_vid if self.topo.rack_of(m) == kv.ref
                )
                ok = cap == rack_cores
            elif pair == (VertexKind.RACK_AGG, VertexKind.MACHINE):
                ok = cap == self.topo.cores(kv.ref)
            elif pair == (VertexKind.MACHINE, VertexKind.SINK):
                ok = cap == self.topo.cores(ku.ref)
            elif pair == (VertexKind.UNSCHEDULED, VertexKind.SINK):
                # recount independently of the maintained counter
                uvid = self.unsched_vid.get(ku.ref)
                holders = sum(
                    1
                    for t, (vids, _) in self.task_arcs.items()
                    if self.task_job[t] == ku.ref and uvid in vids
                )
                ok = cap == holders
            else:
                violations.append(f"unexpected arc {ku.kind}->{kv.kind}")
                continue
            if not ok:
                violations.append(f"arc {ku.kind.value}({ku.ref})->{kv.kind.value}({kv.ref}) cap {cap}")
        return violations

    # -- debug export ------------------------------------------------------------

    def to_dimacs(self) -> str:
        """Export in DIMACS min-cost-flow text form (1-based node ids)."""
        arr = self.assemble()
        lines = [f"p min {arr.num_vertices} {len(arr.u)}"]
        for vid in range(arr.num_vertices):
            s = int(arr.supply[vid]) if vid < len(arr.supply) else 0
            if s != 0:
                lines.append(f"n {vid + 1} {s}")
        for i in range(len(arr.u)):
            lines.append(
                f"a {int(arr.u[i]) + 1} {int(arr.v[i]) + 1} 0 {int(arr.cap[i])} {int(arr.cost[i])}"
            )
        return "\n".join(lines) + "\n"


def build_skeleton(topo: ClusterTopology, preemption: bool = False) -> FlowNetwork:
    """Network with aggregator/machine/sink wiring and no task vertices yet."""
    return FlowNetwork(topo, preemption=preemption)
