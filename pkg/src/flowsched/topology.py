"""Cluster model: machines grouped into racks, racks into pods.

Machines are assigned to racks (and racks to pods) in contiguous id order,
so the layout is deterministic and reproducible. The topology also keeps a
registry of which tasks run on which machine so that machine removal can
report the tasks that need rescheduling.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Set

import numpy as np

MachineId = int
RackId = int
PodId = int


class Tier(enum.Enum):
    SAME_MACHINE = "same_machine"
    SAME_RACK = "same_rack"
    SAME_POD = "same_pod"
    INTER_POD = "inter_pod"


@dataclass
class Machine:
    machine_id: MachineId
    rack: RackId
    pod: PodId
    cores: int


@dataclass
class ClusterTopology:
    machines_per_rack: int
    racks_per_pod: int
    machines: Dict[MachineId, Machine] = field(default_factory=dict)
    _next_machine_id: int = 0
    # task registry: machine -> set of task keys currently placed there
    _tasks_on: Dict[MachineId, Set[Hashable]] = field(default_factory=dict)

    # -- structure queries ------------------------------------------------

    def machine_ids(self) -> List[MachineId]:
        return sorted(self.machines)

    def rack_of(self, machine_id: MachineId) -> RackId:
        return self._get(machine_id).rack

    def pod_of(self, machine_id: MachineId) -> PodId:
        return self._get(machine_id).pod

    def cores(self, machine_id: MachineId) -> int:
        return self._get(machine_id).cores

    def rack_ids(self) -> List[RackId]:
        return sorted({m.rack for m in self.machines.values()})

    def pod_ids(self) -> List[PodId]:
        return sorted({m.pod for m in self.machines.values()})

    def rack_members(self, rack: RackId) -> List[MachineId]:
        return sorted(m.machine_id for m in self.machines.values() if m.rack == rack)

    def _get(self, machine_id: MachineId) -> Machine:
        try:
            return self.machines[machine_id]
        except KeyError:
            raise KeyError(f"unknown machine id {machine_id}") from None

    def tier_of(self, a: MachineId, b: MachineId) -> Tier:
        ma, mb = self._get(a), self._get(b)
        if a == b:
            return Tier.SAME_MACHINE
        if ma.rack == mb.rack:
            return Tier.SAME_RACK
        if ma.pod == mb.pod:
            return Tier.SAME_POD
        return Tier.INTER_POD

    # -- mutation ----------------------------------------------------------

    def add_machine(self, cores: int) -> MachineId:
        """Add a machine to the first rack with spare room (new rack if none)."""
        if cores < 1:
            raise ValueError("cores must be >= 1")
        sizes: Dict[RackId, int] = {}
        for m in self.machines.values():
            sizes[m.rack] = sizes.get(m.rack, 0) + 1
        rack = None
        for r in sorted(sizes):
            if sizes[r] < self.machines_per_rack:
                rack = r
                break
        if rack is None:
            rack = max(sizes) + 1 if sizes else 0
        pod = rack // self.racks_per_pod
        mid = self._next_machine_id
        self._next_machine_id += 1
        self.machines[mid] = Machine(mid, rack, pod, cores)
        self._tasks_on[mid] = set()
        return mid

    def remove_machine(self, machine_id: MachineId) -> List[Hashable]:
        """Remove a machine; returns task keys that were running on it."""
        self._get(machine_id)
        evicted = sorted(self._tasks_on.pop(machine_id, set()))
        del self.machines[machine_id]
        return evicted

    # -- task registry -----------------------------------------------------

    def assign_task(self, machine_id: MachineId, task_key: Hashable) -> None:
        m = self._get(machine_id)
        tasks = self._tasks_on.setdefault(machine_id, set())
        if len(tasks) >= m.cores:
            raise RuntimeError(f"machine {machine_id} has no free core slot")
        tasks.add(task_key)

    def release_task(self, machine_id: MachineId, task_key: Hashable) -> None:
        self._tasks_on.get(machine_id, set()).discard(task_key)

    def task_count(self, machine_id: MachineId) -> int:
        return len(self._tasks_on.get(machine_id, ()))

    def free_slots(self, machine_id: MachineId) -> int:
        return self._get(machine_id).cores - self.task_count(machine_id)

    # -- bulk views used by cost computation --------------------------------

    def arrays(self) -> "TopologyArrays":
        """Dense id/rack/pod/core arrays for vectorised per-machine math."""
        ids = np.array(self.machine_ids(), dtype=np.int64)
        racks = np.array([self.machines[i].rack for i in ids], dtype=np.int64)
        pods = np.array([self.machines[i].pod for i in ids], dtype=np.int64)
        cores = np.array([self.machines[i].cores for i in ids], dtype=np.int64)
        return TopologyArrays(ids, racks, pods, cores)


@dataclass
class TopologyArrays:
    ids: np.ndarray
    racks: np.ndarray
    pods: np.ndarray
    cores: np.ndarray


def build_topology(
    machine_count: int, machines_per_rack: int, racks_per_pod: int, cores: int
) -> ClusterTopology:
    """Build a cluster of identical machines, filling racks in id order.

    The trailing rack and pod may be partial when the counts do not divide
    evenly.
    """
    if machine_count < 1 or machines_per_rack < 1 or racks_per_pod < 1 or cores < 1:
        raise ValueError("all topology counts must be >= 1")
    topo = ClusterTopology(machines_per_rack=machines_per_rack, racks_per_pod=racks_per_pod)
    for mid in range(machine_count):
        rack = mid // machines_per_rack
        pod = rack // racks_per_pod
        topo.machines[mid] = Machine(mid, rack, pod, cores)
        topo._tasks_on[mid] = set()
    topo._next_machine_id = machine_count
    return topo
