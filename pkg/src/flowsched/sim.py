"""Discrete-event simulation engine and workload preparation.

The engine advances simulated time, fires scheduling rounds, and applies the
solver's placement deltas strictly after each solve: events that arrive while
a solve is (virtually) running become visible only in the following round.
Rounds fire at every measurement tick, whenever a job-submission or machine
event is due, and immediately again after a round whose delta changed
anything (so a job's waiting workers place one round after their root).
Task completions are applied at the next round rather than triggering one.

Solver-runtime coupling controls how a round's solve time feeds back into
simulated time before the delta applies: "zero" (not at all), "measured"
(real wall time; not reproducible across runs), or "modeled" (deterministic
time proportional to the solver's operation count; the default, and the mode
metrics-reproducibility guarantees apply to).

Preempted and migrated tasks lose their progress and restart from zero.
"""

from __future__ import annotations

import csv
import glob
import gzip
import heapq
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import mcmf
from .flow_network import FlowNetwork, K_U, build_skeleton
from .latency import LatencyProvider, TierTraces, assign_pairs
from .perf_model import BUILTIN_MODELS, DiscretizedTable, PerfModel
from .policies import (
    NoMoraParams,
    Policy,
    RoundContext,
    TaskKey,
    TaskState,
    make_policy,
)
from .topology import ClusterTopology, build_topology

log = logging.getLogger(__name__)

WORKLOAD_HEADER = ["job_id", "task_index", "submit_time_us", "runtime_us", "perf_model"]


@dataclass
class JobSpec:
    job_id: int
    submit_time_us: int
    model: str
    runtimes_us: List[int]  # one per task; index 0 is the root

    def __post_init__(self):
        if len(self.runtimes_us) < 2:
            raise ValueError(f"job {self.job_id}: jobs must have at least 2 tasks")
        if any(r <= 0 for r in self.runtimes_us):
            raise ValueError(f"job {self.job_id}: runtimes must be positive")

    @property
    def task_count(self) -> int:
        return len(self.runtimes_us)


@dataclass
class WorkloadEvent:
    time_s: float
    kind: str  # job_submit | task_end | machine_add | machine_remove
    payload: object = None


@dataclass
class SimConfig:
    machines: int = 96
    machines_per_rack: int = 48
    racks_per_pod: int = 16
    cores: int = 4
    duration_s: float = 86400.0
    policy: str = "nomora"
    params: NoMoraParams = field(default_factory=NoMoraParams)
    measurement_interval_s: float = 1.0
    coupling: str = "modeled"  # zero | modeled | measured
    modeled_ns_per_op: float = 100.0
    seed_assignment: int = 1
    seed_tiebreak: int = 2
    same_machine_us: float = 5.0
    wrap_traces: bool = False
    max_perf_free_slots_only: bool = False
    audit: bool = False

    def __post_init__(self):
        if self.coupling not in ("zero", "modeled", "measured"):
            raise ValueError(f"unknown coupling mode {self.coupling!r}")
        if self.measurement_interval_s <= 0 or self.duration_s <= 0:
            raise ValueError("duration and measurement interval must be positive")


@dataclass
class Span:
    """One contiguous stay of a task on a machine."""

    job_id: int
    index: int
    machine: int
    start: float
    end: Optional[float] = None
    completed: bool = False


@dataclass
class RoundRecord:
    round_idx: int
    t: float
    t_apply: float
    runtime_ms: float  # the value coupled into simulated time (see coupling)
    wall_ms: float
    ops: int
    phases: int
    running_before: int
    waiting_before: int
    new_placements: int
    migrations: int
    preemptions: int


@dataclass
class RunRecords:
    config: SimConfig
    duration_s: float
    tasks: Dict[TaskKey, TaskState]
    spans: List[Span]
    rounds: List[RoundRecord]
    job_model: Dict[int, str]
    evictions: int = 0
    skipped_rounds: int = 0
    aborted: bool = False


class Simulator:
    def __init__(
        self,
        config: SimConfig,
        workload: Sequence[JobSpec],
        topo: ClusterTopology,
        provider: LatencyProvider,
        tables: Dict[str, DiscretizedTable],
        extra_events: Sequence[WorkloadEvent] = (),
    ):
        self.cfg = config
        self.topo = topo
        self.provider = provider
        self.tables = tables
        self.policy: Policy = make_policy(config.policy)
        preempting = config.params.preemption and self.policy.root_first
        if config.params.preemption and not self.policy.root_first:
            raise ValueError(f"policy {config.policy!r} does not support preemption")
        self.net: FlowNetwork = build_skeleton(topo, preemption=preempting)
        self.preempting = preempting
        if self.policy.root_first:
            config.params.validate_against_models(tables)
        self.tasks: Dict[TaskKey, TaskState] = {}
        self.job_model: Dict[int, str] = {}
        self.spans: List[Span] = []
        self._open_span: Dict[TaskKey, Span] = {}
        self.rounds: List[RoundRecord] = []
        self.evictions = 0
        self.skipped = 0

        # triggers fire rounds; completions batch into whichever round comes next
        self._trigger_q: List[Tuple[float, int, str, object]] = []
        self._end_q: List[Tuple[float, int, TaskKey, int]] = []
        self._seq = 0
        for job in sorted(workload, key=lambda j: (j.submit_time_us, j.job_id)):
            if job.model not in tables:
                raise ValueError(f"job {job.job_id}: unknown perf model {job.model!r}")
            self._push_trigger(job.submit_time_us / 1e6, "job_submit", job)
        for ev in extra_events:
            if ev.kind not in ("machine_add", "machine_remove"):
                raise ValueError(f"extra events must be machine events, got {ev.kind}")
            self._push_trigger(ev.time_s, ev.kind, ev.payload)

    # -- event plumbing ----------------------------------------------------

    def _push_trigger(self, t: float, kind: str, payload) -> None:
        heapq.heappush(self._trigger_q, (t, self._seq, kind, payload))
        self._seq += 1

    def _push_end(self, t: float, key: TaskKey, epoch: int) -> None:
        heapq.heappush(self._end_q, (t, self._seq, key, epoch))
        self._seq += 1

    def _apply_due_events(self, now: float) -> int:
        applied = 0
        while self._end_q and self._end_q[0][0] <= now:
            t, _, key, epoch = heapq.heappop(self._end_q)
            applied += self._apply_task_end(t, key, epoch)
        while self._trigger_q and self._trigger_q[0][0] <= now:
            t, _, kind, payload = heapq.heappop(self._trigger_q)
            if kind == "job_submit":
                self._apply_submit(t, payload)
            elif kind == "machine_add":
                self._apply_machine_add(payload)
            elif kind == "machine_remove":
                self._apply_machine_remove(now, payload)
            applied += 1
        return applied

    def _apply_submit(self, t: float, job: JobSpec) -> None:
        self.job_model[job.job_id] = job.model
        gamma = self.cfg.params.gamma
        for idx, runtime_us in enumerate(job.runtimes_us):
            st = TaskState(
                job_id=job.job_id,
                index=idx,
                submit_time=t,
                runtime_us=runtime_us,
                model=job.model,
                unplaced_since=t,
            )
            self.tasks[st.key] = st
            # enters with the mandatory unscheduled arc; the round's cost
            # refresh builds the real preference arcs
            self.net.add_task(st.key, job.job_id, [(K_U, 0, gamma)])

    def _apply_task_end(self, t: float, key: TaskKey, epoch: int) -> int:
        st = self.tasks.get(key)
        if st is None or st.machine is None or st.run_epoch != epoch:
            return 0  # stale end from before a migration/preemption
        st.completed_at = t
        self._close_span(key, t, completed=True)
        self.topo.release_task(st.machine, key)
        st.machine = None
        st.run_since = None
        self.net.remove_task(key)
        return 1

    def _apply_machine_add(self, cores: int) -> None:
        mid = self.topo.add_machine(int(cores))
        self.net.add_machine(mid)
        self.provider.extend_for_machine(self.topo, mid)

    def _apply_machine_remove(self, now: float, machine_id: int) -> None:
        evicted = self.topo.remove_machine(int(machine_id))
        for key in evicted:
            st = self.tasks[key]
            self._close_span(key, now, completed=False)
            st.machine = None
            st.run_since = None
            st.run_epoch += 1
            st.unplaced_since = now
            st.preempt_count += 1
            self.evictions += 1
            self.net.update_arcs(key, [(K_U, 0, self.cfg.params.gamma)])
        self.net.remove_machine(int(machine_id))

    # -- spans ------------------------------------------------------------------

    def _open_span_for(self, key: TaskKey, machine: int, t: float) -> None:
        span = Span(key[0], key[1], machine, t)
        self.spans.append(span)
        self._open_span[key] = span

    def _close_span(self, key: TaskKey, t: float, completed: bool) -> None:
        span = self._open_span.pop(key, None)
        if span is not None:
            span.end = t
            span.completed = completed

    # -- the round ---------------------------------------------------------------

    def _make_ctx(self, now: float, round_idx: int) -> RoundContext:
        return RoundContext(
            topo=self.topo,
            arrays=self.topo.arrays(),
            net=self.net,
            provider=self.provider,
            tables=self.tables,
            params=self.cfg.params,
            now=now,
            tasks=self.tasks,
            audit=self.cfg.audit,
            rng=np.random.default_rng((self.cfg.seed_tiebreak, round_idx, 7)),
            alpha_quantum=self.cfg.measurement_interval_s,
        )

    def _needs_solve(self) -> bool:
        for key in self.net.task_vid:
            if key in self.net.pinned:
                continue
            if len(self.net.task_arcs[key][0]) > 1:
                return True
        return False

    def _coupled_seconds(self, runtime_ms: float) -> float:
        if self.cfg.coupling == "zero":
            return 0.0
        return runtime_ms / 1000.0

    def _round(self, now: float, round_idx: int) -> bool:
        """Refresh costs, solve, apply the delta. Returns True if it changed anything."""
        ctx = self._make_ctx(now, round_idx)
        self.policy.refresh_costs(ctx)
        if not self._needs_solve():
            self.skipped += 1
            return False
        running_before = sum(1 for s in self.tasks.values() if s.machine is not None)
        waiting_before = len(self.net.task_vid) - running_before

        rng = np.random.default_rng((self.cfg.seed_tiebreak, round_idx))
        sol = mcmf.solve(self.net, shuffle_rng=rng)
        if self.cfg.coupling == "modeled":
            runtime_ms = sol.stats.ops * self.cfg.modeled_ns_per_op / 1e6
        else:
            runtime_ms = sol.stats.wall_ms
        t_apply = now + self._coupled_seconds(runtime_ms)
        if t_apply > self.cfg.duration_s:
            # the solve finishes past the horizon; its delta never lands
            self._t = self.cfg.duration_s
            return False

        current = {k: s.machine for k, s in self.tasks.items() if s.machine is not None}
        delta = mcmf.extract_placements(self.net, sol, current)
        self._apply_delta(delta, t_apply, round_idx)
        self._t = t_apply
        self.rounds.append(
            RoundRecord(
                round_idx=round_idx,
                t=now,
                t_apply=t_apply,
                runtime_ms=runtime_ms,
                wall_ms=sol.stats.wall_ms,
                ops=sol.stats.ops,
                phases=sol.stats.phases,
                running_before=running_before,
                waiting_before=waiting_before,
                new_placements=len(delta.new_placements),
                migrations=len(delta.migrations),
                preemptions=len(delta.preemptions),
            )
        )
        # an immediate follow-up round is only needed when a root landed:
        # its workers become schedulable "in the next scheduling round"
        if self.policy.root_first:
            return any(key[1] == 0 for key in delta.new_placements)
        return False

    def _apply_delta(self, delta: mcmf.SchedulingDelta, t: float, round_idx: int) -> None:
        pin = not self.preempting
        # all releases happen before any assign: the optimal flow respects
        # machine capacity only as a whole, so swap chains and backfilled
        # slots must not transiently overflow a machine
        for key, src, dst in delta.migrations:
            self._close_span(key, t, completed=False)
            self.topo.release_task(src, key)
        for key, src in delta.preemptions:
            self._close_span(key, t, completed=False)
            self.topo.release_task(src, key)
        for key, machine in sorted(delta.new_placements.items()):
            st = self.tasks[key]
            if self.cfg.audit and self.policy.root_first and st.index > 0:
                root = self.tasks[(st.job_id, 0)]
                assert root.first_placed_round is not None and root.first_placed_round < round_idx
            st.alpha_accum += t - st.unplaced_since
            st.unplaced_since = None
            st.machine = machine
            st.run_since = t
            st.run_epoch += 1
            if st.first_placed_at is None:
                st.first_placed_at = t
                st.first_placed_round = round_idx
            self.topo.assign_task(machine, key)
            self._open_span_for(key, machine, t)
            self._push_end(t + st.runtime_us / 1e6, key, st.run_epoch)
            if pin:
                self.net.pin_task(key, machine)
        for key, src, dst in delta.migrations:
            st = self.tasks[key]
            self.topo.assign_task(dst, key)
            st.machine = dst
            st.run_since = t  # restarted from the beginning: progress is lost
            st.run_epoch += 1
            st.migrate_count += 1
            self._open_span_for(key, dst, t)
            self._push_end(t + st.runtime_us / 1e6, key, st.run_epoch)
        for key, src in delta.preemptions:
            st = self.tasks[key]
            st.machine = None
            st.run_since = None
            st.run_epoch += 1
            st.unplaced_since = t
            st.preempt_count += 1

    # -- main loop ------------------------------------------------------------------

    def run(self) -> RunRecords:
        cfg = self.cfg
        self._t = 0.0
        next_tick = 0.0
        round_idx = 0
        chained = False
        aborted = False
        while True:
            if chained:
                t_round = self._t
            else:
                t_trigger = self._trigger_q[0][0] if self._trigger_q else math.inf
                t_round = min(next_tick, t_trigger)
                if t_round > cfg.duration_s:
                    break
                t_round = max(t_round, self._t)
            self._t = t_round
            self._apply_due_events(t_round)
            while next_tick <= t_round:
                next_tick += cfg.measurement_interval_s
            try:
                changed = self._round(t_round, round_idx)
            except IndexError as e:
                log.error("aborting run at t=%.1f: %s", t_round, e)
                aborted = True
                break
            round_idx += 1
            chained = changed
            if self._t >= cfg.duration_s:
                break

        horizon = cfg.duration_s
        if aborted:
            # partial metrics can only replay seconds the traces cover
            horizon = min(self._t, cfg.duration_s)
            if not self.provider.wrap:
                horizon = min(horizon, float(self.provider.length_s))
        for key in list(self._open_span):
            self._close_span(key, horizon, completed=False)
        return RunRecords(
            config=cfg,
            duration_s=horizon,
            tasks=self.tasks,
            spans=self.spans,
            rounds=self.rounds,
            job_model=self.job_model,
            evictions=self.evictions,
            skipped_rounds=self.skipped,
            aborted=aborted,
        )


def build_tables(models: Optional[Dict[str, PerfModel]] = None) -> Dict[str, DiscretizedTable]:
    models = models or BUILTIN_MODELS
    return {name: DiscretizedTable(m) for name, m in models.items()}


def run(
    config: SimConfig,
    workload: Sequence[JobSpec],
    traces: Union[TierTraces, LatencyProvider],
    models: Optional[Dict[str, PerfModel]] = None,
    extra_events: Sequence[WorkloadEvent] = (),
):
    """Build the cluster, run the simulation, and compute the metrics bundle."""
    topo = build_topology(
        config.machines, config.machines_per_rack, config.racks_per_pod, config.cores
    )
    if isinstance(traces, LatencyProvider):
        provider = traces
    else:
        provider = assign_pairs(
            topo,
            traces,
            config.seed_assignment,
            same_machine_us=config.same_machine_us,
            wrap=config.wrap_traces,
        )
    tables = build_tables(models)
    records = Simulator(config, workload, topo, provider, tables, extra_events).run()
    from .metrics import build_bundle

    return build_bundle(records, provider, tables)


# -- workload synthesis ------------------------------------------------------


@dataclass(frozen=True)
class Dist:
    """Tiny distribution spec, parseable from CLI strings.

    Forms: ``fixed:V``, ``uniform:LO:HI`` (inclusive ints),
    ``choice:V1@W1,V2@W2,...``, ``geometric:MEAN``.
    """

    kind: str
    params: tuple

    @staticmethod
    def parse(text: str) -> "Dist":
        head, _, rest = text.partition(":")
        try:
            if head == "fixed":
                return Dist("fixed", (float(rest),))
            if head == "uniform":
                lo, hi = rest.split(":")
                return Dist("uniform", (float(lo), float(hi)))
            if head == "choice":
                values, weights = [], []
                for part in rest.split(","):
                    v, _, w = part.partition("@")
                    values.append(float(v))
                    weights.append(float(w) if w else 1.0)
                return Dist("choice", (tuple(values), tuple(weights)))
            if head == "geometric":
                return Dist("geometric", (float(rest),))
        except ValueError as e:
            raise ValueError(f"bad distribution spec {text!r}: {e}") from None
        raise ValueError(f"unknown distribution kind {head!r}")

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "fixed":
            return self.params[0]
        if self.kind == "uniform":
            lo, hi = self.params
            return float(rng.integers(int(lo), int(hi) + 1))
        if self.kind == "choice":
            values, weights = self.params
            w = np.asarray(weights, dtype=np.float64)
            return float(rng.choice(np.asarray(values), p=w / w.sum()))
        if self.kind == "geometric":
            mean = self.params[0]
            return float(rng.geometric(1.0 / max(mean, 1.0)))
        raise ValueError(self.kind)


DEFAULT_MIX = {"memcached": 0.5, "strads": 0.25, "tensorflow": 0.25}


def synth_workload(
    job_count: int,
    arrival_rate: float,
    task_count_dist: Dist,
    runtime_dist: Dist,
    mix: Dict[str, float],
    seed: int,
) -> List[JobSpec]:
    """Poisson job arrivals with sampled task counts and runtimes.

    Submit times and runtimes are quantised to whole seconds. Every job gets
    at least two tasks; the root (index 0) runs as long as its longest
    worker, so it outlives them.
    """
    if job_count < 1:
        raise ValueError("job_count must be >= 1")
    if arrival_rate <= 0:
        raise ValueError("arrival_rate must be > 0")
    if not mix or any(w < 0 for w in mix.values()) or sum(mix.values()) <= 0:
        raise ValueError("mix must hold non-negative weights with positive sum")
    rng = np.random.default_rng(seed)
    names = sorted(mix)
    weights = np.array([mix[n] for n in names], dtype=np.float64)
    weights /= weights.sum()
    t = 0.0
    jobs: List[JobSpec] = []
    for job_id in range(1, job_count + 1):
        t += rng.exponential(1.0 / arrival_rate)
        submit_us = int(t) * 1_000_000
        model = str(rng.choice(names, p=weights))
        n_tasks = max(2, int(round(task_count_dist.sample(rng))))
        workers = [max(1, int(round(runtime_dist.sample(rng)))) for _ in range(n_tasks - 1)]
        runtimes_us = [max(workers) * 1_000_000] + [w * 1_000_000 for w in workers]
        jobs.append(JobSpec(job_id, submit_us, model, runtimes_us))
    return jobs


# -- workload files ------------------------------------------------------------


def write_workload(jobs: Sequence[JobSpec], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(WORKLOAD_HEADER)
        for job in jobs:
            for idx, rt in enumerate(job.runtimes_us):
                w.writerow([job.job_id, idx, job.submit_time_us, rt, job.model])


def read_workload(path: str) -> List[JobSpec]:
    jobs: Dict[int, dict] = {}
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != WORKLOAD_HEADER:
            raise ValueError(f"{path}: expected header {','.join(WORKLOAD_HEADER)}")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            try:
                job_id, idx = int(row[0]), int(row[1])
                submit_us, runtime_us = int(row[2]), int(row[3])
                model = row[4]
            except (ValueError, IndexError):
                raise ValueError(f"{path}:{lineno}: malformed row {row!r}") from None
            rec = jobs.setdefault(job_id, {"submit": submit_us, "model": model, "tasks": {}})
            rec["tasks"][idx] = runtime_us
    out = []
    for job_id in sorted(jobs):
        rec = jobs[job_id]
        indices = sorted(rec["tasks"])
        if indices != list(range(len(indices))):
            raise ValueError(f"{path}: job {job_id} has non-contiguous task indices")
        out.append(
            JobSpec(job_id, rec["submit"], rec["model"], [rec["tasks"][i] for i in indices])
        )
    return out


# -- public cluster-trace conversion ------------------------------------------------


# task_events columns in the public Google cluster trace format
_G_TIME, _G_JOB, _G_TASK, _G_EVENT = 0, 2, 3, 5
_G_SUBMIT, _G_SCHEDULE = 0, 1
_G_TERMINAL = {2, 3, 4, 5, 6}  # evict / fail / finish / kill / lost


def convert_google_trace(
    path: str,
    mix: Dict[str, float] = None,
    seed: int = 0,
    window_hours: float = 24.0,
    offset_s: float = 0.0,
    default_runtime_s: int = 300,
) -> List[JobSpec]:
    """Convert public-format cluster task events into a workload.

    Accepts a task_events CSV file (optionally gzipped) or a directory of
    part files. Single-task jobs are dropped; each kept job is assigned a
    prediction model at random in the given proportions; only jobs submitted
    inside the window are retained, re-based so the window starts at 0.
    Tasks without a terminal event get the default runtime.
    """
    mix = mix or DEFAULT_MIX
    files = _trace_files(path)
    submit: Dict[Tuple[int, int], int] = {}
    sched: Dict[Tuple[int, int], int] = {}
    end: Dict[Tuple[int, int], int] = {}
    for fname in files:
        opener = gzip.open if fname.endswith(".gz") else open
        with opener(fname, "rt", encoding="utf-8", newline="") as f:
            for lineno, row in enumerate(csv.reader(f), 1):
                if not row:
                    continue
                try:
                    t = int(row[_G_TIME])
                    key = (int(row[_G_JOB]), int(row[_G_TASK]))
                    event = int(row[_G_EVENT])
                except (ValueError, IndexError):
                    raise ValueError(f"{fname}:{lineno}: malformed task event {row!r}") from None
                if event == _G_SUBMIT:
                    if key not in submit or t < submit[key]:
                        submit[key] = t
                elif event == _G_SCHEDULE:
                    if key not in sched or t < sched[key]:
                        sched[key] = t
                elif event in _G_TERMINAL:
                    if key not in end or t > end[key]:
                        end[key] = t

    if not submit:
        return []
    by_job: Dict[int, List[Tuple[int, int]]] = {}
    for key in submit:
        by_job.setdefault(key[0], []).append(key)
    t0 = min(submit.values()) + int(offset_s * 1e6)
    t1 = t0 + int(window_hours * 3600 * 1e6)

    rng = np.random.default_rng(seed)
    names = sorted(mix)
    weights = np.array([mix[n] for n in names], dtype=np.float64)
    weights /= weights.sum()

    jobs: List[JobSpec] = []
    for job_id in sorted(by_job):
        keys = sorted(by_job[job_id], key=lambda k: k[1])
        if len(keys) < 2:
            continue  # single-task jobs do not communicate with anyone
        job_submit = min(submit[k] for k in keys)
        if not (t0 <= job_submit < t1):
            continue
        runtimes = []
        for k in keys:
            if k in sched and k in end and end[k] > sched[k]:
                rt = end[k] - sched[k]
            else:
                rt = default_runtime_s * 1_000_000
            runtimes.append(max(rt, 1_000_000))
        # the lowest original index becomes the root and outlives the others
        runtimes[0] = max(runtimes)
        model = str(rng.choice(names, p=weights))
        jobs.append(JobSpec(job_id, job_submit - t0, model, runtimes))
    return jobs


def _trace_files(path: str) -> List[str]:
    if os.path.isdir(path):
        files = sorted(glob.glob(os.path.join(path, "*.csv*")))
        if not files:
            raise ValueError(f"{path}: no .csv files found")
        return files
    if not os.path.exists(path):
        raise ValueError(f"{path}: no such file")
    return [path]
