"""Evaluation metrics computed from a finished run's placement records.

Average application performance per job: for every whole second in which the
job has at least one placed worker, the achieved performance (mean over the
job's placed workers of the predicted performance at the measured root-to-
worker latency) divided by the best achievable performance that second (the
prediction at the smallest latency from the root's machine to any machine),
clamped to 1; the job's value is the mean over those seconds. The CDF-area
comparison between policies reduces to the mean of these per-job fractions,
expressed as a percentage.

Also reported: per-round algorithm runtime, per-task placement latency
(submission to first placement, solver time included under coupled modes),
per-task response time, and the per-round migrated-task percentage.
"""

from __future__ import annotations

import csv
import json
import math
import os
import statistics
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .latency import LatencyProvider
from .perf_model import DiscretizedTable


def cdf_area(values: Sequence[float]) -> float:
    """Area above the empirical CDF and under y=1, as a percentage.

    For fractions in [0,1] plotted on a 0..100% axis this area equals the
    arithmetic mean times 100 (a point mass at 1.0 scores 100%).
    """
    vals = np.asarray(list(values), dtype=np.float64)
    if len(vals) == 0:
        raise ValueError("cdf_area of empty input is undefined")
    if vals.min() < 0 or vals.max() > 1 + 1e-12:
        raise ValueError("values must lie in [0, 1]")
    return float(vals.mean() * 100.0)


def percentile(values: Sequence[float], q: float) -> float:
    """Nearest-rank style percentile: sorted[floor(q*n)], clamped to the last."""
    vals = sorted(values)
    if not vals:
        raise ValueError("percentile of empty input")
    idx = min(len(vals) - 1, int(math.floor(q * len(vals))))
    return float(vals[idx])


def series_summary(values: Sequence[float]) -> dict:
    vals = list(values)
    if not vals:
        return {"count": 0}
    return {
        "count": len(vals),
        "median": float(statistics.median(vals)),
        "p90": percentile(vals, 0.90),
        "p99": percentile(vals, 0.99),
        "max": float(max(vals)),
    }


@dataclass
class MetricsBundle:
    job_perf: Dict[int, float]
    excluded_jobs: int
    runtimes_ms: List[float]
    placement_latency_s: List[float]
    response_time_s: List[float]
    migrated_pct: List[float]
    counts: Dict[str, int]
    meta: Dict[str, object] = field(default_factory=dict)

    @property
    def area_pct(self) -> Optional[float]:
        if not self.job_perf:
            return None
        return cdf_area(list(self.job_perf.values()))


def job_avg_perf(
    job_id: int,
    records,
    provider: LatencyProvider,
    tables: Dict[str, DiscretizedTable],
    free_slots_only: bool = False,
) -> Optional[float]:
    """Average application performance for one job; None if no worker ever ran."""
    table = tables[records.job_model[job_id]]
    duration = int(math.ceil(records.duration_s))
    root_at = _root_machine_series(records, job_id, duration)

    actual_sum = np.zeros(duration)
    actual_cnt = np.zeros(duration, dtype=np.int64)
    for span in records.spans:
        if span.job_id != job_id or span.index == 0:
            continue
        lo = int(math.ceil(span.start))
        hi = int(math.ceil(span.end if span.end is not None else records.duration_s))
        hi = min(hi, duration)
        for a, b, root_m in _constant_runs(root_at, lo, hi):
            if root_m < 0:
                continue
            lat = provider.series(int(root_m), span.machine, a, b)
            perf = table.lookup_vec(lat)
            actual_sum[a:b] += perf
            actual_cnt[a:b] += 1

    active = np.nonzero(actual_cnt > 0)[0]
    if len(active) == 0:
        return None
    actual = actual_sum[active] / actual_cnt[active]
    denom = _best_achievable(records, provider, table, root_at, active, free_slots_only)
    score = np.minimum(actual / denom, 1.0)
    return float(score.mean())


def _root_machine_series(records, job_id: int, duration: int) -> np.ndarray:
    """Root's machine per second; the anchor persists after the root ends."""
    arr = np.full(duration, -1, dtype=np.int64)
    for span in records.spans:
        if span.job_id != job_id or span.index != 0:
            continue
        lo = int(math.ceil(span.start))
        hi = int(math.ceil(span.end if span.end is not None else records.duration_s))
        arr[lo : min(hi, duration)] = span.machine
    # forward-fill: workers placed relative to the root keep the last anchor
    idx = np.where(arr >= 0, np.arange(duration), 0)
    np.maximum.accumulate(idx, out=idx)
    filled = arr[idx]
    filled[: _first_nonneg(arr)] = -1
    return filled


def _first_nonneg(arr: np.ndarray) -> int:
    nz = np.nonzero(arr >= 0)[0]
    return int(nz[0]) if len(nz) else len(arr)


def _constant_runs(series: np.ndarray, lo: int, hi: int):
    """Yield (a, b, value) runs of constant value within series[lo:hi]."""
    a = lo
    while a < hi:
        v = series[a]
        b = a + 1
        while b < hi and series[b] == v:
            b += 1
        yield a, b, v
        a = b


def _best_achievable(
    records, provider, table, root_at, active: np.ndarray, free_slots_only: bool
) -> np.ndarray:
    """Performance at the smallest root-to-anywhere latency, per active second.

    "All machines" means every machine the provider knows about; machines
    removed mid-run keep contributing to the bound, which only makes the
    denominator more conservative.
    """
    denom = np.ones(len(active))
    machine_ids = np.array(sorted(provider.row_of), dtype=np.int64)
    if free_slots_only:
        occupancy = _occupancy(records, machine_ids)
        cores = records.config.cores
    pos = 0
    for a, b, root_m in _runs_over(active, root_at):
        n = b - a
        if root_m < 0:
            pos += n
            continue
        seconds = active[a:b]
        if not free_slots_only:
            best = _min_latency_series(provider, int(root_m), machine_ids, seconds)
        else:
            best = np.empty(n)
            for i, s in enumerate(seconds):
                free = occupancy[:, s] < cores
                ids = machine_ids[free]
                if len(ids) == 0:
                    ids = machine_ids  # fully packed: fall back to all machines
                best[i] = provider.latency_row(int(root_m), ids, float(s)).min()
        denom[pos : pos + n] = table.lookup_vec(best)
        pos += n
    return denom


def _runs_over(active: np.ndarray, root_at: np.ndarray):
    """Runs of constant root machine over the (sorted) active-second array."""
    a = 0
    n = len(active)
    while a < n:
        v = root_at[active[a]]
        b = a + 1
        while b < n and active[b] == active[b - 1] + 1 and root_at[active[b]] == v:
            b += 1
        yield a, b, v
        a = b


def _min_latency_series(
    provider: LatencyProvider, root_m: int, machine_ids: np.ndarray, seconds: np.ndarray
) -> np.ndarray:
    """min over machines of latency(root, m, s) for each s, without an n*|s| sweep.

    The per-pair coefficient is fixed, so the minimum over machines sharing a
    trace is that trace's sample times the smallest coefficient; minimising
    over the handful of traces (plus the same-machine constant) is exact.
    """
    ra = provider.row_of[root_m]
    rows = np.array([provider.row_of[int(m)] for m in machine_ids], dtype=np.int64)
    rows = rows[rows != ra]
    t_idx = seconds if not provider.wrap else seconds % provider.length_s
    if len(rows) == 0:
        return np.full(len(seconds), provider.same_machine_us)
    tids = provider.trace_idx[ra, rows]
    coeffs = provider.coeff[ra, rows]
    best = np.full(len(seconds), provider.same_machine_us)
    for tid in np.unique(tids):
        cmin = coeffs[tids == tid].min()
        np.minimum(best, provider.traces[tid][t_idx] * cmin, out=best)
    return best


def _occupancy(records, machine_ids: np.ndarray) -> np.ndarray:
    duration = int(math.ceil(records.duration_s))
    row = {int(m): i for i, m in enumerate(machine_ids)}
    occ = np.zeros((len(machine_ids), duration), dtype=np.int16)
    for span in records.spans:
        r = row.get(span.machine)
        if r is None:
            continue
        lo = int(math.ceil(span.start))
        hi = int(math.ceil(span.end if span.end is not None else records.duration_s))
        occ[r, lo : min(hi, duration)] += 1
    return occ


def build_bundle(records, provider, tables) -> MetricsBundle:
    """Compute every metric series from a run's records."""
    cfg = records.config
    job_perf: Dict[int, float] = {}
    excluded = 0
    for job_id in sorted(records.job_model):
        value = job_avg_perf(
            job_id, records, provider, tables, free_slots_only=cfg.max_perf_free_slots_only
        )
        if value is None:
            excluded += 1
        else:
            job_perf[job_id] = value

    placement, response = [], []
    completed = running = unplaced = 0
    for st in records.tasks.values():
        if st.first_placed_at is not None:
            placement.append(st.first_placed_at - st.submit_time)
        if st.completed_at is not None:
            completed += 1
            response.append(st.completed_at - st.submit_time)
        elif st.machine is not None:
            running += 1
        else:
            unplaced += 1

    migrated_pct = [
        100.0 * r.migrations / max(r.running_before, 1) for r in records.rounds
    ]
    counts = {
        "jobs": len(records.job_model),
        "tasks": len(records.tasks),
        "completed_tasks": completed,
        "running_at_horizon": running,
        "unplaced_at_horizon": unplaced,
        "rounds": len(records.rounds),
        "skipped_rounds": records.skipped_rounds,
        "migrations": sum(r.migrations for r in records.rounds),
        "preemptions": sum(r.preemptions for r in records.rounds),
        "evictions": records.evictions,
    }
    meta = {
        "policy": cfg.policy,
        "coupling": cfg.coupling,
        "duration_s": records.duration_s,
        "aborted": records.aborted,
        "preemption": cfg.params.preemption,
        "beta_enabled": cfg.params.beta_enabled,
        "p_m": cfg.params.p_m,
        "p_r": cfg.params.p_r,
    }
    return MetricsBundle(
        job_perf=job_perf,
        excluded_jobs=excluded,
        runtimes_ms=[r.runtime_ms for r in records.rounds],
        placement_latency_s=placement,
        response_time_s=response,
        migrated_pct=migrated_pct,
        counts=counts,
        meta=meta,
    )


def summarize(bundle: MetricsBundle) -> dict:
    """Percentile report across the bundle's series plus the CDF area."""
    migrated = bundle.migrated_pct
    report = {
        "area_pct": bundle.area_pct,
        "excluded_jobs": bundle.excluded_jobs,
        "algorithm_runtime_ms": series_summary(bundle.runtimes_ms),
        "placement_latency_s": series_summary(bundle.placement_latency_s),
        "response_time_s": series_summary(bundle.response_time_s),
        "migrated_pct_per_round": {
            "count": len(migrated),
            "mean": float(np.mean(migrated)) if migrated else None,
            "p99": percentile(migrated, 0.99) if migrated else None,
        },
        "counts": bundle.counts,
        "meta": bundle.meta,
    }
    return report


def write_outputs(bundle: MetricsBundle, outdir: str, extra_meta: Optional[dict] = None) -> str:
    """Write metrics_summary.json plus the per-series CSVs. Returns summary path."""
    os.makedirs(outdir, exist_ok=True)
    report = summarize(bundle)
    if extra_meta:
        report["meta"] = {**report["meta"], **extra_meta}
    summary_path = os.path.join(outdir, "metrics_summary.json")
    with open(summary_path, "w", encoding="utf-8") as f:
        json.dump(report, f, sort_keys=True, indent=2)
        f.write("\n")

    with open(os.path.join(outdir, "per_job_perf.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["job_id", "avg_perf"])
        for job_id in sorted(bundle.job_perf):
            w.writerow([job_id, f"{bundle.job_perf[job_id]:.9f}"])

    with open(os.path.join(outdir, "per_round_runtime.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["round", "runtime_ms", "migrated_pct"])
        for i, rt in enumerate(bundle.runtimes_ms):
            w.writerow([i, f"{rt:.6f}", f"{bundle.migrated_pct[i]:.6f}"])

    with open(os.path.join(outdir, "per_task_latency.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["placement_latency_s"])
        for v in bundle.placement_latency_s:
            w.writerow([f"{v:.6f}"])

    for name, values in [
        ("cdf_perf", sorted(bundle.job_perf.values())),
        ("cdf_runtime_ms", sorted(bundle.runtimes_ms)),
        ("cdf_placement_latency_s", sorted(bundle.placement_latency_s)),
    ]:
        with open(os.path.join(outdir, f"{name}.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["x", "y"])
            n = len(values)
            for i, v in enumerate(values):
                w.writerow([f"{v:.9f}", f"{(i + 1) / n:.9f}"])
    return summary_path
