"""Per-machine-pair RTT traces: loading, synthesis, and time-indexed queries.

Latency is modelled symmetric per unordered machine pair. Every pair is
assigned one trace from its tier (same rack / same pod / across pods) in
round-robin order plus a fixed scale coefficient drawn uniformly from the
tier's range; pairs on the same machine use a small constant. Traces carry
one RTT sample in microseconds per simulated second.

The cost model asks for the maximum latency observed over a trailing window
(the path actually taken is unknown, so the conservative estimate is used);
those rolling maxima are precomputed per trace and cached per window.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .topology import ClusterTopology, Tier

log = logging.getLogger(__name__)

TIER_ORDER = ("rack", "pod", "interpod")
TIER_CODE = {"rack": 0, "pod": 1, "interpod": 2}
# scale coefficient range per tier
COEFF_RANGE = {"rack": (0.5, 1.0), "pod": (0.8, 1.2), "interpod": (0.8, 1.2)}

DEFAULT_SAME_MACHINE_US = 5.0


@dataclass
class TierTraces:
    """Latency traces grouped by tier; every tier must be non-empty."""

    rack: List[np.ndarray]
    pod: List[np.ndarray]
    interpod: List[np.ndarray]

    def __post_init__(self):
        for tier in TIER_ORDER:
            traces = getattr(self, tier)
            if not traces:
                raise ValueError(f"tier {tier!r} has no traces")
            for tr in traces:
                if len(tr) == 0 or np.any(np.asarray(tr) <= 0):
                    raise ValueError(f"tier {tier!r} contains a non-positive sample")

    def by_tier(self, tier: str) -> List[np.ndarray]:
        return getattr(self, tier)


def load_traces(manifest_path: str) -> TierTraces:
    """Load traces listed in a manifest of ``<tier> <path>`` lines.

    Trace files hold one RTT-in-us value per line, one value per simulated
    second. Paths are resolved relative to the manifest's directory.
    """
    import os

    tiers: Dict[str, List[np.ndarray]] = {t: [] for t in TIER_ORDER}
    base = os.path.dirname(os.path.abspath(manifest_path))
    with open(manifest_path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{manifest_path}:{lineno}: expected '<tier> <path>'")
            tier, path = parts
            if tier not in TIER_CODE:
                raise ValueError(
                    f"{manifest_path}:{lineno}: unknown tier {tier!r} (rack|pod|interpod)"
                )
            if not os.path.isabs(path):
                path = os.path.join(base, path)
            tiers[tier].append(_read_trace(path))
    return TierTraces(rack=tiers["rack"], pod=tiers["pod"], interpod=tiers["interpod"])


def _read_trace(path: str) -> np.ndarray:
    values = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                v = float(line)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: not a number: {line!r}") from None
            if v <= 0:
                raise ValueError(f"{path}:{lineno}: RTT samples must be > 0")
            values.append(v)
    if not values:
        raise ValueError(f"{path}: empty trace")
    return np.array(values, dtype=np.float64)


@dataclass(frozen=True)
class TierSynthParams:
    base_us: float
    jitter_us: float
    spike_prob: float
    spike_us: float

    def __post_init__(self):
        if self.base_us <= 0 or self.jitter_us < 0 or self.spike_us <= 0:
            raise ValueError("base/spike must be > 0 and jitter >= 0")
        if not 0.0 <= self.spike_prob <= 1.0:
            raise ValueError("spike_prob must be in [0, 1]")


DEFAULT_SYNTH = {
    "rack": TierSynthParams(20.0, 2.0, 0.01, 600.0),
    "pod": TierSynthParams(80.0, 8.0, 0.01, 600.0),
    "interpod": TierSynthParams(200.0, 20.0, 0.01, 600.0),
}


def synth_traces(
    tier_params: Dict[str, TierSynthParams],
    duration_s: int,
    seed: int,
    traces_per_tier: int = 6,
) -> TierTraces:
    """Generate tiered synthetic traces: base + uniform jitter, rare spikes.

    Each sample is ``base + U(-jitter, jitter)``, replaced by the spike
    magnitude with probability ``spike_prob``. Tier bases must be ordered
    rack < pod < interpod.
    """
    missing = [t for t in TIER_ORDER if t not in tier_params]
    if missing:
        raise ValueError(f"missing tier params: {missing}")
    bases = [tier_params[t].base_us for t in TIER_ORDER]
    if not (bases[0] < bases[1] < bases[2]):
        raise ValueError(f"tier bases must be ordered rack < pod < interpod, got {bases}")
    if duration_s < 1 or traces_per_tier < 1:
        raise ValueError("duration_s and traces_per_tier must be >= 1")

    out: Dict[str, List[np.ndarray]] = {}
    for tier in TIER_ORDER:
        p = tier_params[tier]
        traces = []
        for k in range(traces_per_tier):
            rng = np.random.default_rng((seed, TIER_CODE[tier], k))
            samples = p.base_us + rng.uniform(-p.jitter_us, p.jitter_us, duration_s)
            if p.spike_prob > 0:
                spikes = rng.uniform(0.0, 1.0, duration_s) < p.spike_prob
                samples[spikes] = p.spike_us
            np.maximum(samples, 0.1, out=samples)
            traces.append(samples)
        out[tier] = traces
    return TierTraces(rack=out["rack"], pod=out["pod"], interpod=out["interpod"])


class LatencyProvider:
    """Answers RTT queries for any machine pair at any simulated second.

    Built by :func:`assign_pairs` (or directly from explicit matrices in
    tests). Read-only after construction except for machine additions.
    """

    def __init__(
        self,
        traces: np.ndarray,
        trace_idx: np.ndarray,
        coeff: np.ndarray,
        row_of: Dict[int, int],
        same_machine_us: float = DEFAULT_SAME_MACHINE_US,
        wrap: bool = False,
        seed: int = 0,
        tier_counters: Optional[Dict[str, int]] = None,
        tier_slices: Optional[Dict[str, range]] = None,
    ):
        self.traces = np.asarray(traces, dtype=np.float64)  # [n_traces, T]
        if self.traces.ndim != 2:
            raise ValueError("traces must be a 2-d array [trace, second]")
        self.trace_idx = np.asarray(trace_idx, dtype=np.int32)
        self.coeff = np.asarray(coeff, dtype=np.float64)
        self.row_of = dict(row_of)
        self.same_machine_us = float(same_machine_us)
        self.wrap = wrap
        self.seed = seed
        self._tier_counters = dict(tier_counters or {})
        self._tier_slices = dict(tier_slices or {})
        self._rolling: Dict[int, np.ndarray] = {}
        self._warned_wrap = False

    @property
    def length_s(self) -> int:
        return self.traces.shape[1]

    # -- index helpers -------------------------------------------------------

    def _t_index(self, t_seconds: float) -> int:
        ti = int(t_seconds)
        if ti < 0:
            raise ValueError("t_seconds must be >= 0")
        if ti >= self.length_s:
            if not self.wrap:
                raise IndexError(
                    f"t={t_seconds} beyond trace length {self.length_s}s (wrap disabled)"
                )
            if not self._warned_wrap:
                log.warning(
                    "latency trace shorter than query horizon; wrapping modulo %ds",
                    self.length_s,
                )
                self._warned_wrap = True
            ti %= self.length_s
        return ti

    def _rolling_max(self, window: int) -> np.ndarray:
        if window < 1:
            raise ValueError("window must be >= 1")
        cached = self._rolling.get(window)
        if cached is None or cached.shape != self.traces.shape:
            pad = np.full((self.traces.shape[0], window - 1), -np.inf)
            padded = np.concatenate([pad, self.traces], axis=1)
            view = np.lib.stride_tricks.sliding_window_view(padded, window, axis=1)
            cached = view.max(axis=2)
            self._rolling[window] = cached
        return cached

    # -- scalar queries --------------------------------------------------------

    def latency_at(self, a: int, b: int, t_seconds: float) -> float:
        """RTT in us between machines a and b at simulated time t."""
        if a == b:
            return self.same_machine_us
        ti = self._t_index(t_seconds)
        ra, rb = self.row_of[a], self.row_of[b]
        return float(self.traces[self.trace_idx[ra, rb], ti] * self.coeff[ra, rb])

    def max_latency(self, a: int, b: int, t_seconds: float, window_seconds: int = 60) -> float:
        """Maximum RTT over the trailing window ending at t (clipped at start)."""
        if window_seconds < 1:
            raise ValueError("window must be >= 1")
        if a == b:
            return self.same_machine_us
        ti = self._t_index(t_seconds)
        ra, rb = self.row_of[a], self.row_of[b]
        lo = max(0, ti - window_seconds + 1)
        seg = self.traces[self.trace_idx[ra, rb], lo : ti + 1]
        return float(seg.max() * self.coeff[ra, rb])

    # -- vectorised queries (policy/metrics hot path) ---------------------------

    def rows_for(self, machine_ids: np.ndarray) -> np.ndarray:
        """Matrix row indices for a machine-id array (hot paths cache this)."""
        return np.array([self.row_of[int(m)] for m in machine_ids], dtype=np.int64)

    def latency_row(
        self, a: int, machine_ids: np.ndarray, t_seconds: float, rows: Optional[np.ndarray] = None
    ) -> np.ndarray:
        """RTT from machine a to each machine in machine_ids at time t."""
        ti = self._t_index(t_seconds)
        ra = self.row_of[a]
        if rows is None:
            rows = self.rows_for(machine_ids)
        vals = self.traces[self.trace_idx[ra, rows], ti] * self.coeff[ra, rows]
        vals[rows == ra] = self.same_machine_us
        return vals

    def max_latency_row(
        self,
        a: int,
        machine_ids: np.ndarray,
        t_seconds: float,
        window_seconds: int,
        rows: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        ti = self._t_index(t_seconds)
        ra = self.row_of[a]
        rolling = self._rolling_max(window_seconds)
        if rows is None:
            rows = self.rows_for(machine_ids)
        vals = rolling[self.trace_idx[ra, rows], ti] * self.coeff[ra, rows]
        vals[rows == ra] = self.same_machine_us
        return vals

    def series(self, a: int, b: int, t0: int, t1: int) -> np.ndarray:
        """Per-second RTTs for seconds [t0, t1) (used by metrics replay)."""
        if t1 <= t0:
            return np.empty(0)
        if a == b:
            return np.full(t1 - t0, self.same_machine_us)
        idx = np.arange(t0, t1)
        if self.wrap:
            idx = idx % self.length_s
        elif t1 > self.length_s:
            raise IndexError(f"series [{t0},{t1}) beyond trace length {self.length_s}")
        ra, rb = self.row_of[a], self.row_of[b]
        return self.traces[self.trace_idx[ra, rb], idx] * self.coeff[ra, rb]

    # -- machine addition ---------------------------------------------------------

    def extend_for_machine(self, topo: ClusterTopology, new_id: int) -> None:
        """Assign traces/coefficients for all pairs involving a new machine."""
        if new_id in self.row_of:
            return
        n = self.trace_idx.shape[0]
        grown_idx = np.zeros((n + 1, n + 1), dtype=np.int32)
        grown_idx[:n, :n] = self.trace_idx
        grown_coeff = np.ones((n + 1, n + 1), dtype=np.float64)
        grown_coeff[:n, :n] = self.coeff
        self.trace_idx, self.coeff = grown_idx, grown_coeff
        self.row_of[new_id] = n
        for other, row in sorted(self.row_of.items()):
            if other == new_id:
                continue
            tier = _tier_name(topo.tier_of(new_id, other))
            lo, hi = COEFF_RANGE[tier]
            sl = self._tier_slices[tier]
            k = self._tier_counters[tier]
            self._tier_counters[tier] = k + 1
            tidx = sl.start + (k % len(sl))
            a, b = sorted((new_id, other))
            rng = np.random.default_rng((self.seed, 7, TIER_CODE[tier], a, b))
            c = rng.uniform(lo, hi)
            ra, rb = self.row_of[a], self.row_of[b]
            self.trace_idx[ra, rb] = self.trace_idx[rb, ra] = tidx
            self.coeff[ra, rb] = self.coeff[rb, ra] = c

    # -- reproducibility ------------------------------------------------------------

    def serialize(self) -> bytes:
        """Stable byte form of the pair assignment (for determinism checks)."""
        ids = ",".join(str(i) for i in sorted(self.row_of)).encode()
        return b"|".join(
            [ids, self.trace_idx.tobytes(), self.coeff.tobytes(), str(self.seed).encode()]
        )


def _tier_name(tier: Tier) -> str:
    return {Tier.SAME_RACK: "rack", Tier.SAME_POD: "pod", Tier.INTER_POD: "interpod"}[tier]


def assign_pairs(
    topo: ClusterTopology,
    traces: TierTraces,
    seed: int,
    same_machine_us: float = DEFAULT_SAME_MACHINE_US,
    wrap: bool = False,
) -> LatencyProvider:
    """Deterministically assign every unordered machine pair a trace and scale.

    Pairs are enumerated in sorted id order; within each tier, traces cycle
    round-robin and coefficients are drawn uniformly from the tier's range.
    """
    ids = topo.machine_ids()
    n = len(ids)
    if n == 0:
        raise ValueError("topology has no machines")
    if n > 4096:
        log.warning("pair assignment is dense O(n^2); %d machines will be large", n)

    stacked, tier_slices = _stack_traces(traces)
    row_of = {mid: i for i, mid in enumerate(ids)}
    arr = topo.arrays()
    racks = arr.racks
    pods = arr.pods

    iu, ju = np.triu_indices(n, k=1)
    same_rack = racks[iu] == racks[ju]
    same_pod = pods[iu] == pods[ju]
    tier_of_pair = np.where(same_rack, 0, np.where(same_pod, 1, 2))

    trace_idx = np.zeros((n, n), dtype=np.int32)
    coeff = np.ones((n, n), dtype=np.float64)
    counters: Dict[str, int] = {}
    for tier in TIER_ORDER:
        code = TIER_CODE[tier]
        mask = tier_of_pair == code
        k = int(mask.sum())
        counters[tier] = k
        if k == 0:
            continue
        sl = tier_slices[tier]
        tindices = sl.start + (np.arange(k) % len(sl))
        lo, hi = COEFF_RANGE[tier]
        rng = np.random.default_rng((seed, code))
        coeffs = rng.uniform(lo, hi, k)
        pi, pj = iu[mask], ju[mask]
        trace_idx[pi, pj] = tindices
        trace_idx[pj, pi] = tindices
        coeff[pi, pj] = coeffs
        coeff[pj, pi] = coeffs

    return LatencyProvider(
        stacked,
        trace_idx,
        coeff,
        row_of,
        same_machine_us=same_machine_us,
        wrap=wrap,
        seed=seed,
        tier_counters=counters,
        tier_slices=tier_slices,
    )


def _stack_traces(traces: TierTraces):
    """Stack per-tier traces into one matrix, truncated to the shortest."""
    all_traces: List[np.ndarray] = []
    tier_slices: Dict[str, range] = {}
    for tier in TIER_ORDER:
        group = traces.by_tier(tier)
        tier_slices[tier] = range(len(all_traces), len(all_traces) + len(group))
        all_traces.extend(group)
    min_len = min(len(t) for t in all_traces)
    stacked = np.stack([np.asarray(t[:min_len], dtype=np.float64) for t in all_traces])
    return stacked, tier_slices
