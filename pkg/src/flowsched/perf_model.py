"""Piecewise application-performance predictors and cost conversion.

Each model predicts normalised application performance (1.0 = baseline) from
the round-trip latency in microseconds between a job's root task and one of
its workers: performance is exactly 1 below a per-model threshold, follows a
fitted polynomial up to ``domain_max_us``, and is held at the polynomial's
value at ``domain_max_us`` beyond that (the smallest defined value).

Predictions are consumed by the scheduler through a table discretised in
10us steps; arc costs are the rounded inverse performance scaled by 100.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

STEP_US = 10.0


@dataclass(frozen=True)
class PerfModel:
    name: str
    threshold_us: float
    # polynomial coefficients over latency in us, constant term first
    coefficients: Sequence[float]
    domain_max_us: float = 1000.0

    def __post_init__(self):
        if self.threshold_us < 0:
            raise ValueError("threshold_us must be >= 0")
        if self.domain_max_us <= self.threshold_us:
            raise ValueError("domain_max_us must exceed threshold_us")
        if not 1 <= len(self.coefficients) <= 4:
            raise ValueError("expected 1..4 polynomial coefficients")

    @property
    def floor(self) -> float:
        """Performance used beyond domain_max_us (smallest defined value)."""
        return _poly(self.coefficients, self.domain_max_us)


def _poly(coeffs: Sequence[float], x: float) -> float:
    acc = 0.0
    for c in reversed(coeffs):
        acc = acc * x + c
    return acc


def eval_perf(model: PerfModel, latency_us: float) -> float:
    """Predicted performance at a latency; 1 below threshold, floored past the domain."""
    if latency_us < 0:
        raise ValueError("latency must be >= 0")
    if latency_us < model.threshold_us:
        return 1.0
    if latency_us > model.domain_max_us:
        return model.floor
    return _poly(model.coefficients, latency_us)


@dataclass
class DiscretizedTable:
    """Per-model lookup table at 10us steps, queried by nearest step.

    Queries round to the nearest step (exact 5us offsets round up) and clamp
    to the last entry beyond the table, which holds the model floor.
    """

    model: PerfModel
    entries: np.ndarray = field(init=False)

    def __post_init__(self):
        n = int(round(self.model.domain_max_us / STEP_US))
        self.entries = np.array(
            [eval_perf(self.model, k * STEP_US) for k in range(n + 1)], dtype=np.float64
        )

    def lookup(self, latency_us: float) -> float:
        if latency_us < 0:
            raise ValueError("latency must be >= 0")
        k = int(math.floor(latency_us / STEP_US + 0.5))
        return float(self.entries[min(k, len(self.entries) - 1)])

    def lookup_vec(self, latency_us: np.ndarray) -> np.ndarray:
        k = np.floor(latency_us / STEP_US + 0.5).astype(np.int64)
        np.clip(k, 0, len(self.entries) - 1, out=k)
        return self.entries[k]


def discretize(model: PerfModel) -> DiscretizedTable:
    return DiscretizedTable(model)


def perf_to_cost(performance: float) -> int:
    """Integer arc cost: 1/performance rounded to two decimals, times 100.

    Implemented as round-half-up of 100/performance, which is the same
    number (100 and 1000 for performances 1.0 and 0.1).
    """
    if performance <= 0:
        raise ValueError("performance must be > 0")
    return int(math.floor(100.0 / performance + 0.5))


def perf_to_cost_vec(performance: np.ndarray) -> np.ndarray:
    if np.any(performance <= 0):
        raise ValueError("performance must be > 0")
    return np.floor(100.0 / performance + 0.5).astype(np.int64)


# Fitted predictors. Latency ranges and shapes follow the measured curves for
# a key-value store and three ML frameworks; all are defined up to 1000us.
BUILTIN_MODELS: Dict[str, PerfModel] = {
    m.name: m
    for m in [
        PerfModel("memcached", 40.0, (1.067, -3.093e-3, 4.084e-6, -1.898e-9)),
        PerfModel("strads", 20.0, (1.009, -2.095e-3, 2.571e-6, -1.232e-9)),
        PerfModel("spark", 200.0, (1.0199, -1.161e-4)),
        PerfModel("tensorflow", 40.0, (1.005, -5.146e-4, 5.837e-7, -3.46e-10)),
    ]
}


def max_placement_cost(models: Sequence[PerfModel]) -> int:
    """Largest arc cost any of these models can produce (cost at the floor)."""
    return max(perf_to_cost(m.floor) for m in models)


def load_models(path: str) -> Dict[str, PerfModel]:
    """Load user-supplied predictors from a plain-text file.

    One record per line: ``name threshold_us domain_max_us c0 [c1 [c2 [c3]]]``,
    whitespace-separated. Blank lines and lines starting with '#' are skipped.
    """
    models: Dict[str, PerfModel] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 4 or len(parts) > 7:
                raise ValueError(f"{path}:{lineno}: expected 4..7 fields, got {len(parts)}")
            name = parts[0]
            try:
                threshold = float(parts[1])
                domain_max = float(parts[2])
                coeffs: List[float] = [float(p) for p in parts[3:]]
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
            if name in models:
                raise ValueError(f"{path}:{lineno}: duplicate model name {name!r}")
            models[name] = PerfModel(name, threshold, tuple(coeffs), domain_max)
    if not models:
        raise ValueError(f"{path}: no model records found")
    return models
