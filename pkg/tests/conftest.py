import numpy as np
import pytest

from flowsched.latency import LatencyProvider, TierSynthParams, TierTraces, assign_pairs
from flowsched.topology import build_topology


@pytest.fixture
def small_topo():
    # 8 machines, 4 per rack, 2 racks per pod -> 2 racks, 1 pod
    return build_topology(8, 4, 2, 2)


def constant_traces(rack=20.0, pod=80.0, interpod=200.0, length=600, per_tier=2):
    return TierTraces(
        rack=[np.full(length, rack) for _ in range(per_tier)],
        pod=[np.full(length, pod) for _ in range(per_tier)],
        interpod=[np.full(length, interpod) for _ in range(per_tier)],
    )


def manual_provider(n_machines, traces_2d, trace_idx, coeff=None, same_machine_us=5.0):
    """Provider with explicit per-pair wiring, for constructed scenarios."""
    traces_2d = np.asarray(traces_2d, dtype=np.float64)
    n = n_machines
    if coeff is None:
        coeff = np.ones((n, n))
    return LatencyProvider(
        traces_2d,
        np.asarray(trace_idx, dtype=np.int32),
        np.asarray(coeff, dtype=np.float64),
        {i: i for i in range(n)},
        same_machine_us=same_machine_us,
    )


@pytest.fixture
def small_provider(small_topo):
    return assign_pairs(small_topo, constant_traces(), seed=11)
