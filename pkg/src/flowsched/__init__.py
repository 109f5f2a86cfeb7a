"""Flow-network cluster scheduling simulator.

Simulates task placement on a rack/pod cluster driven by per-second RTT
traces. Placement policies are expressed as costs on a min-cost max-flow
network (tasks, aggregators, machines, sink); the bundled latency-aware
policy places each job's worker tasks relative to its root task using
application performance predictions.
"""

__version__ = "0.1.0"

from .topology import ClusterTopology, Tier, build_topology
from .perf_model import (
    BUILTIN_MODELS,
    DiscretizedTable,
    PerfModel,
    eval_perf,
    load_models,
    perf_to_cost,
)
from .latency import LatencyProvider, TierSynthParams, assign_pairs, load_traces, synth_traces
from .flow_network import FlowNetwork, VertexKind, build_skeleton
from .mcmf import FlowSolution, SchedulingDelta, extract_placements, solve
from .policies import NoMoraParams, TaskState
from .sim import JobSpec, SimConfig, Simulator, convert_google_trace, run, synth_workload
from .metrics import MetricsBundle, cdf_area, summarize
