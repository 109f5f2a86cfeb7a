"""Command-line front end: run experiments, compare runs, prepare workloads.

Configuration is plain ``key = value`` text mirroring the run parameters;
command-line flags override file values, which override defaults. Every run
directory is self-describing: the resolved configuration (all seeds made
explicit) is echoed to ``resolved_config.txt``, and re-running from that
file reproduces byte-identical metrics under the deterministic coupling
modes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from typing import Dict, List, Optional

from . import metrics as metrics_mod
from . import sim as sim_mod
from .latency import DEFAULT_SYNTH, TierSynthParams, load_traces, synth_traces
from .perf_model import BUILTIN_MODELS, load_models
from .policies import NoMoraParams
from .sim import Dist, SimConfig, convert_google_trace, read_workload, synth_workload, write_workload

DEFAULTS: Dict[str, str] = {
    "policy": "nomora",
    "pm": "105",
    "pr": "110",
    "preemption": "off",
    "beta": "on",
    "omega": "10",
    "gamma": "1001",
    "duration_s": "86400",
    "machines": "96",
    "machines_per_rack": "48",
    "racks_per_pod": "16",
    "cores": "4",
    "workload": "",
    "latency_manifest": "",
    "synth_latency": "off",
    "synth_rack_base_us": "20",
    "synth_rack_jitter_us": "2",
    "synth_rack_spike_prob": "0.01",
    "synth_rack_spike_us": "600",
    "synth_pod_base_us": "80",
    "synth_pod_jitter_us": "8",
    "synth_pod_spike_prob": "0.01",
    "synth_pod_spike_us": "600",
    "synth_interpod_base_us": "200",
    "synth_interpod_jitter_us": "20",
    "synth_interpod_spike_prob": "0.01",
    "synth_interpod_spike_us": "600",
    "synth_traces_per_tier": "6",
    "seed": "1",
    "seed_assignment": "",
    "seed_tiebreak": "",
    "seed_latency": "",
    "coupling": "modeled",
    "modeled_ns_per_op": "100",
    "measurement_interval_s": "1",
    "window_s": "60",
    "same_machine_us": "5",
    "wrap": "off",
    "max_perf_free_slots_only": "off",
    "audit": "off",
    "models_file": "",
    "out": "out",
}

_BOOL = {"on": True, "off": False, "true": True, "false": False, "1": True, "0": False}


def _parse_bool(key: str, value: str) -> bool:
    try:
        return _BOOL[value.lower()]
    except KeyError:
        raise ValueError(f"{key}: expected on/off, got {value!r}") from None


def parse_config_file(path: str) -> Dict[str, str]:
    cfg: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in DEFAULTS:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            cfg[key] = value.strip()
    return cfg


def resolve_config(file_cfg: Dict[str, str], cli_cfg: Dict[str, str]) -> Dict[str, str]:
    """Precedence: CLI flags > config file > defaults; seeds made explicit."""
    cfg = dict(DEFAULTS)
    cfg.update(file_cfg)
    cfg.update({k: v for k, v in cli_cfg.items() if v is not None})
    seed = int(cfg["seed"])
    for i, key in enumerate(("seed_assignment", "seed_tiebreak", "seed_latency"), 1):
        if not cfg[key]:
            cfg[key] = str(seed * 1000 + i)
    return cfg


def write_resolved(cfg: Dict[str, str], outdir: str) -> None:
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "resolved_config.txt"), "w", encoding="utf-8") as f:
        for key in sorted(cfg):
            f.write(f"{key} = {cfg[key]}\n")


def _sim_config(cfg: Dict[str, str]) -> SimConfig:
    params = NoMoraParams(
        p_m=int(cfg["pm"]),
        p_r=int(cfg["pr"]),
        omega=int(cfg["omega"]),
        gamma=int(cfg["gamma"]),
        preemption=_parse_bool("preemption", cfg["preemption"]),
        beta_enabled=_parse_bool("beta", cfg["beta"]),
        window_s=int(cfg["window_s"]),
    )
    return SimConfig(
        machines=int(cfg["machines"]),
        machines_per_rack=int(cfg["machines_per_rack"]),
        racks_per_pod=int(cfg["racks_per_pod"]),
        cores=int(cfg["cores"]),
        duration_s=float(cfg["duration_s"]),
        policy=cfg["policy"],
        params=params,
        measurement_interval_s=float(cfg["measurement_interval_s"]),
        coupling=cfg["coupling"],
        modeled_ns_per_op=float(cfg["modeled_ns_per_op"]),
        seed_assignment=int(cfg["seed_assignment"]),
        seed_tiebreak=int(cfg["seed_tiebreak"]),
        same_machine_us=float(cfg["same_machine_us"]),
        wrap_traces=_parse_bool("wrap", cfg["wrap"]),
        max_perf_free_slots_only=_parse_bool(
            "max_perf_free_slots_only", cfg["max_perf_free_slots_only"]
        ),
        audit=_parse_bool("audit", cfg["audit"]),
    )


def _synth_params(cfg: Dict[str, str]) -> Dict[str, TierSynthParams]:
    out = {}
    for tier in ("rack", "pod", "interpod"):
        out[tier] = TierSynthParams(
            base_us=float(cfg[f"synth_{tier}_base_us"]),
            jitter_us=float(cfg[f"synth_{tier}_jitter_us"]),
            spike_prob=float(cfg[f"synth_{tier}_spike_prob"]),
            spike_us=float(cfg[f"synth_{tier}_spike_us"]),
        )
    return out


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def cmd_run(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    file_cfg = parse_config_file(args.config) if args.config else {}
    cli_cfg = {
        "policy": args.policy,
        "pm": args.pm,
        "pr": args.pr,
        "preemption": args.preemption,
        "beta": args.beta,
        "omega": args.omega,
        "gamma": args.gamma,
        "duration_s": args.duration_s,
        "machines": args.machines,
        "machines_per_rack": args.machines_per_rack,
        "racks_per_pod": args.racks_per_pod,
        "cores": args.cores,
        "workload": args.workload,
        "latency_manifest": args.latency_manifest,
        "synth_latency": "on" if args.synth_latency else None,
        "seed": args.seed,
        "coupling": args.coupling,
        "measurement_interval_s": args.measurement_interval_s,
        "out": args.out,
        "audit": args.audit,
    }
    cfg = resolve_config(file_cfg, cli_cfg)

    if _parse_bool("beta", cfg["beta"]) and args.beta == "on" and not _parse_bool(
        "preemption", cfg["preemption"]
    ):
        parser.error("--beta on requires --preemption on")
    if not cfg["workload"]:
        parser.error("a workload file is required (--workload)")
    if bool(cfg["latency_manifest"]) == _parse_bool("synth_latency", cfg["synth_latency"]):
        parser.error("exactly one of --latency-manifest / --synth-latency must be given")

    workload = read_workload(cfg["workload"])
    sim_cfg = _sim_config(cfg)
    if cfg["latency_manifest"]:
        traces = load_traces(cfg["latency_manifest"])
    else:
        traces = synth_traces(
            _synth_params(cfg),
            duration_s=int(float(cfg["duration_s"])),
            seed=int(cfg["seed_latency"]),
            traces_per_tier=int(cfg["synth_traces_per_tier"]),
        )
    models = dict(BUILTIN_MODELS)
    if cfg["models_file"]:
        models.update(load_models(cfg["models_file"]))

    bundle = sim_mod.run(sim_cfg, workload, traces, models=models)
    outdir = cfg["out"]
    write_resolved(cfg, outdir)
    extra = {"workload_sha256": _sha256(cfg["workload"]), "seed": cfg["seed"]}
    summary_path = metrics_mod.write_outputs(bundle, outdir, extra_meta=extra)
    area = bundle.area_pct
    print(f"run complete: policy={cfg['policy']} out={outdir}")
    print(f"  area={area:.2f}%" if area is not None else "  area=n/a (no scored jobs)")
    print(f"  summary={summary_path}")
    return 0


def _load_summary(run_dir: str) -> dict:
    path = os.path.join(run_dir, "metrics_summary.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing summary file: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _ratio(b: Optional[float], a: Optional[float]) -> Optional[float]:
    if a is None or b is None or a == 0:
        return None
    return b / a


def cmd_compare(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    a = _load_summary(args.dir_a)
    b = _load_summary(args.dir_b)
    workload_match = a.get("meta", {}).get("workload_sha256") == b.get("meta", {}).get(
        "workload_sha256"
    )
    if not workload_match:
        print("warning: runs used different workloads; comparison proceeds", file=sys.stderr)

    report = {
        "dir_a": args.dir_a,
        "dir_b": args.dir_b,
        "policy_a": a.get("meta", {}).get("policy"),
        "policy_b": b.get("meta", {}).get("policy"),
        "workload_match": workload_match,
        # positive delta: a's placement quality area exceeds b's
        "area_delta_pct": (a.get("area_pct") or 0) - (b.get("area_pct") or 0)
        if a.get("area_pct") is not None and b.get("area_pct") is not None
        else None,
        # >1: a improves on b by this factor (b's median over a's)
        "runtime_median_ratio": _ratio(
            b.get("algorithm_runtime_ms", {}).get("median"),
            a.get("algorithm_runtime_ms", {}).get("median"),
        ),
        "placement_latency_median_ratio": _ratio(
            b.get("placement_latency_s", {}).get("median"),
            a.get("placement_latency_s", {}).get("median"),
        ),
    }
    text = [
        f"compare {args.dir_a} (a) vs {args.dir_b} (b)",
        f"  area delta (a-b):            {report['area_delta_pct']}",
        f"  runtime median ratio (b/a):  {report['runtime_median_ratio']}",
        f"  placement median ratio (b/a):{report['placement_latency_median_ratio']}",
        f"  workload match:              {workload_match}",
    ]
    print("\n".join(text))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(report, f, sort_keys=True, indent=2)
            f.write("\n")
    return 0


def _parse_mix(text: str) -> Dict[str, float]:
    mix = {}
    for part in text.split(","):
        name, _, frac = part.partition("=")
        if not frac:
            raise ValueError(f"mix entries look like name=fraction, got {part!r}")
        mix[name.strip()] = float(frac)
    return mix


def cmd_convert(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    jobs = convert_google_trace(
        args.trace,
        mix=_parse_mix(args.mix),
        seed=args.seed,
        window_hours=args.window_hours,
    )
    write_workload(jobs, args.out)
    print(f"converted {len(jobs)} jobs -> {args.out}")
    return 0


def cmd_synth(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    jobs = synth_workload(
        job_count=args.jobs,
        arrival_rate=args.arrival_rate,
        task_count_dist=Dist.parse(args.tasks),
        runtime_dist=Dist.parse(args.runtime),
        mix=_parse_mix(args.mix),
        seed=args.seed,
    )
    write_workload(jobs, args.out)
    print(f"synthesized {len(jobs)} jobs -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowsched",
        description="Flow-network cluster scheduling simulator",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_run = sub.add_parser("run", help="run one experiment")
    p_run.add_argument("--config", help="key = value config file; flags override it")
    p_run.add_argument("--policy", choices=["nomora", "random", "load-spreading"])
    p_run.add_argument("--pm", help="machine preference cost threshold")
    p_run.add_argument("--pr", help="rack preference cost threshold")
    p_run.add_argument("--preemption", choices=["on", "off"])
    p_run.add_argument("--beta", choices=["on", "off"], help="subtract executed time from the keep-arc")
    p_run.add_argument("--omega", help="wait-time cost factor per second")
    p_run.add_argument("--gamma", help="unscheduled base cost")
    p_run.add_argument("--duration-s", dest="duration_s")
    p_run.add_argument("--machines")
    p_run.add_argument("--machines-per-rack", dest="machines_per_rack")
    p_run.add_argument("--racks-per-pod", dest="racks_per_pod")
    p_run.add_argument("--cores")
    p_run.add_argument("--workload", help="workload CSV path")
    p_run.add_argument("--latency-manifest", dest="latency_manifest")
    p_run.add_argument("--synth-latency", action="store_true", default=False)
    p_run.add_argument("--seed")
    p_run.add_argument("--coupling", choices=["zero", "modeled", "measured"])
    p_run.add_argument("--measurement-interval-s", dest="measurement_interval_s")
    p_run.add_argument("--audit", choices=["on", "off"])
    p_run.add_argument("--out")
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="compare two completed run directories")
    p_cmp.add_argument("dir_a")
    p_cmp.add_argument("dir_b")
    p_cmp.add_argument("--out", help="also write the comparison report as JSON")
    p_cmp.set_defaults(func=cmd_compare)

    p_conv = sub.add_parser("convert", help="convert a public-format cluster trace")
    p_conv.add_argument("trace", help="task events CSV(.gz) file or directory")
    p_conv.add_argument("--mix", default="memcached=0.5,strads=0.25,tensorflow=0.25")
    p_conv.add_argument("--seed", type=int, default=1)
    p_conv.add_argument("--window-hours", dest="window_hours", type=float, default=24.0)
    p_conv.add_argument("--out", required=True)
    p_conv.set_defaults(func=cmd_convert)

    p_syn = sub.add_parser("synth", help="generate a synthetic workload CSV")
    p_syn.add_argument("--jobs", type=int, required=True)
    p_syn.add_argument("--arrival-rate", dest="arrival_rate", type=float, required=True)
    p_syn.add_argument("--tasks", default="uniform:2:8", help="task count distribution")
    p_syn.add_argument("--runtime", default="uniform:60:600", help="runtime seconds distribution")
    p_syn.add_argument("--mix", default="memcached=0.5,strads=0.25,tensorflow=0.25")
    p_syn.add_argument("--seed", type=int, default=1)
    p_syn.add_argument("--out", required=True)
    p_syn.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except (ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
