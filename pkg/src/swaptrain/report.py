"""Experiment matrix: model x bandwidth x approach, as plot-ready CSV rows."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

from .decentral_sim import DEVICE_CLASSES, model_config, ring_allreduce_time
from .graph_core import (GPT3_CONFIGS, INF, CalibrationProfile, default_calibration, format_bandwidth,
                         network_for, parse_bandwidth, synth_gpt3_graph, total_param_bytes)
from .partitioner import plan_for
from .pipeline_baselines import PipelineConfig, optimal_stage_split, simulate_gpipe, simulate_pipedream
from .swap_scheduler import RESIDENT_SEGMENTS, build_schedule, per_result_time, utilization

APPROACHES = ("swap", "gpipe", "pipedream")
DEFAULT_BANDWIDTHS = (400e6, 800e6, INF)


class ExperimentError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    models: Tuple[str, ...] = tuple(GPT3_CONFIGS)
    device: str = "high"
    bandwidths: Tuple[float, ...] = DEFAULT_BANDWIDTHS
    approaches: Tuple[str, ...] = APPROACHES
    devices: int = 4  # GPUs per approach (pipeline stages / swap replicas)
    microbatches: int = 4
    steps: int = 8
    iterations: int = 3
    global_batch: int = 256
    seed: int = 0

    def validate(self) -> "ExperimentSpec":
        for m in self.models:
            try:
                model_config(m)
            except ValueError as exc:
                raise ExperimentError(str(exc)) from None
        if self.device not in DEVICE_CLASSES:
            raise ExperimentError(f"unknown device class {self.device!r}")
        for a in self.approaches:
            if a not in APPROACHES:
                raise ExperimentError(f"unknown approach {a!r}")
        for b in self.bandwidths:
            if not b > 0:
                raise ExperimentError("bandwidths must be > 0 or inf")
        for name in ("devices", "microbatches", "steps", "iterations", "global_batch"):
            if getattr(self, name) < 1:
                raise ExperimentError(f"{name} must be >= 1")
        return self


def spec_from_dict(d: dict) -> ExperimentSpec:
    kw = dict(d)
    if "models" in kw:
        kw["models"] = tuple(kw["models"])
    if "bandwidths" in kw:
        kw["bandwidths"] = tuple(parse_bandwidth(str(b)) for b in kw["bandwidths"])
    if "approaches" in kw:
        kw["approaches"] = tuple("swap" if a == "atom" else a for a in kw["approaches"])
    try:
        return ExperimentSpec(**kw).validate()
    except TypeError as exc:
        raise ExperimentError(f"bad experiment spec: {exc}") from None


def load_spec(path) -> ExperimentSpec:
    with open(path, encoding="utf-8") as fh:
        return spec_from_dict(json.load(fh))


ROW_FIELDS = ("model", "bandwidth", "approach", "devices", "per_result_time_us", "utilization",
              "ratio_vs_swap", "global_batch_time_us", "allreduce_us", "status")


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.6f}"
    return str(v)


def run_model(spec: ExperimentSpec, model: str, calib: Optional[CalibrationProfile] = None) -> List[Dict]:
    """All bandwidth x approach cells for one model."""
    dc = DEVICE_CLASSES[spec.device]
    calib = calib or default_calibration()
    g = synth_gpt3_graph(model_config(model), calib.scaled(dc.compute_scale))
    rows = []
    swap_prt = None
    swap_util = None
    stages = None
    model_bytes = total_param_bytes(g)
    if "swap" in spec.approaches or len(spec.approaches) > 1:
        plan = plan_for(g, dc.capacity // RESIDENT_SEGMENTS)
        tl = build_schedule(plan, g, spec.iterations, device_capacity=dc.capacity,
                            evict_ratio=calib.evict_ratio)
        swap_prt, swap_util = per_result_time(tl), utilization(tl)
    if any(a != "swap" for a in spec.approaches):
        stages = tuple(optimal_stage_split(g, spec.devices, dc.capacity))
    for bw in spec.bandwidths:
        net = network_for(bw)
        for a in spec.approaches:
            if a == "swap":
                prt, util = swap_prt, swap_util
                ar = ring_allreduce_time(model_bytes, spec.devices, net.effective_bandwidth, net.per_message_latency)
            else:
                cfg = PipelineConfig(stages, spec.devices, spec.microbatches, net)
                sim = simulate_gpipe if a == "gpipe" else simulate_pipedream
                tl = sim(cfg, g, spec.steps)
                prt, util = per_result_time(tl), utilization(tl)
                ar = 0  # one pipeline spans every device; nothing to synchronize
            rows.append({
                "model": model, "bandwidth": format_bandwidth(bw), "approach": a, "devices": spec.devices,
                "per_result_time_us": prt, "utilization": util,
                "ratio_vs_swap": prt / swap_prt if swap_prt else float("nan"),
                "global_batch_time_us": prt * spec.global_batch / spec.devices + ar,
                "allreduce_us": ar, "status": "ok",
            })
    return rows


def run_matrix(spec: ExperimentSpec, calib: Optional[CalibrationProfile] = None) -> Tuple[List[Dict], int]:
    """Returns rows and the number of failed models (their cells carry an error status)."""
    spec.validate()
    rows, failed = [], 0
    for model in spec.models:
        try:
            rows += run_model(spec, model, calib)
        except ValueError as exc:
            failed += 1
            for bw in spec.bandwidths:
                for a in spec.approaches:
                    rows.append({"model": model, "bandwidth": format_bandwidth(bw), "approach": a,
                                 "devices": spec.devices, "per_result_time_us": float("nan"),
                                 "utilization": float("nan"), "ratio_vs_swap": float("nan"),
                                 "global_batch_time_us": float("nan"), "allreduce_us": float("nan"),
                                 "status": "error: " + str(exc).replace(",", ";")})
    return rows, failed


def comparison_table(rows: Sequence[Dict]) -> List[Dict]:
    """One line per (model, bandwidth) with the three approaches side by side."""
    cells: Dict[Tuple[str, str], Dict] = {}
    order = []
    for r in rows:
        key = (r["model"], r["bandwidth"])
        if key not in cells:
            cells[key] = {"model": key[0], "bandwidth": key[1]}
            order.append(key)
        a = r["approach"]
        cells[key][f"{a}_per_result_us"] = r["per_result_time_us"]
        cells[key][f"{a}_utilization"] = r["utilization"]
        if a != "swap":
            cells[key][f"{a}_ratio"] = r["ratio_vs_swap"]
    return [cells[k] for k in order]


def write_csv(path, rows: Sequence[Dict], fields: Optional[Sequence[str]] = None) -> None:
    if fields is None:
        fields = []
        for r in rows:
            fields += [k for k in r if k not in fields]
    lines = [",".join(fields)] + [",".join(_fmt(r.get(f, "")) for f in fields) for r in rows]
    tmp = f"{path}.tmp"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)
