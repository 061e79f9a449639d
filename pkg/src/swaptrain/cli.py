"""Command-line entry point.

    swaptrain profile   --model 175b --blocks 2 --out g.csv
    swaptrain partition --profile g.csv --capacity 10922 --out plan.txt
    swaptrain schedule  --profile g.csv --manifest plan.txt --out trace/
    swaptrain simulate  --scenario cluster.json --out metrics/
    swaptrain compare   --out results/

Exit status: 0 ok, 1 infeasible or other domain error, 2 usage or parse error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from typing import List, Optional

from . import decentral_sim as ds
from .graph_core import (GPT3_CONFIGS, CalibrationProfile, ParseError, default_calibration, get_config,
                         parse_bandwidth, read_calibration, read_profile_file, synth_gpt3_graph,
                         write_profile_file)
from .partitioner import PartitionError, plan_for, read_manifest, write_manifest
from .report import APPROACHES, ROW_FIELDS, ExperimentSpec, comparison_table, load_spec, run_matrix, write_csv
from .swap_scheduler import build_schedule, write_summary, write_trace

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _bandwidth(text: str) -> float:
    try:
        return parse_bandwidth(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _bandwidth_text(text: str) -> str:
    _bandwidth(text)
    return text


def _capacity(text: str):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError("capacity must be > 0")
    return int(v) if v.is_integer() else v


def _calibration(args) -> CalibrationProfile:
    if getattr(args, "calibration", None):
        return read_calibration(args.calibration)
    return default_calibration()


def _say(msg: str):
    print(msg, file=sys.stderr)


# ------------------------------------------------------------------ commands


def cmd_profile(args) -> int:
    cfg = get_config(args.model, args.blocks)
    g = synth_gpt3_graph(cfg, _calibration(args))
    write_profile_file(g, args.out)
    _say(f"{cfg.name}: {len(g.nodes)} nodes, {cfg.n_blocks} blocks, "
         f"boundary payload {cfg.activation_payload_mib:g} MiB -> {args.out}")
    return EXIT_OK


def cmd_partition(args) -> int:
    g = read_profile_file(args.profile)
    plan = plan_for(g, args.capacity, C=args.C, step_size=args.step_size,
                    block_pruning=not args.no_pruning, c_max=args.c_max)
    write_manifest(g, plan, args.out)
    _say(f"{len(plan.segments)} segments, C={plan.accumulation_C}, cut {plan.cut_bytes} bytes -> {args.out}")
    return EXIT_OK


def cmd_schedule(args) -> int:
    g = read_profile_file(args.profile)
    if args.manifest:
        plan = read_manifest(args.manifest)
    elif args.capacity is not None:
        plan = plan_for(g, args.capacity, C=args.C, step_size=args.step_size)
    else:
        raise UsageError("schedule needs --manifest or --capacity")
    if args.C is not None and args.manifest:
        plan = plan.with_C(args.C)
    tl = build_schedule(plan, g, args.iterations, device_capacity=args.device_capacity,
                        evict_ratio=_calibration(args).evict_ratio, split_backward=args.split_backward)
    os.makedirs(args.out, exist_ok=True)
    write_trace(tl, os.path.join(args.out, "trace.csv"))
    write_summary(tl, os.path.join(args.out, "summary.txt"))
    _say(f"{len(tl.events)} events -> {args.out}")
    return EXIT_OK


def _scenario(args) -> ds.ClusterScenario:
    if args.scenario:
        try:
            with open(args.scenario, encoding="utf-8") as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{args.scenario}: {exc}") from None
    else:
        d = {"peers": ds.standard_cluster(args.peers_per_class, args.uplink)}
    if args.model:
        d["model"] = args.model
    if args.rounds is not None:
        d["rounds"] = args.rounds
    if args.seed is not None:
        d["seed"] = args.seed
    if args.fail:
        # spread failures over distinct peers, one heartbeat apart, from --fail-at on
        ids = [p.peer_id for p in ds.scenario_from_dict(d).peers]
        d.setdefault("churn", [])
        for i in range(args.fail):
            d["churn"].append({"time_us": args.fail_at + i * ds.DEFAULT_HEARTBEAT_US,
                               "peer_id": ids[i % len(ids)], "action": "fail"})
    return ds.scenario_from_dict(d)


def cmd_simulate(args) -> int:
    sc = _scenario(args)
    try:
        m = ds.run(sc)
        status = EXIT_OK
    except ds.Deadlock as exc:
        _say(f"error: {exc}")
        m, status = exc.metrics, EXIT_DOMAIN
    paths = ds.write_metrics(m, args.out)
    s = m.summary()
    _say(f"{s['rounds_completed']} rounds, {s['wall_per_global_batch_us']} us per global batch, "
          f"ledger balanced={bool(s['balanced'])} -> {', '.join(os.path.basename(p) for p in paths)}")
    return status


def _experiment(args) -> ExperimentSpec:
    if args.spec:
        spec = load_spec(args.spec)
    else:
        spec = ExperimentSpec()
    over = {}
    if args.models:
        over["models"] = tuple(args.models)
    if args.bandwidth:
        over["bandwidths"] = tuple(args.bandwidth)
    if args.approaches:
        over["approaches"] = tuple("swap" if a == "atom" else a for a in args.approaches)
    if args.steps is not None:
        over["steps"] = args.steps
    if args.device:
        over["device"] = args.device
    if args.seed is not None:
        over["seed"] = args.seed
    return replace(spec, **over).validate()


def cmd_compare(args) -> int:
    spec = _experiment(args)
    rows, failed = run_matrix(spec, _calibration(args))
    os.makedirs(args.out, exist_ok=True)
    write_csv(os.path.join(args.out, "matrix.csv"), rows, ROW_FIELDS)
    table = comparison_table(rows)
    write_csv(os.path.join(args.out, "comparison.csv"), table)
    for r in table:
        ratios = " ".join(f"{a}={r[f'{a}_ratio']:.2f}x" for a in ("gpipe", "pipedream") if f"{a}_ratio" in r)
        print(f"{r['model']:>8} {r['bandwidth']:>8} {ratios}")
    if failed:
        _say(f"error: {failed} model(s) failed; see status column")
        return EXIT_DOMAIN
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="swaptrain", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    def calib(p):
        p.add_argument("--calibration", help="calibration file (default: $SWAPTRAIN_CALIBRATION)")

    p = sub.add_parser("profile", help="write a synthetic GPT-3 profile")
    p.add_argument("--model", required=True, help=f"one of {', '.join(GPT3_CONFIGS)}")
    p.add_argument("--blocks", type=int, help="override the transformer block count")
    p.add_argument("--out", required=True)
    calib(p)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("partition", help="search sub-model partitions and write a manifest")
    p.add_argument("--profile", required=True)
    p.add_argument("--capacity", type=_capacity, required=True, help="per-segment GPU budget, MiB")
    p.add_argument("-C", "--accumulation", dest="C", type=int, help="accumulation factor (default: derived)")
    p.add_argument("--step-size", type=int, default=1)
    p.add_argument("--c-max", type=int, default=64)
    p.add_argument("--no-pruning", action="store_true", help="search without the repeated-block shortcut")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("schedule", help="build a single-device swap timeline")
    p.add_argument("--profile", required=True)
    p.add_argument("--manifest")
    p.add_argument("--capacity", type=_capacity, help="per-segment budget when no manifest is given")
    p.add_argument("-C", "--accumulation", dest="C", type=int)
    p.add_argument("--step-size", type=int, default=1)
    p.add_argument("--iterations", type=int, default=3)
    p.add_argument("--device-capacity", type=_capacity)
    p.add_argument("--split-backward", action="store_true")
    p.add_argument("--out", required=True)
    calib(p)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("simulate", help="run a decentralized cluster scenario")
    p.add_argument("--scenario", help="scenario JSON (default: 4 high + 4 medium + 4 low peers)")
    p.add_argument("--model")
    p.add_argument("--rounds", type=int)
    p.add_argument("--peers-per-class", type=int, default=4)
    p.add_argument("--uplink", default="800mbps", type=_bandwidth_text)
    p.add_argument("--fail", type=int, default=0, help="number of peers to fail")
    p.add_argument("--fail-at", type=int, default=20_000_000, help="first failure time, us")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="run the model x bandwidth x approach matrix")
    p.add_argument("--spec", help="experiment JSON")
    p.add_argument("--models", nargs="+")
    p.add_argument("--bandwidth", nargs="+", type=_bandwidth, help="e.g. 400mbps 800mbps inf")
    p.add_argument("--approaches", nargs="+", choices=APPROACHES + ("atom",))
    p.add_argument("--device", choices=sorted(ds.DEVICE_CLASSES))
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    calib(p)
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)  # exits 2 on usage errors
    try:
        return args.func(args)
    except (UsageError, ParseError, json.JSONDecodeError) as exc:
        _say(f"error: {exc}")
        return EXIT_USAGE
    except (ValueError, PartitionError, OSError) as exc:
        _say(f"error: {exc}")
        return EXIT_DOMAIN


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
