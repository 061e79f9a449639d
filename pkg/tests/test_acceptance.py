"""Acceptance criteria, one test each.

Every test records a ``PASS``/``FAIL`` line; the lines are printed in the
pytest terminal summary, or directly when this file is run as a script.
"""

import math
import os
import random
import sys
import tempfile
import time

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from helpers import chain  # noqa: E402
from swaptrain import decentral_sim as ds  # noqa: E402
from swaptrain.cli import main  # noqa: E402
from swaptrain.graph_core import (GPT3_CONFIGS, MIB, LayerKind, eval_config, read_profile_file,  # noqa: E402
                                  synth_gpt3_graph)
from swaptrain.partitioner import (NoFeasiblePartition, SearchParams, brute_force_partitions,  # noqa: E402
                                   partition_model, plan_for)
from swaptrain.report import ExperimentSpec, run_matrix  # noqa: E402
from swaptrain.swap_scheduler import build_schedule, forward_idle  # noqa: E402

RESULTS = []


def record(n, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} [{n}] {title}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


_MATRIX = {}


def matrix():
    if "rows" not in _MATRIX:
        t0 = time.perf_counter()
        rows, failed = run_matrix(ExperimentSpec())
        _MATRIX.update(rows=rows, failed=failed, secs=time.perf_counter() - t0)
    return _MATRIX["rows"]


def cell(rows, model, bw, approach):
    return next(r for r in rows if r["model"] == model and r["bandwidth"] == bw and r["approach"] == approach)


# 1 ------------------------------------------------------------------------
def test_1_payload_exactness():
    want = {"small": 6, "medium": 8, "large": 12, "xl": 16, "2.7b": 20, "6.7b": 32, "13b": 40, "175b": 96}
    got = {}
    t0 = time.perf_counter()
    with tempfile.TemporaryDirectory() as d:
        for name in GPT3_CONFIGS:
            out = os.path.join(d, f"{name}.csv")
            assert main(["profile", "--model", name, "--out", out]) == 0
            g = read_profile_file(out)
            payload = {n.output_bytes for n in g.nodes if n.kind is LayerKind.DROPOUT}
            assert len(payload) == 1
            b = payload.pop()
            got[name] = b // MIB if b % MIB == 0 else b / MIB
    secs = time.perf_counter() - t0
    ok = got == want and secs < 1.0
    record(1, "payload exactness", ok, f"{sorted(got.values())} MiB in {secs:.2f}s (limit 1s)")


# 2 ------------------------------------------------------------------------
def test_2_partitioner_oracle_equivalence():
    rng = random.Random(2)
    t0 = time.perf_counter()
    total = agree = 0
    while total < 250:
        n = rng.randint(1, 12)
        g = chain(n, mem=[rng.randint(1, 8) for _ in range(n)], fwd=[rng.randint(0, 20) for _ in range(n)],
                  bwd=[rng.randint(0, 40) for _ in range(n)], load=[rng.randint(0, 60) for _ in range(n)],
                  out=[rng.randint(1, 5) * 1000 for _ in range(n)])
        p = SearchParams(rng.randint(4, 30), accumulation_C=rng.randint(1, 8))
        try:
            got = {pl.boundaries for pl in partition_model(g, p)}
        except NoFeasiblePartition:
            got = set()
        want = {pl.boundaries for pl in brute_force_partitions(g, p)}
        total += 1
        agree += got == want
    secs = time.perf_counter() - t0
    ok = agree == total >= 200 and secs < 30
    record(2, "partitioner oracle equivalence", ok, f"{agree}/{total} instances agree in {secs:.2f}s (limit 30s)")


# 3 ------------------------------------------------------------------------
def test_3_zero_idle_overlap():
    budget = 9000
    bad = []
    notes = []
    for name in GPT3_CONFIGS:
        g = synth_gpt3_graph(eval_config(name))
        plan = plan_for(g, budget)
        idle = forward_idle(build_schedule(plan, g, 3))
        if plan.accumulation_C > 1:
            less = forward_idle(build_schedule(plan.with_C(plan.accumulation_C - 1), g, 3))
        else:
            less = None
        notes.append(f"{name}:C={plan.accumulation_C}")
        if idle != 0 or less is None or less <= 0:
            bad.append(f"{name}(idle={idle}, C-1 idle={less})")
    record(3, "zero-idle overlap", not bad,
           ("all 8 configs: idle 0 at C, >0 at C-1 [" + " ".join(notes) + "]") if not bad else "; ".join(bad))


# 4 ------------------------------------------------------------------------
def test_4_utilization_ordering():
    rows = matrix()
    u = {a: cell(rows, "175b", "inf", a)["utilization"] for a in ("swap", "pipedream", "gpipe")}
    bands = u["swap"] >= 0.85 and 0.30 <= u["pipedream"] <= 0.60 and 0.10 <= u["gpipe"] <= 0.30
    broken = []
    for name in GPT3_CONFIGS:
        for bw in ("400mbps", "800mbps", "inf"):
            s, p, g = (cell(rows, name, bw, a)["utilization"] for a in ("swap", "pipedream", "gpipe"))
            if not s > p > g:
                broken.append(f"{name}@{bw}")
    ok = bands and not broken
    record(4, "utilization ordering", ok,
           f"175B(2) localhost swap={u['swap']:.3f} pipedream={u['pipedream']:.3f} gpipe={u['gpipe']:.3f}; "
           f"ordering broken in {broken or 'no cell'}")


# 5 ------------------------------------------------------------------------
def test_5_bandwidth_sensitivity():
    rows = matrix()
    bws = ("400mbps", "800mbps", "inf")
    problems = []
    max_ratio = 0.0
    for name in GPT3_CONFIGS:
        swap = [cell(rows, name, bw, "swap")["per_result_time_us"] for bw in bws]
        if len(set(swap)) != 1:
            problems.append(f"{name} swap varies")
        for a in ("gpipe", "pipedream"):
            prt = [cell(rows, name, bw, a)["per_result_time_us"] for bw in bws]
            if not prt[0] > prt[1] > prt[2]:
                problems.append(f"{name} {a} not strictly decreasing")
            r400 = cell(rows, name, "400mbps", a)["ratio_vs_swap"]
            rinf = cell(rows, name, "inf", a)["ratio_vs_swap"]
            if not r400 > rinf:
                problems.append(f"{name} {a} ratio 400mbps <= inf")
            max_ratio = max(max_ratio, *(cell(rows, name, bw, a)["ratio_vs_swap"] for bw in bws))
    if max_ratio < 10:
        problems.append(f"max ratio {max_ratio:.2f} < 10")
    record(5, "bandwidth sensitivity", not problems,
           f"max ratio {max_ratio:.2f}x; " + ("; ".join(problems) if problems else "all monotonicity checks hold"))


# 6 ------------------------------------------------------------------------
def test_6_allreduce_trigger_and_scaling():
    sc = ds.scenario_from_dict({"peers": ds.standard_cluster(4)})
    m = ds.run(sc)
    peers = len(sc.peers)
    per_peer = max(p.bound for p in m.peers)
    limit = sc.global_batch + peers * per_peer
    trig_ok = all(sc.global_batch <= r.visible_sum < limit and r.prev_visible_sum < sc.global_batch
                  for r in m.rounds) and len(m.rounds) == sc.rounds
    sums = [r.visible_sum for r in m.rounds]
    model_bytes = 10 * 2**30
    t4 = ds.ring_allreduce_time(model_bytes, 4, 800e6)
    t12 = ds.ring_allreduce_time(model_bytes, 12, 800e6)
    growth = t12 / t4 - 1
    scale_ok = growth < 0.15
    record(6, "allreduce trigger and scaling", trig_ok and scale_ok,
           f"trigger sums {sums} within [256, {limit}) -> {'ok' if trig_ok else 'violated'}; "
           f"ring time 4->12 peers grows {growth * 100:.1f}% (limit 15%)")


# 7 ------------------------------------------------------------------------
def test_7_churn_tolerance():
    base = ds.run(ds.scenario_from_dict({"peers": ds.standard_cluster(4)}))
    parts = []
    ok = base.balanced
    for k in (2, 4):
        ids = ["high0", "medium0", "low0", "high1"][:k]
        churn = [{"time_us": 20_000_000 + i * ds.DEFAULT_HEARTBEAT_US, "peer_id": p, "action": "fail"}
                 for i, p in enumerate(ids)]
        sc = ds.scenario_from_dict({"peers": ds.standard_cluster(4), "churn": churn})
        m = ds.run(sc)
        slower = m.wall_per_global_batch() > base.wall_per_global_batch()
        good = m.completed and len(m.rounds) == sc.rounds and m.balanced and slower
        ok = ok and good
        parts.append(f"{k} fails: {len(m.rounds)}/{sc.rounds} rounds, balanced={m.balanced}, lost={m.lost}, "
                     f"{m.wall_per_global_batch() / 1e6:.2f}s vs {base.wall_per_global_batch() / 1e6:.2f}s per batch")
    record(7, "churn tolerance", ok, "; ".join(parts))


# 8 ------------------------------------------------------------------------
def test_8_determinism():
    args = ["simulate", "--rounds", "3", "--fail", "2", "--fail-at", "8000000", "--seed", "11"]
    with tempfile.TemporaryDirectory() as d:
        outs = []
        for tag in ("a", "b"):
            out = os.path.join(d, tag)
            assert main(args + ["--out", out]) == 0
            outs.append({f: open(os.path.join(out, f), "rb").read() for f in sorted(os.listdir(out))})
    same = outs[0] == outs[1]
    record(8, "determinism", same, f"{len(outs[0])} metrics files {'byte-identical' if same else 'differ'}")


if __name__ == "__main__":
    failed = 0
    for name, fn in sorted((k, v) for k, v in globals().items() if k.startswith("test_")):
        try:
            fn()
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
