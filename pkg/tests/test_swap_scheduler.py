import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from helpers import chain
from swaptrain.graph_core import get_config, synth_gpt3_graph
from swaptrain.partitioner import (PartitionPlan, Segment, determine_C, plan_for, segment_mem,
                                   segments_from_boundaries)
from swaptrain.swap_scheduler import (TRACE_HEADER, CapacityViolated, EventKind, NoCompleteIteration,
                                      PlanInfeasible, Timeline, build_schedule, exec_span, forward_idle,
                                      idle_total, per_result_time, read_trace, summarize, utilization,
                                      write_summary, write_trace)

E = EventKind


def mkplan(g, cuts, C, budget):
    return PartitionPlan(segments_from_boundaries(cuts, len(g.nodes)), C, 0, budget)


def execs(tl):
    return sorted(tl.of_kind(E.EXEC_FWD, E.EXEC_BWD), key=lambda e: e.t_start)


# ------------------------------------------------------------------ examples

def test_single_segment():
    g = chain(3, fwd=[3, 4, 5], bwd=[6, 8, 10], load=[7, 7, 7])
    tl = build_schedule(mkplan(g, (), 2, 3), g, 3)
    loads = tl.of_kind(E.LOAD)
    assert [(e.t_start, e.t_end) for e in loads] == [(0, 21)]
    assert idle_total(tl) == 0
    assert utilization(tl) == 1.0
    ex = execs(tl)
    assert all(a.t_end == b.t_start for a, b in zip(ex, ex[1:]))


def two_seg():
    # C * fwd(seg0) == load(seg1) exactly, and backward hides the reload of seg0
    return chain(2, mem=1, fwd=[10, 10], bwd=[20, 20], load=[20, 20])


def test_two_segments_zero_idle_at_equality():
    g = two_seg()
    tl = build_schedule(mkplan(g, (0,), 2, 1), g, 4)
    assert idle_total(tl) == 0
    assert forward_idle(tl) == 0
    assert utilization(tl) == 1.0
    # the transfer lane is busy for the whole of every seg0 forward run
    for f0 in [e for e in tl.of_kind(E.EXEC_FWD) if e.segment == 0 and e.microbatch == 0]:
        ld = [l for l in tl.of_kind(E.LOAD) if l.segment == 1 and l.iteration == f0.iteration]
        assert ld and ld[0].t_start == f0.t_start and ld[0].t_end == f0.t_start + 20


def test_two_segments_one_less_accumulation():
    g = two_seg()
    iters = 4
    tl = build_schedule(mkplan(g, (0,), 1, 1), g, iters)
    # shortfall per iteration: load(seg1) - 1 * fwd(seg0) = 10
    assert forward_idle(tl) == iters * (20 - 10)
    assert idle_total(tl) == iters * 10
    assert utilization(tl) < 1.0


def test_three_segment_hand_trace():
    g = chain(3, mem=1, fwd=[4, 6, 5], bwd=[8, 12, 10], load=[5, 10, 7])
    tl = build_schedule(mkplan(g, (0, 1), 2, 1), g, 1)
    got = {(e.kind.value, e.segment, e.microbatch, e.t_start, e.t_end) for e in tl.events if e.kind is not E.IDLE}
    want = {
        ("load", 0, None, 0, 5),
        ("exec_fwd", 0, 0, 5, 9), ("exec_fwd", 0, 1, 9, 13), ("evict", 0, None, 13, 13),
        ("load", 1, None, 5, 15),
        ("exec_fwd", 1, 0, 15, 21), ("exec_fwd", 1, 1, 21, 27), ("evict", 1, None, 27, 27),
        ("load", 2, None, 15, 22),
        ("exec_fwd", 2, 0, 27, 32), ("exec_fwd", 2, 1, 32, 37),
        ("exec_bwd", 2, None, 37, 57), ("load", 1, None, 37, 47),
        ("exec_bwd", 1, None, 57, 81), ("load", 0, None, 57, 62),
        ("exec_bwd", 0, None, 81, 97),
        ("evict", 2, None, 62, 69), ("evict", 1, None, 81, 91),
    }
    assert got == want
    idle = [(e.t_start, e.t_end) for e in tl.of_kind(E.IDLE)]
    assert idle == [(0, 5), (13, 15)]
    assert exec_span(tl) == 92
    assert per_result_time(tl) == 92 / 2


def test_split_backward_same_span():
    g = chain(3, mem=1, fwd=[4, 6, 5], bwd=[8, 12, 10], load=[5, 10, 7])
    fused = build_schedule(mkplan(g, (0, 1), 2, 1), g, 2)
    split = build_schedule(mkplan(g, (0, 1), 2, 1), g, 2, split_backward=True)
    assert exec_span(fused) == exec_span(split)
    assert len(split.of_kind(E.EXEC_BWD)) == 2 * len(fused.of_kind(E.EXEC_BWD))


def test_per_result_formula_at_zero_idle():
    g = two_seg()
    C = 2
    tl = build_schedule(mkplan(g, (0,), C, 1), g, 3)
    per_iter = sum(C * n.t_fwd + C * n.t_bwd for n in g.nodes)
    assert per_result_time(tl) == per_iter / C


def test_per_result_additive_in_idle():
    g = two_seg()
    tl = build_schedule(mkplan(g, (0,), 1, 1), g, 3)
    busy = sum(e.duration for e in execs(tl))
    assert per_result_time(tl) * tl.minibatches == busy + idle_total(tl)


def test_empty_timeline_metrics():
    tl = Timeline((), 1, 10)
    assert utilization(tl) == 0.0
    with pytest.raises(NoCompleteIteration):
        per_result_time(tl)


def test_bad_plans():
    g = chain(3)
    with pytest.raises(PlanInfeasible):
        build_schedule(PartitionPlan((Segment(0, 1),), 1, 0, 5), g, 1)
    with pytest.raises(PlanInfeasible):
        build_schedule(PartitionPlan((Segment(0, 0), Segment(2, 2)), 1, 0, 5), g, 1)
    with pytest.raises(ValueError):
        build_schedule(mkplan(g, (), 1, 5), g, 0)


def test_capacity_violated():
    g = chain(2, mem=[5, 5])
    with pytest.raises(CapacityViolated):
        build_schedule(mkplan(g, (0,), 1, 5), g, 1, device_capacity=9)
    with pytest.raises(PlanInfeasible):
        build_schedule(mkplan(g, (0,), 1, 5), g, 1, device_capacity=4)


# --------------------------------------------------------------- properties

def random_case(seed):
    rng = random.Random(seed)
    n = rng.randint(1, 9)
    g = chain(n, mem=[rng.randint(1, 5) for _ in range(n)], fwd=[rng.randint(1, 20) for _ in range(n)],
              bwd=[rng.randint(1, 40) for _ in range(n)], load=[rng.randint(0, 60) for _ in range(n)])
    k = rng.randint(0, n - 1)
    cuts = tuple(sorted(rng.sample(range(n - 1), k))) if n > 1 else ()
    segs = segments_from_boundaries(cuts, n)
    budget = max(segment_mem(g, s) for s in segs)
    C = rng.randint(1, 6)
    return g, PartitionPlan(segs, C, 0, budget), rng.randint(1, 4)


def residency_windows(tl):
    """[load start, last evict end before the next load of that segment] per load."""
    horizon = max(e.t_end for e in tl.events) + 1
    out = []
    for seg in {e.segment for e in tl.of_kind(E.LOAD)}:
        loads = sorted((e for e in tl.of_kind(E.LOAD) if e.segment == seg), key=lambda e: e.t_start)
        evicts = [e for e in tl.of_kind(E.EVICT) if e.segment == seg]
        for i, ld in enumerate(loads):
            nxt = loads[i + 1].t_start if i + 1 < len(loads) else math.inf
            ends = [e.t_end for e in evicts if ld.t_end <= e.t_start and e.t_end <= nxt]
            out.append((seg, ld, max(ends) if ends else horizon))
    return out


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_exec_only_inside_residency(seed):
    g, plan, iters = random_case(seed)
    tl = build_schedule(plan, g, iters)
    wins = residency_windows(tl)
    for e in execs(tl):
        assert any(s == e.segment and ld.t_end <= e.t_start and e.t_end <= end for s, ld, end in wins), e


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_no_reload_before_write_back_finishes(seed):
    g, plan, iters = random_case(seed)
    tl = build_schedule(plan, g, iters)
    for ld in tl.of_kind(E.LOAD):
        older = [e for e in tl.of_kind(E.EVICT) if e.segment == ld.segment and e.t_end > ld.t_start]
        assert all(e.t_start >= ld.t_end for e in older), ld


def test_pending_write_back_is_cancelled_on_reuse():
    # seg1's write-back (60 us) cannot finish before the next iteration wants seg1 back
    g = chain(3, mem=1, fwd=[30, 5, 5], bwd=[5, 5, 5], load=[1, 60, 1])
    tl = build_schedule(mkplan(g, (0, 1), 2, 1), g, 2)
    loads1 = [e for e in tl.of_kind(E.LOAD) if e.segment == 1]
    evicts1 = [e for e in tl.of_kind(E.EVICT) if e.segment == 1 and e.duration]
    assert len(loads1) >= 1
    assert all(e.t_start >= loads1[0].t_end for e in evicts1)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_memory_ceiling(seed):
    g, plan, iters = random_case(seed)
    tl = build_schedule(plan, g, iters)
    mem = [segment_mem(g, s) for s in plan.segments]
    points = []
    for seg, ld, end in residency_windows(tl):
        points += [(ld.t_start, 1, mem[seg]), (end, 0, -mem[seg])]
    cur = peak = 0
    for _, _, d in sorted(points):
        cur += d
        peak = max(peak, cur)
    assert peak <= tl.capacity
    assert tl.peak_memory <= tl.capacity


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_lanes_do_not_overlap(seed):
    g, plan, iters = random_case(seed)
    tl = build_schedule(plan, g, iters)
    for kinds in ((E.EXEC_FWD, E.EXEC_BWD), (E.LOAD, E.EVICT)):
        evs = sorted((e for e in tl.of_kind(*kinds) if e.duration), key=lambda e: e.t_start)
        assert all(a.t_end <= b.t_start for a, b in zip(evs, evs[1:]))
    assert all(e.t_end >= e.t_start for e in tl.events)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_locality(seed):
    g, plan, iters = random_case(seed)
    tl = build_schedule(plan, g, iters)
    n = len(plan.segments)
    last = n - 1
    for it in range(iters):
        f = max(e.t_end for e in tl.of_kind(E.EXEC_FWD) if e.segment == last and e.iteration == it)
        b = min(e.t_start for e in tl.of_kind(E.EXEC_BWD) if e.segment == last and e.iteration == it)
        assert not [e for e in tl.of_kind(E.EVICT, E.LOAD) if e.segment == last and f <= e.t_start and e.t_end <= b
                    and e.duration]
        assert not [e for e in tl.of_kind(E.EVICT) if e.segment == last and e.iteration == it and e.t_start < b]
    # seg 0 stays resident from its backward into the next forward: no forward-phase reload
    for it in range(1, iters):
        b0 = max(e.t_end for e in tl.of_kind(E.EXEC_BWD) if e.segment == 0 and e.iteration == it - 1)
        f0 = min(e.t_start for e in tl.of_kind(E.EXEC_FWD) if e.segment == 0 and e.iteration == it)
        assert not [e for e in tl.of_kind(E.LOAD, E.EVICT) if e.segment == 0 and b0 <= e.t_start <= f0]
    if n == 1:
        assert len(tl.of_kind(E.LOAD)) == 1


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_deterministic(seed):
    g, plan, iters = random_case(seed)
    a, b = build_schedule(plan, g, iters), build_schedule(plan, g, iters)
    assert a == b
    assert exec_span(a) == exec_span(b)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_determine_C_gives_zero_forward_idle(seed):
    g, plan, iters = random_case(seed)
    C = determine_C(g, plan.boundaries, c_max=10**6)
    tl = build_schedule(plan.with_C(C), g, iters)
    assert forward_idle(tl) == 0


# ------------------------------------------------------------- GPT configs

@pytest.mark.parametrize("name", ["small", "medium", "xl", "175b"])
def test_gpt_zero_forward_idle_and_C_minus_one(name):
    cfg = get_config(name)
    from swaptrain.graph_core import eval_config
    g = synth_gpt3_graph(eval_config(name))
    plan = plan_for(g, 9000)
    tl = build_schedule(plan, g, 3)
    assert forward_idle(tl) == 0
    if plan.accumulation_C > 1:
        assert forward_idle(build_schedule(plan.with_C(plan.accumulation_C - 1), g, 3)) > 0


# ----------------------------------------------------------------- export

def test_trace_round_trip(tmp_path):
    g = chain(3, mem=1, fwd=[4, 6, 5], bwd=[8, 12, 10], load=[5, 10, 7])
    tl = build_schedule(mkplan(g, (0, 1), 2, 1), g, 2)
    p = tmp_path / "trace.csv"
    write_trace(tl, p)
    lines = p.read_text().splitlines()
    assert lines[0] == TRACE_HEADER
    back = read_trace(p)
    key = lambda e: (e.device_id, e.kind, e.segment, e.microbatch, e.t_start, e.t_end)
    assert [key(e) for e in back] == [key(e) for e in tl.events]
    s = tmp_path / "summary.txt"
    write_summary(tl, s)
    kv = dict(line.split("=", 1) for line in s.read_text().splitlines())
    assert float(kv["per_result_time_us"]) == pytest.approx(summarize(tl)["per_result_time_us"])
    assert int(kv["idle_total_us"]) == idle_total(tl)
