"""GPipe and PipeDream (1F1B) cost-model simulators.

Each stage is one device. Stage compute per micro-batch is the sum of its
nodes' forward (backward) times. Activations go downstream and gradients go
upstream over per-boundary FIFO channels, one per direction, each message
costing ``transmission_time`` of the boundary payload. Gradients are assumed
the same size as the activations they belong to.

Both simulators use the same engine: every device walks a fixed op list and
each op starts once the device is free and its input has arrived.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .graph_core import ComputationGraph, NetworkModel, graph_tag, transmission_time, validate_graph
from .partitioner import Segment, segment_compute, segment_mem
from .swap_scheduler import (EventKind, Timeline, TimelineEvent, per_result_time,
                             utilization)


class Infeasible(ValueError):
    pass


class MismatchedInstance(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    stages: Tuple[Segment, ...]
    devices: int
    microbatches_per_step: int = 4
    net: NetworkModel = field(default_factory=NetworkModel.localhost)

    def validate(self, g: ComputationGraph) -> "PipelineConfig":
        if not self.stages:
            raise Infeasible("pipeline has no stages")
        if self.devices != len(self.stages):
            raise Infeasible(f"{self.devices} devices for {len(self.stages)} stages")
        if self.microbatches_per_step < 1:
            raise Infeasible("microbatches_per_step must be >= 1")
        if self.stages[0].start != 0 or self.stages[-1].end != len(g.nodes) - 1:
            raise Infeasible("stages do not cover the graph")
        for a, b in zip(self.stages, self.stages[1:]):
            if b.start != a.end + 1:
                raise Infeasible(f"stages {a} and {b} are not contiguous")
        return self


# ------------------------------------------------------------ stage split


def _stage_cost(g, s, e):
    seg = Segment(s, e)
    return segment_compute(g, seg, "fwd") + segment_compute(g, seg, "bwd")


def optimal_stage_split(g: ComputationGraph, devices: int, capacity: float = math.inf) -> List[Segment]:
    """Contiguous split with minimal boundary bytes, then minimal max stage compute.

    Remaining ties go to the smallest boundary tuple. Two DP passes: the first
    finds the min cut, the second bisects the compute ceiling that still
    reaches it.
    """
    if devices < 1:
        raise Infeasible("devices must be >= 1")
    validate_graph(g)
    if not g.is_chain():
        raise Infeasible("stage split needs a chain graph")
    n = len(g.nodes)
    if devices > n:
        raise Infeasible(f"{devices} devices but only {n} nodes")
    mem_pre = [0]
    cost_pre = [0]
    for node in g.nodes:
        mem_pre.append(mem_pre[-1] + node.mem_peak)
        cost_pre.append(cost_pre[-1] + node.t_fwd + node.t_bwd)
    out = [node.output_bytes for node in g.nodes]

    def solve(ceiling):
        # best[k][i]: first i nodes in k stages -> (cut, boundaries)
        best = [dict() for _ in range(devices + 1)]
        best[0][0] = (0, ())
        for k in range(1, devices + 1):
            lo, hi = k, n - (devices - k)
            for i in range(lo, hi + 1):
                cand = None
                for j in range(k - 1, i):
                    prev = best[k - 1].get(j)
                    if prev is None:
                        continue
                    if mem_pre[i] - mem_pre[j] > capacity or cost_pre[i] - cost_pre[j] > ceiling:
                        continue
                    if j == 0:
                        val = (0, ())
                    else:
                        val = (prev[0] + out[j - 1], prev[1] + (j - 1,))
                    if cand is None or val < cand:
                        cand = val
                if cand is not None:
                    best[k][i] = cand
        return best[devices].get(n)

    top = solve(math.inf)
    if top is None:
        raise Infeasible(f"no {devices}-stage split fits {capacity} MiB per device")
    ceilings = sorted({cost_pre[i] - cost_pre[j] for j in range(n) for i in range(j + 1, n + 1)})
    lo, hi = 0, len(ceilings) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        r = solve(ceilings[mid])
        if r is not None and r[0] == top[0]:
            hi = mid
        else:
            lo = mid + 1
    cut, bounds = solve(ceilings[lo])
    starts = [0] + [b + 1 for b in bounds]
    ends = list(bounds) + [n - 1]
    return [Segment(s, e) for s, e in zip(starts, ends)]


def brute_force_stage_split(g: ComputationGraph, devices: int, capacity: float = math.inf) -> List[Segment]:
    """Enumerate every contiguous split; reference for small graphs."""
    import itertools

    n = len(g.nodes)
    if devices < 1 or devices > n:
        raise Infeasible("bad device count")
    best = None
    for bounds in itertools.combinations(range(n - 1), devices - 1):
        starts = [0] + [b + 1 for b in bounds]
        ends = list(bounds) + [n - 1]
        segs = [Segment(s, e) for s, e in zip(starts, ends)]
        if any(segment_mem(g, s) > capacity for s in segs):
            continue
        key = (sum(g.nodes[b].output_bytes for b in bounds),
               max(_stage_cost(g, s.start, s.end) for s in segs), bounds)
        if best is None or key < best[0]:
            best = (key, segs)
    if best is None:
        raise Infeasible("no split fits")
    return best[1]


# ------------------------------------------------------------- simulation


def _op_orders(S: int, steps: int, M: int, mode: str) -> List[List[Tuple[str, int]]]:
    orders = []
    for k in range(S):
        ops: List[Tuple[str, int]] = []
        if mode == "gpipe":
            for st in range(steps):
                base = st * M
                ops += [("F", base + m) for m in range(M)]
                ops += [("B", base + m) for m in range(M)]
        else:
            N = steps * M
            warm = min(S - k - 1, N)
            ops += [("F", m) for m in range(warm)]
            for i in range(N - warm):
                ops.append(("F", warm + i))
                ops.append(("B", i))
            ops += [("B", m) for m in range(N - warm, N)]
        orders.append(ops)
    return orders


def _simulate(cfg: PipelineConfig, g: ComputationGraph, steps: int, mode: str) -> Timeline:
    if steps < 1:
        raise Infeasible("steps must be >= 1")
    cfg.validate(g)
    S = cfg.devices
    M = cfg.microbatches_per_step
    F = [segment_compute(g, s, "fwd") for s in cfg.stages]
    B = [segment_compute(g, s, "bwd") for s in cfg.stages]
    payload = [g.nodes[s.end].output_bytes for s in cfg.stages[:-1]]
    tau = [transmission_time(p, cfg.net) for p in payload]
    orders = _op_orders(S, steps, M, mode)

    done: Dict[Tuple[str, int, int], int] = {}  # (op, stage, mb) -> end
    arrive: Dict[Tuple[str, int, int], int] = {}  # (op, stage, mb) -> input arrival
    chan_free = {("F", k): 0 for k in range(S - 1)}
    chan_free.update({("B", k): 0 for k in range(S - 1)})
    dev_free = [0] * S
    pos = [0] * S
    step_of = lambda mb: mb // M  # noqa: E731
    step_end: Dict[int, int] = {}  # step -> time its last backward finished
    bwd_left: Dict[int, int] = {}
    step_last: Dict[int, int] = {}
    events: List[TimelineEvent] = []

    def ready_time(k, op, mb):
        if op == "F":
            if k == 0:
                return 0
            return arrive.get(("F", k, mb))
        if k == S - 1:
            return done.get(("F", k, mb))
        return arrive.get(("B", k, mb))

    remaining = sum(len(o) for o in orders)
    while remaining:
        progressed = False
        for k in range(S):
            while pos[k] < len(orders[k]):
                op, mb = orders[k][pos[k]]
                r = ready_time(k, op, mb)
                if r is None:
                    break
                start = max(dev_free[k], r)
                if mode == "gpipe" and step_of(mb) > 0:
                    prev_end = step_end.get(step_of(mb) - 1)
                    if prev_end is None:
                        break
                    start = max(start, prev_end)
                dur = F[k] if op == "F" else B[k]
                end = start + dur
                kind = EventKind.EXEC_FWD if op == "F" else EventKind.EXEC_BWD
                events.append(TimelineEvent(k, kind, k, mb, start, end, step_of(mb)))
                done[(op, k, mb)] = end
                dev_free[k] = end
                pos[k] += 1
                remaining -= 1
                progressed = True
                # ship the result
                if op == "F" and k < S - 1:
                    ch = ("F", k)
                    ts = max(end, chan_free[ch])
                    te = ts + tau[k]
                    chan_free[ch] = te
                    arrive[("F", k + 1, mb)] = te
                    events.append(TimelineEvent(k, EventKind.TRANSMIT, k, mb, ts, te, step_of(mb), payload[k]))
                elif op == "B" and k > 0:
                    ch = ("B", k - 1)
                    ts = max(end, chan_free[ch])
                    te = ts + tau[k - 1]
                    chan_free[ch] = te
                    arrive[("B", k - 1, mb)] = te
                    events.append(TimelineEvent(k, EventKind.TRANSMIT, k - 1, mb, ts, te, step_of(mb),
                                                payload[k - 1]))
                if op == "B":
                    st = step_of(mb)
                    bwd_left[st] = bwd_left.get(st, S * M) - 1
                    step_last[st] = max(step_last.get(st, 0), end)
                    if bwd_left[st] == 0:
                        step_end[st] = step_last[st]
        if not progressed:  # pragma: no cover - op orders are deadlock free by construction
            raise Infeasible("pipeline schedule deadlocked")

    events = _add_idle(events, S)
    events.sort(key=lambda e: (e.device_id, e.t_start, e.t_end, e.kind.value, e.segment,
                               -1 if e.microbatch is None else e.microbatch))
    peak = max(segment_mem(g, s) for s in cfg.stages)
    return Timeline(tuple(events), steps, math.inf, S, steps * M, mode, peak, graph_tag(g))


def _add_idle(events: List[TimelineEvent], S: int) -> List[TimelineEvent]:
    out = list(events)
    for k in range(S):
        prev = 0
        for e in sorted((e for e in events if e.device_id == k and e.kind in (EventKind.EXEC_FWD, EventKind.EXEC_BWD)),
                        key=lambda e: e.t_start):
            if e.t_start > prev:
                out.append(TimelineEvent(k, EventKind.IDLE, k, None, prev, e.t_start, e.iteration))
            prev = e.t_end
    return out


def simulate_gpipe(cfg: PipelineConfig, g: ComputationGraph, steps: int) -> Timeline:
    """Synchronous pipeline: all forwards, then all backwards, then a barrier, per step."""
    return _simulate(cfg, g, steps, "gpipe")


def simulate_pipedream(cfg: PipelineConfig, g: ComputationGraph, steps: int) -> Timeline:
    """Continuous 1F1B over ``steps * microbatches_per_step`` micro-batches, no flush."""
    return _simulate(cfg, g, steps, "pipedream")


def staleness(tl: Timeline) -> Dict[int, int]:
    """Per stage, the most micro-batches forwarded but not yet backwarded at once.

    This is the number of weight versions a 1F1B stage has to keep around.
    """
    out = {}
    for k in range(tl.devices):
        ev = sorted((e for e in tl.events if e.device_id == k and e.kind in (EventKind.EXEC_FWD, EventKind.EXEC_BWD)),
                    key=lambda e: e.t_start)
        cur = peak = 0
        for e in ev:
            cur += 1 if e.kind is EventKind.EXEC_FWD else -1
            peak = max(peak, cur)
        out[k] = peak
    return out


def transmitted_bytes(tl: Timeline) -> int:
    return sum(e.nbytes for e in tl.events if e.kind is EventKind.TRANSMIT)


# -------------------------------------------------------------- comparison


@dataclass(frozen=True)
class Comparison:
    per_result: Dict[str, float]
    utilization: Dict[str, float]
    ratios: Dict[str, float]  # baseline per_result / swap per_result


def compare(swap_tl: Timeline, gpipe_tl: Timeline, pipedream_tl: Timeline) -> Comparison:
    tags = {t.instance for t in (swap_tl, gpipe_tl, pipedream_tl) if t.instance}
    if len(tags) > 1:
        raise MismatchedInstance(f"timelines come from different graphs: {sorted(tags)}")
    named = {"swap": swap_tl, "gpipe": gpipe_tl, "pipedream": pipedream_tl}
    prt = {k: per_result_time(v) for k, v in named.items()}
    util = {k: utilization(v) for k, v in named.items()}
    ratios = {k: prt[k] / prt["swap"] for k in ("gpipe", "pipedream")}
    return Comparison(prt, util, ratios)
