"""Single-device execute/transfer timeline for layer-wise swapping.

Two lanes per device. The exec lane runs segment forwards (C micro-batches
each, back to back) then segment backwards in reverse order. The transfer lane
carries loads and evictions; a segment's successor in exec order is prefetched
the moment the segment starts executing. Loads always win the transfer lane:
write-back evictions only fill the gaps between loads and get split around them.

Forward evictions are plain drops (weights are unchanged, nothing to copy back)
so they show up as zero-length events. Backward evictions write gradients back
and cost ``evict_ratio * t_load``.
"""

from __future__ import annotations

import enum
import math
import os
from collections import deque
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from .graph_core import ComputationGraph, graph_tag
from .partitioner import PartitionPlan, segment_compute, segment_load, segment_mem

# Up to three segments share the device: the executing one, its prefetched
# successor, and a predecessor still writing gradients back.
RESIDENT_SEGMENTS = 3


class ScheduleError(ValueError):
    pass


class CapacityViolated(ScheduleError):
    pass


class PlanInfeasible(ScheduleError):
    pass


class NoCompleteIteration(ScheduleError):
    pass


class EventKind(str, enum.Enum):
    EXEC_FWD = "exec_fwd"
    EXEC_BWD = "exec_bwd"
    LOAD = "load"
    EVICT = "evict"
    TRANSMIT = "transmit"
    IDLE = "idle"


EXEC_KINDS = (EventKind.EXEC_FWD, EventKind.EXEC_BWD)
TRANSFER_KINDS = (EventKind.LOAD, EventKind.EVICT)


@dataclass(frozen=True)
class TimelineEvent:
    device_id: int
    kind: EventKind
    segment: int
    microbatch: Optional[int]
    t_start: int
    t_end: int
    iteration: int = 0
    nbytes: int = 0  # payload of transmit events

    @property
    def duration(self) -> int:
        return self.t_end - self.t_start

    @property
    def lane(self) -> str:
        if self.kind in EXEC_KINDS or self.kind is EventKind.IDLE:
            return "exec"
        if self.kind in TRANSFER_KINDS:
            return "transfer"
        return "link"


@dataclass(frozen=True)
class Timeline:
    events: Tuple[TimelineEvent, ...]
    iterations: int
    capacity: float
    devices: int = 1
    minibatches: int = 0  # results produced over the whole run
    approach: str = "swap"
    peak_memory: int = 0
    # instance tag so comparisons can refuse unrelated timelines
    instance: str = ""

    def of_kind(self, *kinds) -> List[TimelineEvent]:
        return [e for e in self.events if e.kind in kinds]

    def device_events(self, device_id: int) -> List[TimelineEvent]:
        return [e for e in self.events if e.device_id == device_id]


# ------------------------------------------------------------- construction


def _check_plan(plan: PartitionPlan, g: ComputationGraph):
    segs = plan.segments
    if not segs:
        raise PlanInfeasible("plan has no segments")
    if segs[0].start != 0 or segs[-1].end != len(g.nodes) - 1:
        raise PlanInfeasible(f"plan covers {segs[0].start}..{segs[-1].end}, graph has {len(g.nodes)} nodes")
    for a, b in zip(segs, segs[1:]):
        if b.start != a.end + 1:
            raise PlanInfeasible(f"segments {a} and {b} are not contiguous")
    if plan.accumulation_C < 1:
        raise PlanInfeasible("accumulation factor must be >= 1")


class _TransferLane:
    """Loads preempt write-backs; write-backs drain FIFO in whatever lane time is left."""

    def __init__(self, device_id: int, windows: List[List]):
        self.t = 0  # lane allocated up to here
        self.pending: deque = deque()  # [release, segment, remaining, iteration, window]
        self.events: List[TimelineEvent] = []
        self.device_id = device_id
        self.windows = windows

    def _piece(self, seg, it, s, e):
        self.events.append(TimelineEvent(self.device_id, EventKind.EVICT, seg, None, s, e, it))

    def write_back(self, release, seg, work, it, window):
        if work == 0:
            self._piece(seg, it, release, release)
            self.windows[window][1] = release
        else:
            self.pending.append([release, seg, work, it, window])

    def drain_until(self, t):
        while self.pending:
            head = self.pending[0]
            s = max(self.t, head[0])
            if s >= t:
                return
            run = min(head[2], t - s)
            self._piece(head[1], head[3], s, s + run)
            head[2] -= run
            self.t = s + run
            if head[2] == 0:
                self.windows[head[4]][1] = self.t
                self.pending.popleft()

    def drain_one(self):
        head = self.pending[0]
        self.drain_until(max(self.t, head[0]) + head[2])

    def cancel(self, seg) -> Optional[int]:
        """Drop a pending write-back of ``seg``; returns its residency window."""
        for p in self.pending:
            if p[1] == seg:
                self.pending.remove(p)
                return p[4]
        return None

    def pending_mem(self, mem) -> int:
        return sum(mem[p[1]] for p in self.pending)

    def load(self, release, dur, seg, it):
        s = max(self.t, release)
        self.t = s + dur
        self.events.append(TimelineEvent(self.device_id, EventKind.LOAD, seg, None, s, s + dur, it))
        return s, s + dur


def build_schedule(plan: PartitionPlan, g: ComputationGraph, iterations: int, *,
                   device_capacity: Optional[float] = None, evict_ratio: float = 1.0,
                   split_backward: bool = False, device_id: int = 0) -> Timeline:
    """Lay out ``iterations`` training iterations of ``plan`` on one device.

    ``device_capacity`` defaults to ``RESIDENT_SEGMENTS`` times the plan's
    per-segment budget. A prefetch that would overflow the device waits for
    pending write-backs to finish first.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    _check_plan(plan, g)
    cap = RESIDENT_SEGMENTS * plan.gpu_capacity if device_capacity is None else device_capacity
    segs = plan.segments
    n = len(segs)
    C = plan.accumulation_C
    mem = [segment_mem(g, s) for s in segs]
    for i, m in enumerate(mem):
        if m > cap:
            raise PlanInfeasible(f"segment {i} needs {m} MiB, device has {cap}")
    fwd = [segment_compute(g, s, "fwd") for s in segs]
    bwd = [segment_compute(g, s, "bwd") for s in segs]
    load = [segment_load(g, s) for s in segs]
    wb = [int(round(evict_ratio * x)) for x in load]

    # exec order: (iteration, phase, segment)
    order = []
    for it in range(iterations):
        order += [(it, "f", k) for k in range(n)]
        order += [(it, "b", k) for k in reversed(range(n))]

    # residency windows [start, end); end stays None while resident
    windows: List[List] = []
    open_win: Dict[int, int] = {}
    lane = _TransferLane(device_id, windows)
    ready: Dict[int, int] = {}  # resident segment -> load completion

    def fetch(seg, release, it):
        lane.drain_until(release)
        # still mid write-back: the device copy is current, so keep it instead of reloading
        back = lane.cancel(seg)
        if back is not None:
            ready[seg] = release
            open_win[seg] = back
            windows[back][1] = None
            return
        while sum(mem[r] for r in ready) + lane.pending_mem(mem) + mem[seg] > cap:
            if not lane.pending:
                raise CapacityViolated(f"segment {seg} ({mem[seg]} MiB) does not fit beside resident "
                                       f"segments {sorted(ready)} in {cap} MiB")
            lane.drain_one()
        ls, le = lane.load(release, load[seg], seg, it)
        ready[seg] = le
        open_win[seg] = len(windows)
        windows.append([ls, None, mem[seg]])

    events: List[TimelineEvent] = []
    fetch(0, 0, 0)
    exec_free = 0
    for idx, (it, ph, k) in enumerate(order):
        start = max(exec_free, ready[k])
        if idx + 1 < len(order):
            nit, _, nk = order[idx + 1]
            if nk not in ready:
                fetch(nk, start, nit)
        t = start
        if ph == "f":
            for m in range(C):
                events.append(TimelineEvent(device_id, EventKind.EXEC_FWD, k, m, t, t + fwd[k], it))
                t += fwd[k]
        elif split_backward:
            for m in range(C):
                events.append(TimelineEvent(device_id, EventKind.EXEC_BWD, k, m, t, t + bwd[k], it))
                t += bwd[k]
        else:
            events.append(TimelineEvent(device_id, EventKind.EXEC_BWD, k, None, t, t + C * bwd[k], it))
            t += C * bwd[k]
        exec_free = t
        # last forward segment and first backward segment stay for reuse
        if ph == "f" and k != n - 1:
            events.append(TimelineEvent(device_id, EventKind.EVICT, k, None, t, t, it))
            del ready[k]
            windows[open_win.pop(k)][1] = t
        elif ph == "b" and k != 0:
            del ready[k]
            lane.write_back(t, k, wb[k], it, open_win.pop(k))
    lane.drain_until(math.inf)

    events.extend(lane.events)
    events = _with_idle(events, device_id)
    events.sort(key=_event_key)
    horizon = max(e.t_end for e in events) + 1
    peak = _peak_residency([(a, horizon if b is None else b, m) for a, b, m in windows])
    if peak > cap:  # pragma: no cover - fetch() already gates every load
        raise CapacityViolated(f"peak residency {peak} MiB exceeds device capacity {cap} MiB")
    return Timeline(tuple(events), iterations, cap, 1, iterations * C, "swap", peak, graph_tag(g))


def _event_key(e: TimelineEvent):
    return (e.device_id, e.t_start, e.t_end, e.kind.value, e.segment, -1 if e.microbatch is None else e.microbatch)


def _with_idle(events: List[TimelineEvent], device_id: int) -> List[TimelineEvent]:
    execs = sorted((e for e in events if e.kind in EXEC_KINDS), key=lambda e: e.t_start)
    out = list(events)
    prev = 0
    for e in execs:
        if e.t_start > prev:
            out.append(TimelineEvent(device_id, EventKind.IDLE, e.segment, None, prev, e.t_start, e.iteration))
        prev = max(prev, e.t_end)
    return out


def _peak_residency(windows: Sequence[Tuple[int, int, int]]) -> int:
    """Max concurrent memory over half-open [start, end) residency windows."""
    deltas = []
    for s, e, m in windows:
        deltas.append((s, 1, m))
        deltas.append((e, 0, -m))
    peak = cur = 0
    for _, _, d in sorted(deltas):
        cur += d
        peak = max(peak, cur)
    return peak


# ------------------------------------------------------------------ metrics


def _execs(tl: Timeline) -> List[TimelineEvent]:
    return sorted(tl.of_kind(*EXEC_KINDS), key=lambda e: (e.device_id, e.t_start))


def exec_span(tl: Timeline) -> int:
    ex = _execs(tl)
    if not ex:
        return 0
    return max(e.t_end for e in ex) - min(e.t_start for e in ex)


def utilization(tl: Timeline) -> float:
    """Exec-lane busy fraction from the first execution on (cold load excluded)."""
    ex = _execs(tl)
    span = exec_span(tl)
    if not ex or span == 0:
        return 0.0
    busy = sum(e.duration for e in ex)
    return min(1.0, busy / (span * tl.devices))


def per_result_time(tl: Timeline, plan: Optional[PartitionPlan] = None) -> float:
    """Device-µs per mini-batch result over the measured span."""
    if tl.minibatches <= 0 or not _execs(tl):
        raise NoCompleteIteration("timeline holds no completed iteration")
    return exec_span(tl) * tl.devices / tl.minibatches


def idle_gaps(tl: Timeline, device_id: int = 0) -> List[Tuple[TimelineEvent, int]]:
    """(exec event, idle gap before it) pairs, skipping the first execution."""
    ex = [e for e in _execs(tl) if e.device_id == device_id]
    out = []
    for prev, cur in zip(ex, ex[1:]):
        out.append((cur, max(0, cur.t_start - prev.t_end)))
    return out


def forward_idle(tl: Timeline, device_id: int = 0) -> int:
    return sum(gap for e, gap in idle_gaps(tl, device_id) if e.kind is EventKind.EXEC_FWD)


def idle_total(tl: Timeline) -> int:
    devs = sorted({e.device_id for e in tl.events if e.kind in EXEC_KINDS})
    return sum(gap for d in devs for _, gap in idle_gaps(tl, d))


def summarize(tl: Timeline) -> Dict[str, object]:
    return {
        "approach": tl.approach,
        "devices": tl.devices,
        "iterations": tl.iterations,
        "minibatches": tl.minibatches,
        "span_us": exec_span(tl),
        "utilization": round(utilization(tl), 6),
        "per_result_time_us": round(per_result_time(tl), 3),
        "idle_total_us": idle_total(tl),
        "peak_memory_mib": tl.peak_memory,
    }


# ------------------------------------------------------------------- export

TRACE_HEADER = "device_id,kind,segment,microbatch,t_start,t_end"


def trace_lines(tl: Timeline) -> List[str]:
    lines = [TRACE_HEADER]
    for e in tl.events:
        mb = "" if e.microbatch is None else str(e.microbatch)
        lines.append(f"{e.device_id},{e.kind.value},{e.segment},{mb},{e.t_start},{e.t_end}")
    return lines


def _atomic_write(path, text: str):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_trace(tl: Timeline, path) -> None:
    _atomic_write(path, "\n".join(trace_lines(tl)) + "\n")


def write_summary(tl: Timeline, path) -> None:
    rec = summarize(tl)
    _atomic_write(path, "\n".join(f"{k}={v}" for k, v in rec.items()) + "\n")


def read_trace(path) -> List[TimelineEvent]:
    out = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != TRACE_HEADER:
            raise ValueError(f"unexpected trace header {header!r}")
        for line in fh:
            d, k, s, m, a, b = line.rstrip("\n").split(",")
            out.append(TimelineEvent(int(d), EventKind(k), int(s), None if m == "" else int(m), int(a), int(b)))
    return out
