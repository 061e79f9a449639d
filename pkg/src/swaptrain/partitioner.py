"""Sub-model partition search for layer-wise swapping.

A plan cuts a topologically sorted chain into contiguous segments. It is valid
when every segment fits the GPU budget and, for each adjacent pair, the
accumulated forward compute of the current segment covers the load time of
the next one (``C * fwd(cur) >= load(next)``).
"""

from __future__ import annotations

import itertools
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .graph_core import ComputationGraph, ParseError, validate_graph


class PartitionError(ValueError):
    pass


class NoFeasiblePartition(PartitionError):
    pass


class TooLarge(PartitionError):
    pass


class EmptyInput(PartitionError):
    pass


class NoFeasibleC(PartitionError):
    pass


class OutOfBounds(PartitionError):
    pass


@dataclass(frozen=True, order=True)
class Segment:
    start: int
    end: int  # inclusive

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError(f"segment start {self.start} > end {self.end}")

    def __len__(self) -> int:
        return self.end - self.start + 1


@dataclass(frozen=True)
class SearchParams:
    gpu_capacity: float  # MiB per segment, may be math.inf
    step_size: int = 1
    accumulation_C: int = 1
    block_pruning: bool = False
    # (prefix, block_size, block_count); detected from the graph when None
    block_layout: Optional[Tuple[int, int, int]] = None

    def __post_init__(self):
        if self.step_size < 1:
            raise ValueError("step_size must be >= 1")
        if self.accumulation_C < 1:
            raise ValueError("accumulation_C must be >= 1")


@dataclass(frozen=True)
class PartitionPlan:
    segments: Tuple[Segment, ...]
    accumulation_C: int
    cut_bytes: int
    gpu_capacity: float

    @property
    def boundaries(self) -> Tuple[int, ...]:
        """Cut positions: a boundary ``b`` separates node ``b`` from ``b + 1``."""
        return tuple(s.end for s in self.segments[:-1])

    @property
    def num_nodes(self) -> int:
        return self.segments[-1].end + 1

    def with_C(self, C: int) -> "PartitionPlan":
        return PartitionPlan(self.segments, C, self.cut_bytes, self.gpu_capacity)


def segments_from_boundaries(boundaries: Sequence[int], n: int) -> Tuple[Segment, ...]:
    starts = [0] + [b + 1 for b in boundaries]
    ends = list(boundaries) + [n - 1]
    return tuple(Segment(s, e) for s, e in zip(starts, ends))


class _Sums:
    """Prefix sums over the node fields the search needs."""

    def __init__(self, g: ComputationGraph):
        self.n = len(g.nodes)

        def acc(vals):
            return [0] + list(itertools.accumulate(vals))

        self.mem = acc(n.mem_peak for n in g.nodes)
        self.mem_fwd = acc(n.mem_peak_fwd for n in g.nodes)
        self.mem_bwd = acc(n.mem_peak_bwd for n in g.nodes)
        self.fwd = acc(n.t_fwd for n in g.nodes)
        self.bwd = acc(n.t_bwd for n in g.nodes)
        self.load = acc(n.t_load for n in g.nodes)
        self.out = [n.output_bytes for n in g.nodes]

    @staticmethod
    def span(arr, s, e):
        return arr[e + 1] - arr[s]


def _check_seg(g: ComputationGraph, seg: Segment):
    if seg.start < 0 or seg.end >= len(g.nodes):
        raise OutOfBounds(f"segment {seg.start}..{seg.end} outside graph of {len(g.nodes)} nodes")


def segment_mem(g: ComputationGraph, seg: Segment, phase: str = "max") -> int:
    _check_seg(g, seg)
    nodes = g.nodes[seg.start: seg.end + 1]
    if phase == "fwd":
        return sum(n.mem_peak_fwd for n in nodes)
    if phase == "bwd":
        return sum(n.mem_peak_bwd for n in nodes)
    if phase == "max":
        return sum(n.mem_peak for n in nodes)
    raise ValueError(f"unknown phase {phase!r}")


def segment_compute(g: ComputationGraph, seg: Segment, phase: str = "fwd") -> int:
    _check_seg(g, seg)
    nodes = g.nodes[seg.start: seg.end + 1]
    if phase == "fwd":
        return sum(n.t_fwd for n in nodes)
    if phase == "bwd":
        return sum(n.t_bwd for n in nodes)
    raise ValueError(f"unknown phase {phase!r}")


def segment_load(g: ComputationGraph, seg: Segment) -> int:
    _check_seg(g, seg)
    return sum(n.t_load for n in g.nodes[seg.start: seg.end + 1])


def valid_constraints(g: ComputationGraph, c: Segment, d: Segment, p: SearchParams) -> bool:
    return (
        segment_mem(g, c) <= p.gpu_capacity
        and segment_mem(g, d) <= p.gpu_capacity
        and p.accumulation_C * segment_compute(g, c, "fwd") >= segment_load(g, d)
    )


def cut_bytes_of(g: ComputationGraph, boundaries: Sequence[int]) -> int:
    return sum(g.nodes[b].output_bytes for b in boundaries)


def _plan(g, boundaries, p: SearchParams) -> PartitionPlan:
    return PartitionPlan(
        segments_from_boundaries(boundaries, len(g.nodes)),
        p.accumulation_C,
        cut_bytes_of(g, boundaries),
        p.gpu_capacity,
    )


def plan_is_valid(g: ComputationGraph, plan: PartitionPlan, capacity=None, C=None) -> bool:
    """Re-check a plan from scratch, independent of any search state."""
    cap = plan.gpu_capacity if capacity is None else capacity
    C = plan.accumulation_C if C is None else C
    segs = plan.segments
    if segs[0].start != 0 or segs[-1].end != len(g.nodes) - 1:
        return False
    if any(b.start != a.end + 1 for a, b in zip(segs, segs[1:])):
        return False
    if any(segment_mem(g, s) > cap for s in segs):
        return False
    return all(C * segment_compute(g, a, "fwd") >= segment_load(g, b) for a, b in zip(segs, segs[1:]))


# ------------------------------------------------------------ search proper


class _Search:
    """Recursive boundary search with backtracking over (compute, load) windows."""

    def __init__(self, g: ComputationGraph, p: SearchParams):
        self.g, self.p = g, p
        self.s = _Sums(g)
        self.n = len(g.nodes)
        # deepest failure seen: (node index reached, message)
        self.deepest: Tuple[int, str] = (-1, "")

    def seg_ok(self, s, e) -> bool:
        return _Sums.span(self.s.mem, s, e) <= self.p.gpu_capacity

    def valid(self, cs, ce, ls, le) -> bool:
        S, cap, C = self.s, self.p.gpu_capacity, self.p.accumulation_C
        mem_c = S.span(S.mem, cs, ce)
        mem_l = S.span(S.mem, ls, le)
        comp = C * S.span(S.fwd, cs, ce)
        load = S.span(S.load, ls, le)
        if mem_c <= cap and mem_l <= cap and comp >= load:
            return True
        if ls > self.deepest[0]:
            if mem_c > cap:
                why = f"segment {cs}..{ce} needs {mem_c} MiB > capacity {cap}"
            elif mem_l > cap:
                why = f"segment {ls}..{le} needs {mem_l} MiB > capacity {cap}"
            else:
                why = (f"C*fwd({cs}..{ce}) = {C}*{S.span(S.fwd, cs, ce)} us "
                       f"< load({ls}..{le}) = {load} us")
            self.deepest = (ls, why)
        return False

    def run(self) -> List[Tuple[int, ...]]:
        n, step = self.n, self.p.step_size
        found: List[Tuple[int, ...]] = []
        if self.seg_ok(0, n - 1):
            found.append(())
        trail: List[int] = []

        def partition(cs, ce, ls, le):
            if not self.valid(cs, ce, ls, le):
                return
            trail.append(ce)
            if le == n - 1:
                found.append(tuple(trail))
            else:
                # squeeze the next load window from the end of the graph inwards
                for le_hat in range(n - 1, le, -step):
                    partition(ls, le, le + 1, le_hat)
            trail.pop()

        for ce in range(n - 2, -1, -step):
            for le in range(n - 1, ce, -step):
                partition(0, ce, ce + 1, le)
        return found

    def optimum(self) -> Optional[Tuple[int, ...]]:
        """Boundaries of the select_best plan via DP over (segment start, end) windows.

        Plans through a window share their prefix, so comparing completions by
        (cut bytes, segments, boundary tuple) orders whole plans the same way.
        """
        n, S, cap, C = self.n, self.s, self.p.gpu_capacity, self.p.accumulation_C
        ends = {}  # start -> feasible ends of a segment starting there
        for s in range(n):
            ends[s] = [e for e in range(s, n) if _Sums.span(S.mem, s, e) <= cap]
        best: Dict[Tuple[int, int], Tuple[int, int, Tuple[int, ...]]] = {}
        for s in range(n - 1, -1, -1):
            for e in ends[s]:
                if e == n - 1:
                    best[s, e] = (0, 0, ())
                    continue
                comp = C * _Sums.span(S.fwd, s, e)
                cands = [best[e + 1, e2] for e2 in ends[e + 1]
                         if (e + 1, e2) in best and comp >= _Sums.span(S.load, e + 1, e2)]
                if cands:
                    cut, k, tail = min(cands)
                    best[s, e] = (S.out[e] + cut, k + 1, (e,) + tail)
        roots = [best[0, e] for e in ends[0] if (0, e) in best]
        return min(roots)[2] if roots else None

    def check_boundaries(self, bounds: Sequence[int]) -> bool:
        """Full validity check of one candidate, bailing at the first violation."""
        S, cap, C = self.s, self.p.gpu_capacity, self.p.accumulation_C
        mem, fwd, load = S.mem, S.fwd, S.load
        prev_s = 0
        prev_e = None
        for e in list(bounds) + [self.n - 1]:
            s = prev_e + 1 if prev_e is not None else 0
            if mem[e + 1] - mem[s] > cap:
                return False
            if prev_e is not None and C * (fwd[prev_e + 1] - fwd[prev_s]) < load[e + 1] - load[s]:
                return False
            prev_s, prev_e = s, e
        return True


def _signature(node):
    return (node.kind, node.param_count, node.mem_peak_fwd, node.mem_peak_bwd,
            node.t_fwd, node.t_bwd, node.t_load, node.output_bytes)


def detect_blocks(g: ComputationGraph, max_prefix: int = 16, max_block: int = 32):
    """Find ``(prefix, size, count)`` maximizing the nodes covered by identical blocks."""
    sig = [_signature(n) for n in g.nodes]
    n = len(sig)
    best = None
    for size in range(1, min(max_block, n // 2) + 1):
        for prefix in range(0, min(max_prefix, n - 2 * size) + 1):
            count = 1
            while prefix + (count + 1) * size <= n and \
                    sig[prefix + count * size: prefix + (count + 1) * size] == sig[prefix: prefix + size]:
                count += 1
            if count < 2:
                continue
            key = (count * size, -size, -prefix)
            if best is None or key > best[0]:
                best = (key, (prefix, size, count))
    return best[1] if best else None


def _canonical_candidates(n: int, layout: Tuple[int, int, int]):
    """Boundary tuples where one intra-block cut pattern is replicated periodically.

    Cuts inside the prefix/suffix, the edge entering the first block and the
    edge leaving the last block are free; every other cut comes from a pattern
    of block offsets applied to blocks ``j`` with ``(j - phase) % period == 0``.
    """
    prefix, size, count = layout
    region_end = prefix + size * count  # first suffix node
    free = [i for i in range(0, prefix)]  # boundary after node i (i = prefix-1 enters block 0)
    free += [region_end - 1] if region_end - 1 < n - 1 else []
    free += [i for i in range(region_end, n - 1)]
    offsets = range(size)
    block_patterns = [()]
    for r in range(1, size + 1):
        for pat in itertools.combinations(offsets, r):
            for period in range(1, count + 1):
                for phase in range(period):
                    cuts = []
                    for j in range(phase, count, period):
                        base = prefix + j * size
                        for o in pat:
                            b = base + o
                            # the last block's exit edge is one of the free cuts
                            if b != region_end - 1:
                                cuts.append(b)
                    block_patterns.append(tuple(cuts))
    block_patterns = sorted(set(block_patterns))
    free_sets = [c for r in range(len(free) + 1) for c in itertools.combinations(free, r)]
    seen = set()
    for fs in free_sets:
        for bp in block_patterns:
            cand = tuple(sorted(set(fs) | set(bp)))
            if cand not in seen:
                seen.add(cand)
                yield cand


def _diagnose(search: _Search, p: SearchParams) -> str:
    g = search.g
    worst = max(g.nodes, key=lambda n: n.mem_peak)
    if worst.mem_peak > p.gpu_capacity:
        return (f"layer {worst.name!r} (node {worst.node_id}) needs {worst.mem_peak} MiB, "
                f"more than the {p.gpu_capacity} MiB capacity")
    if search.deepest[1]:
        return f"first violated constraint: {search.deepest[1]}"
    return "no partition satisfies the memory and overlap constraints"


def partition_model(g: ComputationGraph, p: SearchParams) -> List[PartitionPlan]:
    """All valid plans, sorted by boundary tuple.

    With ``block_pruning`` only canonical plans are returned: one cut pattern
    replicated over identical blocks, plus the min-cut optimum found by DP so
    that pruning never changes the selected plan.
    """
    validate_graph(g)
    if not g.is_chain():
        raise PartitionError("partition search expects a chain graph")
    search = _Search(g, p)
    layout = p.block_layout or (detect_blocks(g) if p.block_pruning else None)
    if p.block_pruning and layout:
        found = []
        for cand in _canonical_candidates(len(g.nodes), layout):
            if p.step_size > 1 and any((len(g.nodes) - 1 - b) % p.step_size for b in cand):
                continue
            if search.check_boundaries(cand):
                found.append(cand)
        if p.step_size == 1:
            opt = search.optimum()
            if opt is not None:
                found.append(opt)
    else:
        found = search.run()
    if not found:
        raise NoFeasiblePartition(_diagnose(search, p))
    return [_plan(g, b, p) for b in sorted(set(found))]


def brute_force_partitions(g: ComputationGraph, p: SearchParams, max_nodes: int = 20) -> List[PartitionPlan]:
    """Enumerate all 2^(n-1) contiguous splits and keep the valid ones."""
    n = len(g.nodes)
    if n > max_nodes:
        raise TooLarge(f"{n} nodes exceeds the brute-force cap of {max_nodes}")
    out = []
    for mask in range(1 << (n - 1)):
        bounds = tuple(i for i in range(n - 1) if mask >> i & 1)
        segs = segments_from_boundaries(bounds, n)
        if any(segment_mem(g, s) > p.gpu_capacity for s in segs):
            continue
        if all(p.accumulation_C * segment_compute(g, a, "fwd") >= segment_load(g, b)
               for a, b in zip(segs, segs[1:])):
            out.append(_plan(g, bounds, p))
    out.sort(key=lambda pl: pl.boundaries)
    return out


def select_best(plans: Sequence[PartitionPlan]) -> PartitionPlan:
    """Minimum cut bytes, then fewer segments, then smallest boundary tuple."""
    if not plans:
        raise EmptyInput("no plans to choose from")
    return min(plans, key=lambda pl: (pl.cut_bytes, len(pl.segments), pl.boundaries))


def determine_C(g: ComputationGraph, boundaries: Sequence[int], c_max: int = 64) -> int:
    """Smallest accumulation factor letting every segment's forward hide the next load."""
    segs = segments_from_boundaries(boundaries, len(g.nodes))
    C = 1
    for a, b in zip(segs, segs[1:]):
        load = segment_load(g, b)
        if load == 0:
            continue
        comp = segment_compute(g, a, "fwd")
        if comp == 0:
            raise NoFeasibleC(f"segment {a.start}..{a.end} has no forward compute to hide "
                              f"the {load} us load of {b.start}..{b.end}")
        C = max(C, math.ceil(load / comp))
    if C > c_max:
        raise NoFeasibleC(f"accumulation factor {C} exceeds the limit {c_max}")
    return C


def plan_for(g: ComputationGraph, capacity: float, C: Optional[int] = None, step_size: int = 1,
             block_pruning: bool = True, c_max: int = 64) -> PartitionPlan:
    """Search, pick the min-cut plan and settle its accumulation factor.

    Without an explicit ``C`` the search runs at ``c_max`` (the loosest overlap
    constraint) and the chosen plan gets the smallest C that still works.
    """
    p = SearchParams(capacity, step_size, C or c_max, block_pruning)
    best = select_best(partition_model(g, p))
    if C is None:
        best = best.with_C(determine_C(g, best.boundaries, c_max))
    return best


# --------------------------------------------------------------- manifest


def write_manifest(g: ComputationGraph, plan: PartitionPlan, path) -> None:
    lines = [
        "# partition manifest",
        f"capacity_mib={plan.gpu_capacity}",
        f"accumulation_C={plan.accumulation_C}",
        f"cut_bytes={plan.cut_bytes}",
        f"num_segments={len(plan.segments)}",
        "segment,start,end,mem_mib,fwd_us,bwd_us,load_us,nodes",
    ]
    for i, s in enumerate(plan.segments):
        names = ";".join(n.name for n in g.nodes[s.start: s.end + 1])
        lines.append(f"{i},{s.start},{s.end},{segment_mem(g, s)},{segment_compute(g, s, 'fwd')},"
                     f"{segment_compute(g, s, 'bwd')},{segment_load(g, s)},{names}")
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_manifest(path) -> PartitionPlan:
    header: Dict[str, str] = {}
    segs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#") or line.startswith("segment,"):
                continue
            if "=" in line and "," not in line:
                k, _, v = line.partition("=")
                header[k] = v
                continue
            parts = line.split(",")
            try:
                segs.append(Segment(int(parts[1]), int(parts[2])))
            except (IndexError, ValueError):
                raise ParseError(f"bad segment row {line!r}", lineno) from None
    try:
        cap = float(header["capacity_mib"])
        plan = PartitionPlan(tuple(segs), int(header["accumulation_C"]), int(header["cut_bytes"]),
                             int(cap) if cap.is_integer() else cap)
    except KeyError as exc:
        raise ParseError(f"manifest missing {exc.args[0]}") from None
    if not segs:
        raise ParseError("manifest lists no segments")
    return plan
