"""Profiled computation graphs, the synthetic GPT-3 profile generator and the
elementary cost models (activation transmission, host-to-device loading).

Units are fixed across the package: time in integer microseconds, memory in
integer mebibytes, payloads in bytes.
"""

from __future__ import annotations

import enum
import hashlib
import math
import os
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

MIB = 1 << 20
GIB = 1 << 30
INF = math.inf


class GraphError(ValueError):
    pass


class CycleDetected(GraphError):
    pass


class DuplicateNodeId(GraphError):
    pass


class DanglingEdge(GraphError):
    pass


class OrderViolation(GraphError):
    pass


class InvalidProfile(GraphError):
    pass


class InvalidConfig(ValueError):
    pass


class ZeroBandwidth(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, msg: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class LayerKind(str, enum.Enum):
    EMBEDDING = "embedding"
    ATTENTION = "attention"
    MLP = "mlp"
    LAYERNORM = "layernorm"
    SOFTMAX = "softmax"
    DROPOUT = "dropout"
    LOGITS = "logits"
    OTHER = "other"


MATMUL_KINDS = (LayerKind.ATTENTION, LayerKind.MLP, LayerKind.LOGITS)


@dataclass(frozen=True)
class LayerProfile:
    node_id: int
    name: str
    kind: LayerKind
    param_count: int
    mem_peak_fwd: int  # MiB
    mem_peak_bwd: int  # MiB
    t_fwd: int  # us
    t_bwd: int  # us
    t_load: int  # us
    output_bytes: int

    @property
    def mem_peak(self) -> int:
        """Residency footprint: a swapped-in node must survive both phases."""
        return max(self.mem_peak_fwd, self.mem_peak_bwd)


@dataclass(frozen=True)
class ComputationGraph:
    nodes: Tuple[LayerProfile, ...]
    edges: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(tuple(e) for e in self.edges))

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def chain(cls, nodes: Sequence[LayerProfile]) -> "ComputationGraph":
        ids = [n.node_id for n in nodes]
        return cls(tuple(nodes), tuple(zip(ids, ids[1:])))

    def is_chain(self) -> bool:
        ids = [n.node_id for n in self.nodes]
        return set(self.edges) == set(zip(ids, ids[1:]))


@dataclass(frozen=True)
class Gpt3Config:
    name: str
    L: int
    d_model: int
    n_heads: int
    n_blocks: int
    vocab: int = 50257
    dtype_bytes: int = 4

    def validate(self) -> "Gpt3Config":
        for fld in ("L", "d_model", "n_heads", "vocab", "dtype_bytes"):
            if getattr(self, fld) <= 0:
                raise InvalidConfig(f"{self.name}: {fld} must be positive")
        if self.n_blocks < 0:
            raise InvalidConfig(f"{self.name}: n_blocks must be >= 0")
        return self

    @property
    def activation_bytes(self) -> int:
        # batch size 1: [1, L, d_model]
        return self.L * self.d_model * self.dtype_bytes

    @property
    def activation_payload_mib(self) -> float:
        return self.activation_bytes / MIB

    def with_blocks(self, n_blocks: int) -> "Gpt3Config":
        return replace(self, n_blocks=n_blocks)


# Standard GPT-3 sizes with their full block counts.
GPT3_CONFIGS: Dict[str, Gpt3Config] = {
    "small": Gpt3Config("small", 2048, 768, 12, 12),
    "medium": Gpt3Config("medium", 2048, 1024, 16, 24),
    "large": Gpt3Config("large", 2048, 1536, 16, 24),
    "xl": Gpt3Config("xl", 2048, 2048, 24, 24),
    "2.7b": Gpt3Config("2.7b", 2048, 2560, 32, 32),
    "6.7b": Gpt3Config("6.7b", 2048, 4096, 32, 32),
    "13b": Gpt3Config("13b", 2048, 5120, 40, 40),
    "175b": Gpt3Config("175b", 2048, 12288, 96, 96),
}

# Trimmed variants used for the training-performance comparison.
EVAL_BLOCKS: Dict[str, int] = {"13b": 18, "175b": 2}


def get_config(name: str, blocks: Optional[int] = None) -> Gpt3Config:
    """Look up a named config; ``"175b:2"`` and ``blocks=2`` both trim to 2 blocks."""
    key = name.strip().lower()
    if ":" in key:
        key, _, b = key.partition(":")
        try:
            blocks = int(b)
        except ValueError:
            raise InvalidConfig(f"bad block count in {name!r}") from None
    key = key.removeprefix("gpt3-").removeprefix("gpt-3-")
    if key not in GPT3_CONFIGS:
        raise InvalidConfig(f"unknown model config {name!r}; known: {', '.join(GPT3_CONFIGS)}")
    cfg = GPT3_CONFIGS[key]
    if blocks is not None:
        cfg = cfg.with_blocks(blocks)
    return cfg.validate()


def eval_config(name: str) -> Gpt3Config:
    cfg = get_config(name)
    return cfg.with_blocks(EVAL_BLOCKS.get(cfg.name, cfg.n_blocks))


# ---------------------------------------------------------------- calibration

# 12 GiB/s, PCI-e 3.0 x16 class
DEFAULT_LOAD_BANDWIDTH = 12 * GIB / 1e6

_MATMUL_FWD_US_PER_GFLOP = 37.0
_ELEMENTWISE_FWD_US_PER_GFLOP = 370.0


def _default_coeffs(scale: float) -> Dict[LayerKind, float]:
    return {
        k: (_MATMUL_FWD_US_PER_GFLOP if k in MATMUL_KINDS else _ELEMENTWISE_FWD_US_PER_GFLOP) * scale
        for k in LayerKind
    }


@dataclass(frozen=True)
class CalibrationProfile:
    """Host-to-device bandwidth plus per-kind compute coefficients.

    Compute time of a node is ``coefficient[kind] * forward GFLOPs``; the
    backward coefficient is applied to the same forward FLOP count.
    """

    load_bandwidth: float = DEFAULT_LOAD_BANDWIDTH  # bytes per us
    fwd_coeff: Dict[LayerKind, float] = field(default_factory=lambda: _default_coeffs(1.0))
    bwd_coeff: Dict[LayerKind, float] = field(default_factory=lambda: _default_coeffs(2.0))
    evict_ratio: float = 1.0

    def scaled(self, compute_scale: float) -> "CalibrationProfile":
        """Same link, compute slowed (or sped up) by ``compute_scale``."""
        return replace(
            self,
            fwd_coeff={k: v * compute_scale for k, v in self.fwd_coeff.items()},
            bwd_coeff={k: v * compute_scale for k, v in self.bwd_coeff.items()},
        )


def read_calibration(path) -> CalibrationProfile:
    cal = CalibrationProfile()
    fwd, bwd = dict(cal.fwd_coeff), dict(cal.bwd_coeff)
    kw = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ParseError(f"expected key=value, got {line!r}", lineno)
            key = key.strip()
            try:
                val = float(value)
            except ValueError:
                raise ParseError(f"non-numeric value for {key}", lineno) from None
            if val < 0:
                raise ParseError(f"negative value for {key}", lineno)
            if key == "load_bandwidth_bytes_per_us":
                kw["load_bandwidth"] = val
            elif key == "evict_ratio":
                kw["evict_ratio"] = val
            elif key.startswith(("fwd.", "bwd.")):
                phase, _, kind = key.partition(".")
                try:
                    k = LayerKind(kind)
                except ValueError:
                    raise ParseError(f"unknown layer kind {kind!r}", lineno) from None
                (fwd if phase == "fwd" else bwd)[k] = val
            else:
                raise ParseError(f"unknown key {key!r}", lineno)
    return replace(cal, fwd_coeff=fwd, bwd_coeff=bwd, **kw)


def write_calibration(cal: CalibrationProfile, path) -> None:
    lines = [f"load_bandwidth_bytes_per_us={cal.load_bandwidth!r}", f"evict_ratio={cal.evict_ratio!r}"]
    lines += [f"fwd.{k.value}={v!r}" for k, v in cal.fwd_coeff.items()]
    lines += [f"bwd.{k.value}={v!r}" for k, v in cal.bwd_coeff.items()]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


CALIBRATION_ENV = "SWAPTRAIN_CALIBRATION"


def default_calibration() -> CalibrationProfile:
    path = os.environ.get(CALIBRATION_ENV)
    return read_calibration(path) if path else CalibrationProfile()


# -------------------------------------------------------------- cost models


@dataclass(frozen=True)
class NetworkModel:
    link_bandwidth: float  # bits/s, may be math.inf
    rpc_effective_cap: float = 610e6  # bits/s
    per_message_latency: int = 0  # us
    serialization_overhead: int = 0  # us per round trip
    serialization_rate: Optional[float] = None  # bytes/us of host copy + serialize

    def __post_init__(self):
        for fld in ("link_bandwidth", "rpc_effective_cap", "per_message_latency", "serialization_overhead"):
            if getattr(self, fld) < 0:
                raise ValueError(f"{fld} must be >= 0")

    @property
    def effective_bandwidth(self) -> float:
        return min(self.link_bandwidth, self.rpc_effective_cap)

    @classmethod
    def localhost(cls, **kw) -> "NetworkModel":
        return cls(link_bandwidth=INF, rpc_effective_cap=INF, **kw)


# Defaults for experiment networks: per-message RPC latency and the host-side
# copy + serialize rate that every transfer pays, localhost included.
DEFAULT_MESSAGE_LATENCY_US = 100
DEFAULT_SERIALIZATION_RATE = 200.0  # bytes/us


def network_for(bandwidth: float, latency: int = DEFAULT_MESSAGE_LATENCY_US,
                serialization_rate: Optional[float] = DEFAULT_SERIALIZATION_RATE) -> NetworkModel:
    """Experiment network for a link of ``bandwidth`` bits/s; ``inf`` means localhost."""
    if bandwidth == INF:
        return NetworkModel.localhost(per_message_latency=latency, serialization_rate=serialization_rate)
    return NetworkModel(bandwidth, per_message_latency=latency, serialization_rate=serialization_rate)


def transmission_time(payload_bytes: int, net: NetworkModel) -> int:
    """Round-trip cost of moving one activation payload to the next sub-model."""
    if payload_bytes < 0:
        raise ValueError("payload_bytes must be >= 0")
    bw = net.effective_bandwidth
    if payload_bytes and bw == 0:
        raise ZeroBandwidth("effective bandwidth is zero")
    wire = 0.0 if payload_bytes == 0 or bw == INF else payload_bytes * 8 / bw * 1e6
    host = payload_bytes / net.serialization_rate if net.serialization_rate else 0.0
    return net.per_message_latency + net.serialization_overhead + math.ceil(wire + host)


def load_time(params_bytes: int, calib: CalibrationProfile) -> int:
    if params_bytes < 0:
        raise ValueError("params_bytes must be >= 0")
    return math.ceil(params_bytes / calib.load_bandwidth)


def parse_bandwidth(text: str) -> float:
    """``"400mbps"`` -> 4e8 bits/s; ``"inf"``/``"localhost"`` -> inf."""
    t = text.strip().lower()
    if t in ("inf", "localhost", "infinity"):
        return INF
    for suffix, mult in (("gbps", 1e9), ("mbps", 1e6), ("kbps", 1e3), ("bps", 1.0)):
        if t.endswith(suffix):
            t, scale = t[: -len(suffix)], mult
            break
    else:
        scale = 1.0
    try:
        val = float(t) * scale
    except ValueError:
        raise ValueError(f"cannot parse bandwidth {text!r}") from None
    if val <= 0:
        raise ValueError(f"bandwidth must be positive: {text!r}")
    return val


def format_bandwidth(bits: float) -> str:
    if bits == INF:
        return "inf"
    if bits >= 1e9 and bits % 1e9 == 0:
        return f"{bits / 1e9:g}gbps"
    return f"{bits / 1e6:g}mbps"


def graph_tag(g: "ComputationGraph") -> str:
    """Short fingerprint used to refuse comparisons across different graphs."""
    h = hashlib.sha1()
    for n in g.nodes:
        h.update(f"{n.name},{n.t_fwd},{n.t_bwd},{n.output_bytes};".encode())
    return h.hexdigest()[:12]


# ----------------------------------------------------------------- validation


def validate_graph(g: ComputationGraph) -> ComputationGraph:
    ids = [n.node_id for n in g.nodes]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise DuplicateNodeId(f"node id {dup} appears more than once")
    pos = {nid: i for i, nid in enumerate(ids)}
    succ: Dict[int, List[int]] = {nid: [] for nid in ids}
    indeg = {nid: 0 for nid in ids}
    for src, dst in g.edges:
        if src not in pos or dst not in pos:
            raise DanglingEdge(f"edge {src}->{dst} references an unknown node")
        succ[src].append(dst)
        indeg[dst] += 1

    # Kahn: a cycle leaves nodes with positive in-degree
    ready = [nid for nid in ids if indeg[nid] == 0]
    seen = 0
    while ready:
        nid = ready.pop()
        seen += 1
        for d in succ[nid]:
            indeg[d] -= 1
            if indeg[d] == 0:
                ready.append(d)
    if seen != len(ids):
        raise CycleDetected("graph contains a cycle")

    for src, dst in g.edges:
        if pos[src] >= pos[dst]:
            raise OrderViolation(f"edge {src}->{dst} points backwards in the node order")

    for n in g.nodes:
        for fld in ("param_count", "mem_peak_fwd", "mem_peak_bwd", "t_fwd", "t_bwd", "t_load", "output_bytes"):
            if getattr(n, fld) < 0:
                raise InvalidProfile(f"node {n.node_id}: {fld} is negative")
        if succ[n.node_id] and n.output_bytes <= 0:
            raise InvalidProfile(f"node {n.node_id}: non-terminal node needs output_bytes > 0")
    return g


# ----------------------------------------------------------- GPT-3 synthesis


def _mib(nbytes: float) -> int:
    return math.ceil(nbytes / MIB)


def _layer(node_id, name, kind, params, gflop, mem_f, mem_b, out_bytes, cfg, calib) -> LayerProfile:
    return LayerProfile(
        node_id=node_id,
        name=name,
        kind=kind,
        param_count=params,
        mem_peak_fwd=_mib(mem_f),
        mem_peak_bwd=_mib(mem_b),
        t_fwd=math.ceil(gflop * calib.fwd_coeff[kind]),
        t_bwd=math.ceil(gflop * calib.bwd_coeff[kind]),
        t_load=load_time(params * cfg.dtype_bytes, calib),
        output_bytes=out_bytes,
    )


def synth_gpt3_graph(cfg: Gpt3Config, calib: Optional[CalibrationProfile] = None) -> ComputationGraph:
    """Chain ``embedding -> n_blocks x (ln, attention, ln, mlp, dropout) -> ln -> logits -> softmax``."""
    cfg.validate()
    calib = calib or CalibrationProfile()
    L, d, V, h, B = cfg.L, cfg.d_model, cfg.vocab, cfg.n_heads, cfg.dtype_bytes
    A = cfg.activation_bytes
    S = h * L * L * B  # attention scores
    O = L * V * B  # vocabulary-sized logits
    G = 1e-9

    nodes: List[LayerProfile] = []

    def add(name, kind, params, flops, mem_f, mem_b, out):
        nodes.append(_layer(len(nodes), name, kind, params, flops * G, mem_f, mem_b, out, cfg, calib))

    p = (V + L) * d
    add("embedding", LayerKind.EMBEDDING, p, L * d, p * B + A, p * B + A, A)
    for b in range(cfg.n_blocks):
        ln = 2 * d
        add(f"block{b}.ln1", LayerKind.LAYERNORM, ln, 8 * L * d, ln * B + 2 * A, ln * B + 3 * A, 2 * A)
        p = 4 * d * d + 4 * d
        add(f"block{b}.attention", LayerKind.ATTENTION, p, 8 * L * d * d + 4 * L * L * d,
            p * B + 5 * A + S + S // B, p * B + 6 * A + 2 * S, 2 * A)
        add(f"block{b}.ln2", LayerKind.LAYERNORM, ln, 8 * L * d, ln * B + 2 * A, ln * B + 3 * A, 2 * A)
        p = 8 * d * d + 5 * d
        add(f"block{b}.mlp", LayerKind.MLP, p, 16 * L * d * d, p * B + 6 * A, p * B + 10 * A, 2 * A)
        add(f"block{b}.dropout", LayerKind.DROPOUT, 0, 2 * L * d, 2 * A + A // B, 2 * A + A // B, A)
    ln = 2 * d
    add("ln_f", LayerKind.LAYERNORM, ln, 8 * L * d, ln * B + 2 * A, ln * B + 3 * A, A)
    p = d * V
    add("logits", LayerKind.LOGITS, p, 2 * L * d * V, p * B + A + O, p * B + A + 2 * O, O)
    add("softmax", LayerKind.SOFTMAX, 0, 5 * L * V, 2 * O, 3 * O, O)
    return ComputationGraph.chain(nodes)


BLOCK_PREFIX = 1  # embedding
BLOCK_SIZE = 5
BLOCK_SUFFIX = 3  # ln_f, logits, softmax


def total_param_bytes(g: ComputationGraph, dtype_bytes: int = 4) -> int:
    return sum(n.param_count for n in g.nodes) * dtype_bytes


# --------------------------------------------------------------- profile file

PROFILE_COLUMNS = (
    "node_id", "name", "kind", "param_count", "mem_peak_fwd_mib", "mem_peak_bwd_mib",
    "t_fwd_us", "t_bwd_us", "t_load_us", "output_bytes",
)


def write_profile_file(g: ComputationGraph, path) -> None:
    """Only chain graphs round-trip: edges are implied by row order."""
    if not g.is_chain():
        raise GraphError("profile files describe chain graphs only")
    rows = [",".join(PROFILE_COLUMNS)]
    for n in g.nodes:
        if "," in n.name or "\n" in n.name:
            raise GraphError(f"node name {n.name!r} cannot be written unquoted")
        rows.append(",".join(str(v) for v in (
            n.node_id, n.name, n.kind.value, n.param_count, n.mem_peak_fwd, n.mem_peak_bwd,
            n.t_fwd, n.t_bwd, n.t_load, n.output_bytes)))
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(rows) + "\n")
    os.replace(tmp, path)


def _parse_rows(lines: Iterable[str]) -> List[LayerProfile]:
    it = iter(enumerate(lines, 1))
    try:
        _, header = next(it)
    except StopIteration:
        raise ParseError("empty profile file", 1) from None
    cols = header.rstrip("\n").split(",")
    missing = [c for c in PROFILE_COLUMNS if c not in cols]
    if missing:
        raise ParseError(f"missing column(s): {', '.join(missing)}", 1)
    idx = {c: cols.index(c) for c in PROFILE_COLUMNS}
    nodes = []
    for lineno, raw in it:
        line = raw.rstrip("\n")
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != len(cols):
            raise ParseError(f"expected {len(cols)} fields, got {len(parts)}", lineno)
        rec = {c: parts[i] for c, i in idx.items()}
        try:
            kind = LayerKind(rec["kind"])
        except ValueError:
            raise ParseError(f"unknown layer kind {rec['kind']!r}", lineno) from None
        ints = {}
        for c in PROFILE_COLUMNS:
            if c in ("name", "kind"):
                continue
            try:
                ints[c] = int(rec[c])
            except ValueError:
                raise ParseError(f"{c} is not an integer: {rec[c]!r}", lineno) from None
            if ints[c] < 0:
                raise ParseError(f"{c} must be >= 0, got {ints[c]}", lineno)
        nodes.append(LayerProfile(
            node_id=ints["node_id"], name=rec["name"], kind=kind, param_count=ints["param_count"],
            mem_peak_fwd=ints["mem_peak_fwd_mib"], mem_peak_bwd=ints["mem_peak_bwd_mib"],
            t_fwd=ints["t_fwd_us"], t_bwd=ints["t_bwd_us"], t_load=ints["t_load_us"],
            output_bytes=ints["output_bytes"]))
    return nodes


def read_profile_file(path) -> ComputationGraph:
    with open(path, encoding="utf-8") as fh:
        nodes = _parse_rows(fh)
    try:
        return validate_graph(ComputationGraph.chain(nodes))
    except GraphError as exc:
        raise ParseError(str(exc)) from exc
