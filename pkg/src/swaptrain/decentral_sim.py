"""Discrete-event simulation of a decentralized training cluster.

Peers train independent model replicas and publish their per-round mini-batch
count to a TTL key-value registry on every heartbeat. Once the registry shows
at least ``global_batch`` mini-batches for the current round, the live peers
that published finish their in-flight iteration and run a ring allreduce plus
an optimizer step, then counts reset. Peers may join, leave or fail mid-run.

Sample accounting is exact: every mini-batch a peer finishes is eventually
credited to a round, lost in a failure (processed since the peer's last
heartbeat), or left over as residue when the run stops.
"""

from __future__ import annotations

import heapq
import json
import math
import os
import random
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

from .graph_core import (INF, NetworkModel, ZeroBandwidth, default_calibration, eval_config, get_config,
                         network_for, parse_bandwidth, synth_gpt3_graph, total_param_bytes,
                         transmission_time)
from .partitioner import plan_for
from .pipeline_baselines import (PipelineConfig, optimal_stage_split, simulate_gpipe,
                                 transmitted_bytes)
from .swap_scheduler import RESIDENT_SEGMENTS, EventKind, build_schedule


class InvalidScenario(ValueError):
    pass


class UnknownPeer(InvalidScenario):
    pass


class Deadlock(RuntimeError):
    def __init__(self, msg: str, metrics: "RunMetrics" = None):
        super().__init__(msg)
        self.metrics = metrics


@dataclass(frozen=True)
class DeviceClass:
    name: str
    capacity: int  # MiB
    compute_scale: float  # compute time multiplier relative to "high"


# V100 / 1080 Ti / 1080; scales follow peak FP32 throughput (15.7 / 11.3 / 8.9 TFLOPS)
DEVICE_CLASSES = {
    "high": DeviceClass("high", 32768, 1.0),
    "medium": DeviceClass("medium", 11264, 1.39),
    "low": DeviceClass("low", 8192, 1.76),
}

ROLES = ("swap", "pipeline")
ACTIONS = ("join", "leave", "fail")

DEFAULT_HEARTBEAT_US = 1_000_000
DEFAULT_TTL_US = 3 * DEFAULT_HEARTBEAT_US
DEFAULT_OPTIMIZER_US = 250_000
DEFAULT_GLOBAL_BATCH = 256


# ------------------------------------------------------------------- inputs


@dataclass(frozen=True)
class PeerSpec:
    peer_id: str
    device_class: str = "high"
    role: str = "swap"
    uplink: NetworkModel = field(default_factory=lambda: network_for(800e6))
    initially_live: bool = True


@dataclass(frozen=True)
class ChurnEvent:
    time: int  # us
    peer_id: str
    action: str


@dataclass(frozen=True)
class ClusterScenario:
    peers: Tuple[PeerSpec, ...]
    model: str = "small"
    global_batch: int = DEFAULT_GLOBAL_BATCH
    rounds: int = 5
    heartbeat_us: int = DEFAULT_HEARTBEAT_US
    ttl_us: int = DEFAULT_TTL_US
    optimizer_us: int = DEFAULT_OPTIMIZER_US
    churn: Tuple[ChurnEvent, ...] = ()
    seed: int = 0
    pipeline_devices: int = 4
    microbatches_per_step: int = 4

    def validate(self) -> "ClusterScenario":
        if not self.peers:
            raise InvalidScenario("scenario declares no peers")
        ids = [p.peer_id for p in self.peers]
        if len(set(ids)) != len(ids):
            raise InvalidScenario("duplicate peer ids")
        for p in self.peers:
            if p.device_class not in DEVICE_CLASSES:
                raise InvalidScenario(f"peer {p.peer_id}: unknown device class {p.device_class!r}")
            if p.role not in ROLES:
                raise InvalidScenario(f"peer {p.peer_id}: unknown role {p.role!r}")
        for name, val in (("global_batch", self.global_batch), ("rounds", self.rounds),
                          ("heartbeat_us", self.heartbeat_us), ("ttl_us", self.ttl_us)):
            if val < 1:
                raise InvalidScenario(f"{name} must be >= 1")
        if self.optimizer_us < 0:
            raise InvalidScenario("optimizer_us must be >= 0")
        try:
            model_config(self.model)
        except ValueError as exc:
            raise InvalidScenario(str(exc)) from None
        validate_trace(self.churn, set(ids))
        return self


def validate_trace(trace: Sequence[ChurnEvent], declared: Set[str]) -> None:
    prev = -math.inf
    for ev in trace:
        if ev.time < prev:
            raise InvalidScenario("churn times must be nondecreasing")
        prev = ev.time
        if ev.action not in ACTIONS:
            raise InvalidScenario(f"unknown churn action {ev.action!r}")
        if ev.peer_id not in declared:
            raise UnknownPeer(f"churn references undeclared peer {ev.peer_id!r}")


def apply_churn(trace: Sequence[ChurnEvent], live: Set[str], declared: Optional[Set[str]] = None) -> Set[str]:
    """Live set after replaying ``trace`` (joins add, leaves and failures remove)."""
    declared = set(live) if declared is None else declared
    validate_trace(trace, declared)
    out = set(live)
    for ev in trace:
        if ev.action == "join":
            out.add(ev.peer_id)
        else:
            out.discard(ev.peer_id)
    return out


def model_config(name: str):
    """Evaluation-size preset, or ``name:blocks`` for an explicit block count."""
    return get_config(name) if ":" in name else eval_config(name)


# ------------------------------------------------------------ cost helpers


def ring_allreduce_time(model_bytes: int, n_peers: int, min_link_bandwidth: float, latency: int = 0) -> int:
    """Ring allreduce in µs: 2(n-1) chunks of bytes/n over the slowest link, plus per-hop latency."""
    if n_peers < 1:
        raise ValueError("n_peers must be >= 1")
    if n_peers == 1:
        return 0
    if min_link_bandwidth <= 0:
        raise ZeroBandwidth("allreduce over a zero-bandwidth link")
    hops = 2 * (n_peers - 1)
    wire = 0.0 if min_link_bandwidth == INF else hops * (model_bytes / n_peers) * 8 / min_link_bandwidth * 1e6
    return math.ceil(wire) + hops * latency


@dataclass(frozen=True)
class PeerModel:
    """What one peer needs from its timeline: per-iteration timing and yield."""
    warmup_us: int
    iteration_us: int
    minibatches: int  # per iteration
    bytes_per_iteration: int  # inter-device traffic


@lru_cache(maxsize=None)
def peer_model(model: str, device_class: str, role: str, uplink: NetworkModel,
               pipeline_devices: int = 4, microbatches: int = 4) -> PeerModel:
    dc = DEVICE_CLASSES[device_class]
    g = synth_gpt3_graph(model_config(model), default_calibration().scaled(dc.compute_scale))
    if role == "swap":
        plan = plan_for(g, dc.capacity // RESIDENT_SEGMENTS)
        tl = build_schedule(plan, g, 2, device_capacity=dc.capacity)
        ends = {}
        for e in tl.events:
            if e.kind in (EventKind.EXEC_FWD, EventKind.EXEC_BWD):
                ends[e.iteration] = max(ends.get(e.iteration, 0), e.t_end)
        first = min(e.t_start for e in tl.events if e.kind is EventKind.EXEC_FWD)
        return PeerModel(first, ends[1] - ends[0], plan.accumulation_C, 0)
    stages = tuple(optimal_stage_split(g, pipeline_devices, dc.capacity))
    cfg = PipelineConfig(stages, pipeline_devices, microbatches, uplink)
    tl = simulate_gpipe(cfg, g, 1)
    span = max(e.t_end for e in tl.events)
    return PeerModel(0, span, microbatches, transmitted_bytes(tl))


def per_heartbeat_bound(pm: PeerModel, heartbeat_us: int) -> int:
    """Most mini-batches one peer can add to a round between two trigger evaluations."""
    return pm.minibatches * (math.ceil(heartbeat_us / pm.iteration_us) + 1)


# --------------------------------------------------------------------- DHT


class DhtStore:
    """Single logical key-value registry with per-entry expiry."""

    def __init__(self, ttl: int = DEFAULT_TTL_US, heartbeat: int = DEFAULT_HEARTBEAT_US):
        self.ttl = ttl
        self.heartbeat = heartbeat
        self._data: Dict[str, Tuple[object, float]] = {}
        self._now = -math.inf

    def _tick(self, now):
        if now < self._now:
            raise ValueError(f"clock went backwards: {now} < {self._now}")
        self._now = now

    def put(self, key: str, value, now: int, ttl: Optional[int] = -1) -> None:
        """Store ``value`` until ``now + ttl``; ``ttl=None`` never expires, -1 uses the store default."""
        self._tick(now)
        ttl = self.ttl if ttl == -1 else ttl
        self._data[key] = (value, INF if ttl is None else now + ttl)

    def get(self, key: str, now: int, default=None):
        self._tick(now)
        item = self._data.get(key)
        if item is None or item[1] <= now:
            return default
        return item[0]

    def expiry(self, key: str) -> Optional[float]:
        item = self._data.get(key)
        return None if item is None else item[1]

    def delete(self, key: str) -> None:
        self._data.pop(key, None)

    def expire(self, now: int) -> List[str]:
        self._tick(now)
        gone = sorted(k for k, (_, exp) in self._data.items() if exp <= now)
        for k in gone:
            del self._data[k]
        return gone

    def items(self, prefix: str, now: int) -> List[Tuple[str, object]]:
        self._tick(now)
        return sorted((k, v) for k, (v, exp) in self._data.items() if k.startswith(prefix) and exp > now)


# ----------------------------------------------------------------- outputs


@dataclass
class RoundRecord:
    index: int
    trigger_time: int
    visible_sum: int
    prev_visible_sum: int
    participants: Tuple[str, ...]
    start_time: int = 0
    end_time: int = 0
    transfer_us: int = 0
    optimizer_us: int = 0
    credited: int = 0
    retries: int = 0


@dataclass
class PeerStats:
    peer_id: str
    device_class: str
    role: str
    processed: int = 0
    lost: int = 0
    bytes_exchanged: int = 0
    busy_us: int = 0
    wait_us: int = 0
    live_us: int = 0
    bound: int = 0  # per-heartbeat batch bound


@dataclass
class RunMetrics:
    rounds: List[RoundRecord]
    peers: List[PeerStats]
    ledger: List[Tuple[int, str, str, int]]  # (time, peer, event, samples)
    end_time: int
    credited: int
    lost: int
    residue: int
    processed: int
    completed: bool = True

    @property
    def balanced(self) -> bool:
        return self.credited + self.lost + self.residue == self.processed

    def wall_per_global_batch(self) -> float:
        if not self.rounds:
            return math.inf
        return self.rounds[-1].end_time / len(self.rounds)

    def summary(self) -> Dict[str, object]:
        alive = sum(p.live_us for p in self.peers)
        return {
            "rounds_completed": len(self.rounds),
            "completed": int(self.completed),
            "end_time_us": self.end_time,
            "wall_per_global_batch_us": round(self.wall_per_global_batch(), 3),
            "mean_allreduce_us": round(sum(r.transfer_us for r in self.rounds) / len(self.rounds), 3)
            if self.rounds else 0,
            "processed": self.processed,
            "credited": self.credited,
            "lost": self.lost,
            "residue": self.residue,
            "balanced": int(self.balanced),
            "idle_fraction": round(sum(p.wait_us for p in self.peers) / alive, 6) if alive else 0,
            "max_participants": max((len(r.participants) for r in self.rounds), default=0),
        }


# -------------------------------------------------------------- simulation


_LIVE = ("download", "wait_round", "compute", "idle_done", "barrier")


class _Peer:
    def __init__(self, spec: PeerSpec, pm: PeerModel, bound: int):
        self.spec = spec
        self.pm = pm
        self.status = "off"
        self.epoch = 0
        self.round_count = 0
        self.published = 0
        self.warm = False
        self.iter_start = 0
        self.live_since = 0
        self.wait_since = 0
        self.stats = PeerStats(spec.peer_id, spec.device_class, spec.role, bound=bound)

    @property
    def live(self):
        return self.status in _LIVE


class _Sim:
    def __init__(self, sc: ClusterScenario):
        self.sc = sc
        self.rng = random.Random(sc.seed)
        self.dht = DhtStore(sc.ttl_us, sc.heartbeat_us)
        self.heap: List[Tuple[int, int, str, tuple]] = []
        self.seq = 0
        self.now = 0
        g = synth_gpt3_graph(model_config(sc.model))
        self.model_bytes = total_param_bytes(g)
        self.peers: Dict[str, _Peer] = {}
        for spec in sc.peers:
            pm = peer_model(sc.model, spec.device_class, spec.role, spec.uplink,
                            sc.pipeline_devices, sc.microbatches_per_step)
            self.peers[spec.peer_id] = _Peer(spec, pm, per_heartbeat_bound(pm, sc.heartbeat_us))
        self.round_idx = 0
        self.active: Optional[RoundRecord] = None
        self.waiting: Set[str] = set()
        self.members: Set[str] = set()
        self.ar_token = 0
        self.ar_running = False
        self.retained = 0  # published counts of departed peers, credited next round
        self.prev_visible = 0
        self.rounds: List[RoundRecord] = []
        self.ledger: List[Tuple[int, str, str, int]] = []
        self.pending_joins = sum(1 for ev in sc.churn if ev.action == "join")

    # -- plumbing
    def push(self, t, kind, *data):
        self.seq += 1
        heapq.heappush(self.heap, (t, self.seq, kind, data))

    def key(self, pid):
        return f"r{self.round_idx}/{pid}"

    def publish(self, p: _Peer, ttl=-1):
        self.dht.put(self.key(p.spec.peer_id), p.round_count, self.now, ttl)
        p.published = p.round_count

    def visible(self) -> Tuple[int, List[str]]:
        items = self.dht.items(f"r{self.round_idx}/", self.now)
        return sum(v for _, v in items), [k.split("/", 1)[1] for k, _ in items]

    # -- peer lifecycle
    def go_live(self, p: _Peer):
        phase = self.rng.randrange(self.sc.heartbeat_us)
        self.push(self.now + phase, "hb", p.spec.peer_id, p.epoch)

    def start_iteration(self, p: _Peer):
        p.status = "compute"
        p.iter_start = self.now
        dur = p.pm.iteration_us + (0 if p.warm else p.pm.warmup_us)
        p.warm = True
        self.push(self.now + dur, "iter", p.spec.peer_id, p.epoch)

    def stop(self, p: _Peer, status):
        if p.status == "barrier":
            p.stats.wait_us += self.now - p.wait_since
        p.stats.live_us += self.now - p.live_since
        p.status = status
        p.epoch += 1

    # -- trigger
    def evaluate(self):
        if self.active is not None:
            return
        total, owners = self.visible()
        live_owners = [o for o in owners if self.peers[o].live and self.peers[o].status != "wait_round"]
        if total >= self.sc.global_batch and live_owners:
            self.trigger(total, live_owners)
        else:
            self.prev_visible = total

    def trigger(self, total, owners):
        rec = RoundRecord(len(self.rounds), self.now, total, self.prev_visible, tuple(sorted(owners)))
        self.active = rec
        self.members = set(owners)
        self.waiting = set()
        for pid in owners:
            p = self.peers[pid]
            if p.status == "compute":
                self.waiting.add(pid)
            else:  # just finished an iteration
                self.arrive(p)
        self.maybe_start_allreduce()

    def arrive(self, p: _Peer):
        p.status = "barrier"
        p.wait_since = self.now
        self.publish(p)

    def maybe_start_allreduce(self):
        if self.active is None or self.waiting:
            return
        if not self.members:
            # every participant vanished; drop the round and let counts carry over
            self.active = None
            self.ar_running = False
            return
        self.ar_token += 1
        self.ar_running = True
        n = len(self.members)
        bw = min(self.peers[m].spec.uplink.effective_bandwidth for m in self.members)
        lat = max(self.peers[m].spec.uplink.per_message_latency for m in self.members)
        rec = self.active
        rec.start_time = self.now
        rec.transfer_us = ring_allreduce_time(self.model_bytes, n, bw, lat)
        rec.optimizer_us = self.sc.optimizer_us
        self.push(self.now + rec.transfer_us + rec.optimizer_us, "ar_done", self.ar_token)

    def drop_member(self, pid, reason):
        if self.active is None or pid not in self.members:
            return
        self.members.discard(pid)
        self.waiting.discard(pid)
        if self.ar_running:
            # one retry without the departed peer
            self.active.retries += 1
        self.maybe_start_allreduce()

    def finish_round(self):
        rec = self.active
        credited = self.retained
        for pid in sorted(self.members):
            p = self.peers[pid]
            credited += p.round_count
            p.round_count = 0
            p.published = 0
        self.retained = 0
        rec.end_time = self.now
        rec.participants = tuple(sorted(self.members))
        rec.credited = credited
        self.ledger.append((self.now, "*", f"round{rec.index}", credited))
        self.rounds.append(rec)
        self.active = None
        self.ar_running = False
        self.round_idx += 1
        self.prev_visible = 0
        for pid in sorted(self.members):
            p = self.peers[pid]
            p.stats.wait_us += self.now - p.wait_since
            self.start_iteration(p)
        self.members = set()
        for pid in sorted(self.peers):
            p = self.peers[pid]
            if p.status == "wait_round":
                self.start_iteration(p)
        self.evaluate()

    # -- handlers
    def on_hb(self, pid, epoch):
        p = self.peers[pid]
        if epoch != p.epoch or not p.live:
            return
        if p.status != "download":
            self.publish(p)
        self.push(self.now + self.sc.heartbeat_us, "hb", pid, epoch)
        self.evaluate()

    def on_iter(self, pid, epoch):
        p = self.peers[pid]
        if epoch != p.epoch or p.status != "compute":
            return
        C = p.pm.minibatches
        p.stats.processed += C
        p.stats.busy_us += self.now - p.iter_start
        p.stats.bytes_exchanged += p.pm.bytes_per_iteration
        p.round_count += C
        if self.active is not None:
            if pid in self.waiting:
                self.waiting.discard(pid)
                self.arrive(p)
                self.maybe_start_allreduce()
            else:
                self.start_iteration(p)
            return
        total, owners = self.visible()
        mine = self.dht.get(self.key(pid), self.now, 0) if pid in owners else 0
        if total - mine + p.round_count >= self.sc.global_batch:
            self.publish(p)
            p.status = "idle_done"
            self.evaluate()
            if p.status == "idle_done":  # pragma: no cover - evaluate always triggers here
                self.start_iteration(p)
        else:
            self.start_iteration(p)

    def on_ar_done(self, token):
        if self.active is None or token != self.ar_token:
            return
        self.finish_round()

    def on_detect(self, pid):
        self.drop_member(pid, "failed")

    def on_churn(self, pid, action):
        p = self.peers[pid]
        if action == "join":
            self.pending_joins -= 1
            if p.live:
                return
            p.epoch += 1
            p.status = "download"
            p.warm = False
            p.live_since = self.now
            dl = transmission_time(self.model_bytes, p.spec.uplink)
            self.ledger.append((self.now, pid, "join", 0))
            self.push(self.now + dl, "joined", pid, p.epoch)
            return
        if not p.live:
            return
        was_member = pid in self.members
        if action == "leave":
            # final heartbeat flushes the count; it stays visible and is credited next round
            if p.round_count:
                self.publish(p, ttl=None)
            self.retained += p.round_count
            self.ledger.append((self.now, pid, "leave", p.round_count))
            p.round_count = p.published = 0
            self.stop(p, "left")
            if was_member:
                self.drop_member(pid, "left")
        else:
            lost = p.round_count - p.published
            p.stats.lost += lost
            self.retained += p.published
            self.ledger.append((self.now, pid, "fail", lost))
            p.round_count = p.published = 0
            self.stop(p, "dead")
            if was_member:
                exp = self.dht.expiry(self.key(pid))
                when = self.now if exp is None or exp == INF else max(self.now, int(exp))
                self.push(when, "detect", pid)

    def on_joined(self, pid, epoch):
        p = self.peers[pid]
        if epoch != p.epoch or p.status != "download":
            return
        self.go_live(p)
        if self.active is not None:
            p.status = "wait_round"
        else:
            self.start_iteration(p)

    # -- main loop
    def run(self) -> RunMetrics:
        for pid in sorted(self.peers):
            p = self.peers[pid]
            if p.spec.initially_live:
                p.status = "compute"
                p.live_since = 0
                self.go_live(p)
                self.start_iteration(p)
        for i, ev in enumerate(self.sc.churn):
            self.push(ev.time, "churn", ev.peer_id, ev.action)
        handlers = {"hb": self.on_hb, "iter": self.on_iter, "ar_done": self.on_ar_done,
                    "detect": self.on_detect, "churn": self.on_churn, "joined": self.on_joined}
        while len(self.rounds) < self.sc.rounds:
            if not any(p.live for p in self.peers.values()) and self.pending_joins == 0:
                raise Deadlock(f"no live peers left after {len(self.rounds)} of {self.sc.rounds} rounds",
                               self.metrics(False))
            if not self.heap:  # pragma: no cover - live peers always have events queued
                raise Deadlock("event queue drained", self.metrics(False))
            t, _, kind, data = heapq.heappop(self.heap)
            self.now = t
            handlers[kind](*data)
        return self.metrics(True)

    def metrics(self, completed: bool) -> RunMetrics:
        peers = []
        residue = self.retained
        for pid in sorted(self.peers):
            p = self.peers[pid]
            st = PeerStats(**vars(p.stats))
            if p.live:
                st.live_us += self.now - p.live_since
                if p.status == "barrier":
                    st.wait_us += self.now - p.wait_since
            residue += p.round_count
            peers.append(st)
        credited = sum(r.credited for r in self.rounds)
        return RunMetrics(list(self.rounds), peers, list(self.ledger), self.now, credited,
                          sum(p.lost for p in peers), residue, sum(p.processed for p in peers), completed)


def run(scenario: ClusterScenario) -> RunMetrics:
    return _Sim(scenario.validate()).run()


# -------------------------------------------------------------- file forms


def _expand_peers(raw: Sequence[dict]) -> List[PeerSpec]:
    out = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict):
            raise InvalidScenario(f"peer entry {i} is not an object")
        count = int(item.get("count", 1))
        cls = item.get("device_class", "high")
        uplink = network_for(parse_bandwidth(str(item.get("uplink", "800mbps"))))
        for j in range(count):
            pid = f"{item.get('prefix', cls)}{j}"
            if count == 1 and "peer_id" in item:
                pid = item["peer_id"]
            out.append(PeerSpec(pid, cls, item.get("role", "swap"), uplink, bool(item.get("initially_live", True))))
    return out


def scenario_from_dict(d: dict) -> ClusterScenario:
    try:
        peers = _expand_peers(d.get("peers", []))
        churn = tuple(ChurnEvent(int(c["time_us"]), str(c["peer_id"]), str(c["action"])) for c in d.get("churn", []))
        kw = {k: d[k] for k in ("model", "global_batch", "rounds", "heartbeat_us", "ttl_us", "optimizer_us",
                                "seed", "pipeline_devices", "microbatches_per_step") if k in d}
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidScenario(f"malformed scenario: {exc}") from None
    return ClusterScenario(tuple(peers), churn=churn, **kw).validate()


def load_scenario(path) -> ClusterScenario:
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidScenario(f"{path}: {exc}") from None
    return scenario_from_dict(d)


def standard_cluster(n_per_class: int = 4, uplink: str = "800mbps") -> List[dict]:
    return [{"device_class": c, "count": n_per_class, "uplink": uplink} for c in ("high", "medium", "low")]


def _write(path, lines: Iterable[str]):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def write_metrics(m: RunMetrics, out_dir) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = [os.path.join(out_dir, n) for n in ("summary.csv", "rounds.csv", "peers.csv", "ledger.csv")]
    _write(paths[0], ["key,value"] + [f"{k},{v}" for k, v in m.summary().items()])
    _write(paths[1], ["round,trigger_us,visible_sum,prev_visible_sum,participants,start_us,end_us,"
                      "allreduce_us,optimizer_us,credited,retries"]
           + [f"{r.index},{r.trigger_time},{r.visible_sum},{r.prev_visible_sum},{';'.join(r.participants)},"
              f"{r.start_time},{r.end_time},{r.transfer_us},{r.optimizer_us},{r.credited},{r.retries}"
              for r in m.rounds])
    _write(paths[2], ["peer_id,device_class,role,processed,lost,bytes_exchanged,busy_us,wait_us,live_us,bound"]
           + [f"{p.peer_id},{p.device_class},{p.role},{p.processed},{p.lost},{p.bytes_exchanged},"
              f"{p.busy_us},{p.wait_us},{p.live_us},{p.bound}" for p in m.peers])
    _write(paths[3], ["time_us,peer_id,event,samples"] + [f"{t},{p},{e},{s}" for t, p, e, s in m.ledger])
    return paths
