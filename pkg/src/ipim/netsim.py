"""Deterministic discrete-event network simulator.

Time is integer microseconds. All events go through one heap ordered by
(time, insertion sequence), and every random draw comes from a source
seeded by (run seed, owner name), so a run is a pure function of its inputs.
"""

from __future__ import annotations

import copy
import dataclasses
import functools
import hashlib
import heapq
import ipaddress
import json
import random
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Optional

from . import schema
from .endpoint import Endpoint, IntegrityConfig, IntegrityVerdict
from .packet import HopTruth, PacketTruth, SimPacket
from .router import AdversaryKind, AdversaryPolicy, Participation, RouterState, forward
from .wire import (
    FieldClass,
    HopKind,
    HopRequest,
    IntegrityMode,
    Presence,
    StampStrategy,
    encode_shim,
)

HOST_BASE = ipaddress.IPv4Address("198.18.0.1")
LINK_BASE = ipaddress.IPv4Address("10.0.0.0")
DEFAULT_QUEUE_BYTES = 64_000
MAX_CLOCK_OFFSET_US = 1_000_000

SchemaError = schema.SchemaError


class DanglingReferenceError(ValueError):
    """A route, link or flow names a node that does not exist."""


def derive_rng(seed: int, *names: object) -> random.Random:
    tag = ":".join(str(n) for n in (seed,) + names).encode()
    return random.Random(int.from_bytes(hashlib.sha256(tag).digest()[:8], "big"))


# -- network ---------------------------------------------------------------


@dataclass
class Host:
    name: str
    address: str
    as_number: int = 0
    clock_offset_us: int = 0


@dataclass
class RouterNode:
    name: str
    state: RouterState
    background_load_bps: int = 0


@dataclass
class Link:
    index: int
    a: str
    b: str
    delay_us: int
    rate_bps: int
    queue_bytes: int = DEFAULT_QUEUE_BYTES
    loss: float = 0.0
    reorder: float = 0.0
    reorder_delay_us: int = 0
    duplicate: float = 0.0

    def address_of(self, node: str) -> str:
        return str(self.ip_of(node))

    def ip_of(self, node: str) -> ipaddress.IPv4Address:
        return _link_ip(self.index, node == self.a)


@functools.lru_cache(maxsize=None)
def _link_ip(index: int, side_a: bool) -> ipaddress.IPv4Address:
    return LINK_BASE + 4 * index + (1 if side_a else 2)


@dataclass(frozen=True)
class RouteChange:
    time_us: int
    src: str
    dst: str
    path: tuple[str, ...]


@dataclass
class Network:
    hosts: dict[str, Host] = field(default_factory=dict)
    routers: dict[str, RouterNode] = field(default_factory=dict)
    links: list[Link] = field(default_factory=list)
    routes: dict[tuple[str, str], tuple[str, ...]] = field(default_factory=dict)
    route_changes: list[RouteChange] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._shortest_cache: dict[tuple[str, str], Optional[tuple[str, ...]]] = {}
        self._adj: dict[tuple[str, str], Link] = {}
        for link in self.links:
            self._adj[(link.a, link.b)] = link
            self._adj[(link.b, link.a)] = link

    @property
    def nodes(self) -> set[str]:
        return set(self.hosts) | set(self.routers)

    def link_between(self, u: str, v: str) -> Optional[Link]:
        return self._adj.get((u, v))

    def add_link(self, link: Link) -> None:
        self._shortest_cache.clear()
        self.links.append(link)
        self._adj[(link.a, link.b)] = link
        self._adj[(link.b, link.a)] = link

    def check_path(self, src: str, dst: str, path: Iterable[str]) -> tuple[str, ...]:
        path = tuple(path)
        for name in (src, dst):
            if name not in self.hosts:
                raise DanglingReferenceError(f"route endpoint {name!r} is not a host")
        for name in path:
            if name not in self.routers:
                raise DanglingReferenceError(f"route {src}->{dst} names unknown router {name!r}")
        full = (src,) + path + (dst,)
        for u, v in zip(full, full[1:]):
            if self.link_between(u, v) is None:
                raise DanglingReferenceError(f"route {src}->{dst} needs a link {u!r}-{v!r}")
        return path

    def _shortest(self, src: str, dst: str) -> Optional[tuple[str, ...]]:
        prev: dict[str, Optional[str]] = {src: None}
        queue = deque([src])
        while queue:
            u = queue.popleft()
            if u == dst:
                break
            for (a, b) in sorted(self._adj):
                if a == u and b not in prev and (b == dst or b in self.routers):
                    prev[b] = u
                    queue.append(b)
        if dst not in prev:
            return None
        hops = []
        node = prev[dst]
        while node is not None and node != src:
            hops.append(node)
            node = prev[node]
        return tuple(reversed(hops))

    def route(self, src: str, dst: str, t: int) -> tuple[str, ...]:
        """Router list a packet sent at time ``t`` from src to dst follows."""
        for key, flip in (((src, dst), False), ((dst, src), True)):
            chosen = self.routes.get(key)
            for change in self.route_changes:
                if (change.src, change.dst) == key and change.time_us <= t:
                    chosen = change.path
            if chosen is not None:
                return tuple(reversed(chosen)) if flip else chosen
        if (src, dst) not in self._shortest_cache:
            self._shortest_cache[(src, dst)] = self._shortest(src, dst)
        found = self._shortest_cache[(src, dst)]
        if found is None:
            raise DanglingReferenceError(f"no route from {src!r} to {dst!r}")
        return found


def schedule_route_change(net: Network, time_us: int, src: str, dst: str, new_path: Iterable[str]) -> Network:
    """Send packets from src to dst along ``new_path`` from ``time_us`` on."""
    path = net.check_path(src, dst, new_path)
    net.route_changes.append(RouteChange(time_us, src, dst, path))
    net.route_changes.sort(key=lambda c: c.time_us)
    return net


def _adversary(cfg: Optional[dict]) -> AdversaryPolicy:
    if not cfg:
        return AdversaryPolicy()
    return AdversaryPolicy(
        kind=AdversaryKind(cfg["kind"]),
        scale=cfg.get("scale", 1.0),
        victim_as=cfg.get("victim_as"),
        inflate_us=cfg.get("inflate_us", 0),
        victim_hops=tuple(cfg.get("victim_hops", (1,))),
        addr_map=dict(cfg.get("addr_map", {})),
        port_map={int(k): v for k, v in cfg.get("port_map", {}).items()},
        nonce_delta=cfg.get("nonce_delta", 1),
    )


def build_network(config: dict, seed: int = 0) -> Network:
    """Materialize a network section; unset clock and evolution offsets are drawn from ``seed``."""
    schema.validate(config, schema.NETWORK, ("network",))
    names: set[str] = set()
    for i, item in enumerate(config["hosts"] + config.get("routers", [])):
        if item["name"] in names:
            raise SchemaError(f"$.network.{'hosts' if i < len(config['hosts']) else 'routers'}", f"duplicate node name {item['name']!r}")
        names.add(item["name"])

    net = Network()
    for i, h in enumerate(config["hosts"]):
        rng = derive_rng(seed, "build", h["name"])
        net.hosts[h["name"]] = Host(
            name=h["name"],
            address=h.get("address", str(HOST_BASE + i)),
            as_number=h.get("as", 0),
            clock_offset_us=h.get("clock_offset_us", rng.randrange(MAX_CLOCK_OFFSET_US)),
        )
    for li, lk in enumerate(config["links"]):
        for end in ("a", "b"):
            if lk[end] not in names:
                raise DanglingReferenceError(f"$.network.links[{li}].{end}: unknown node {lk[end]!r}")
        net.add_link(Link(
            index=li, a=lk["a"], b=lk["b"], delay_us=lk["delay_us"], rate_bps=lk["rate_bps"],
            queue_bytes=lk.get("queue_bytes", DEFAULT_QUEUE_BYTES), loss=lk.get("loss", 0.0),
            reorder=lk.get("reorder", 0.0), reorder_delay_us=lk.get("reorder_delay_us", 0),
            duplicate=lk.get("duplicate", 0.0),
        ))
    for r in config.get("routers", []):
        rng = derive_rng(seed, "build", r["name"])
        feats = r.get("features", {})
        name = r["name"]
        interfaces = [lk.ip_of(name) for lk in net.links if name in (lk.a, lk.b)]
        state = RouterState(
            router_id=r["id"],
            as_number=r["as"],
            interfaces=interfaces,
            o_r=r.get("evolution_offset", rng.randrange(-(1 << 15), 1 << 15)),
            stamp_probability=r.get("stamp_probability", 0.0),
            participation=Participation(
                feats.get("stamping", True), feats.get("evolution", True), feats.get("accum", True)
            ),
            adversary=_adversary(r.get("adversary")),
            clock_offset_us=r.get("clock_offset_us", rng.randrange(MAX_CLOCK_OFFSET_US)),
            shed_threshold_us=r.get("shed_threshold_us"),
            name=name,
        )
        net.routers[name] = RouterNode(name, state, r.get("background_load_bps", 0))
    for ri, rt in enumerate(config.get("routes", [])):
        try:
            net.routes[(rt["src"], rt["dst"])] = net.check_path(rt["src"], rt["dst"], rt["path"])
        except DanglingReferenceError as exc:
            raise DanglingReferenceError(f"$.network.routes[{ri}]: {exc}") from None
    for ci, ch in enumerate(config.get("route_changes", [])):
        try:
            schedule_route_change(net, ch["time_us"], ch["src"], ch["dst"], ch["path"])
        except DanglingReferenceError as exc:
            raise DanglingReferenceError(f"$.network.route_changes[{ci}]: {exc}") from None
    return net


# -- workload ----------------------------------------------------------------


@dataclass
class AckPolicy:
    mode: str = "fixed"
    hold_us: int = 0
    every: int = 2
    size_bytes: int = 64


@dataclass
class FlowSpec:
    id: str
    src: str
    dst: str
    count: int
    interval_us: int
    start_us: int = 0
    size_bytes: int = 1000
    ttl: int = 64
    sport: int = 40000
    dport: int = 443
    granularity: int = 0
    presence: Presence = Presence.TIMING | Presence.NONCE
    hop_kinds: tuple[HopKind, ...] = ()
    hop_strategy: StampStrategy = StampStrategy.PROBABILISTIC
    target_ttls: tuple[int, ...] = ()
    integrity: Optional[IntegrityConfig] = None
    ack: Optional[AckPolicy] = field(default_factory=AckPolicy)
    nonce_values: tuple[int, ...] = ()
    ack_nonce_values: tuple[int, ...] = ()
    window: int = 3
    drop_seqs: frozenset[int] = frozenset()
    extra_delay_us: dict[int, int] = field(default_factory=dict)

    def hop_request(self, seq: int) -> Optional[HopRequest]:
        if not self.hop_kinds:
            return None
        kind = self.hop_kinds[seq % len(self.hop_kinds)]
        target = None
        if self.hop_strategy == StampStrategy.TRIGGERED:
            target = self.target_ttls[seq % len(self.target_ttls)] if self.target_ttls else self.ttl
        return HopRequest(kind, self.hop_strategy, target)


def _fields(names: Iterable[str]) -> FieldClass:
    out = FieldClass(0)
    for n in names:
        out |= FieldClass[n]
    return out


def parse_flow(d: dict, index: int = 0) -> FlowSpec:
    schema.validate(d, schema.FLOW, ("workload", "flows", index))
    presence = Presence(0)
    for p in d.get("presence", ["TIMING", "NONCE"]):
        presence |= Presence[p]
    hop = d.get("hop_request")
    if hop:
        presence |= Presence.HOPREQ
    elif Presence.HOPREQ in presence:
        raise SchemaError(f"$.workload.flows[{index}].presence", "HOPREQ needs a hop_request section")
    integrity = None
    if "integrity" in d or Presence.INTEGRITY in presence:
        icfg = d.get("integrity", {})
        mode = IntegrityMode[icfg.get("mode", "PLAIN")]
        salt = bytes.fromhex(icfg.get("salt_hex", ""))
        if mode != IntegrityMode.PLAIN and not salt:
            raise SchemaError(f"$.workload.flows[{index}].integrity.salt_hex", f"mode {mode.name} needs a salt")
        integrity = IntegrityConfig(mode, salt)
        if "covers" in icfg:
            integrity.covers = [_fields(c) for c in icfg["covers"]]
        presence |= Presence.INTEGRITY
    ack = AckPolicy(**d["ack"]) if d.get("ack") is not None else (AckPolicy() if "ack" not in d else None)
    script = d.get("script", {})
    return FlowSpec(
        id=d["id"], src=d["src"], dst=d["dst"], count=d["count"], interval_us=d["interval_us"],
        start_us=d.get("start_us", 0), size_bytes=d.get("size_bytes", 1000), ttl=d.get("ttl", 64),
        sport=d.get("sport", 40000 + index), dport=d.get("dport", 443),
        granularity=d.get("granularity", 0), presence=presence,
        hop_kinds=tuple(HopKind[k] for k in hop["kinds"]) if hop else (),
        hop_strategy=StampStrategy[hop["strategy"]] if hop else StampStrategy.PROBABILISTIC,
        target_ttls=tuple(hop.get("target_ttls", ())) if hop else (),
        integrity=integrity, ack=ack,
        nonce_values=tuple(d.get("nonce_values", ())),
        ack_nonce_values=tuple(d.get("ack_nonce_values", ())),
        window=d.get("window", 3),
        drop_seqs=frozenset(script.get("drop_seqs", ())),
        extra_delay_us={int(k): v for k, v in script.get("extra_delay_us", {}).items()},
    )


def parse_workload(flows: list[dict], net: Network) -> list[FlowSpec]:
    specs = [parse_flow(d, i) for i, d in enumerate(flows)]
    seen = set()
    for i, f in enumerate(specs):
        if f.id in seen:
            raise SchemaError(f"$.workload.flows[{i}].id", f"duplicate flow id {f.id!r}")
        seen.add(f.id)
        for end in ("src", "dst"):
            if getattr(f, end) not in net.hosts:
                raise DanglingReferenceError(f"$.workload.flows[{i}].{end}: unknown host {getattr(f, end)!r}")
    return specs


# -- trace -------------------------------------------------------------------


class TraceParseError(ValueError):
    def __init__(self, line: int, message: str) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


EVENT_KINDS = ("SEND", "RECV", "STAMP", "DROP", "REORDER", "DUP", "ROUTE_CHANGE", "MEASURE")


@dataclass
class Trace:
    """Ordered event records; one JSON object per line when serialized."""

    events: list[dict] = field(default_factory=list)

    def __iter__(self) -> Iterator[dict]:
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def of(self, *kinds: str, flow: Optional[str] = None) -> list[dict]:
        return [e for e in self.events if e["ev"] in kinds and (flow is None or e.get("flow") == flow)]

    def flows(self) -> list[str]:
        return sorted({e["flow"] for e in self.events if "flow" in e})

    def dumps(self) -> str:
        return "".join(json.dumps(e, sort_keys=True, separators=(",", ":")) + "\n" for e in self.events)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "Trace":
        events = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceParseError(lineno, exc.msg) from None
            if not isinstance(obj, dict) or obj.get("ev") not in EVENT_KINDS or not isinstance(obj.get("t"), int):
                raise TraceParseError(lineno, "not a trace event record")
            events.append(obj)
        return cls(events)

    @classmethod
    def read(cls, path) -> "Trace":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


# -- simulation --------------------------------------------------------------


@dataclass
class _Channel:
    link: Link
    src: str
    dst: str
    rng: random.Random
    busy_until: int = 0

    def backlog_bytes(self, now: int) -> int:
        if self.busy_until <= now:
            return 0
        return -(-(self.busy_until - now) * self.link.rate_bps // 8_000_000)


def service_time_us(size: int, rate_bps: int) -> int:
    return -(-size * 8_000_000 // rate_bps)


@dataclass
class Measurement:
    t: int
    flow: str
    role: str
    pkt: int
    event: Any


@dataclass
class _Receiver:
    pending: int = 0
    token: int = 0
    last_data_pid: Optional[int] = None
    last_ack_pid: Optional[int] = None
    acks_sent: int = 0
    reply_to: Optional[tuple[str, int]] = None


class Simulator:
    """One run over a private copy of the network."""

    def __init__(self, net: Network, flows: list[FlowSpec], seed: int, horizon_us: int) -> None:
        if horizon_us <= 0:
            raise ValueError("horizon must be positive")
        self.net = copy.deepcopy(net)
        self.flows = {f.id: f for f in flows}
        self.seed = seed
        self.horizon = horizon_us
        self.trace = Trace()
        self.measurements: list[Measurement] = []
        self._heap: list = []
        self._seq = 0
        self._pid = 0
        self.now = 0
        self.channels: dict[tuple[str, str], _Channel] = {}
        for link in self.net.links:
            for u, v in ((link.a, link.b), (link.b, link.a)):
                self.channels[(u, v)] = _Channel(link, u, v, derive_rng(seed, "link", link.index, u, v))
        self.router_rng = {name: derive_rng(seed, "router", name) for name in self.net.routers}
        self.endpoints: dict[tuple[str, str], Endpoint] = {}
        self.receivers: dict[str, _Receiver] = {}
        for f in flows:
            self.endpoints[(f.id, "src")] = Endpoint(
                derive_rng(seed, "endpoint", f.id, "src"), granularity=f.granularity,
                integrity=f.integrity, window=f.window, nonce_values=list(f.nonce_values),
            )
            self.endpoints[(f.id, "dst")] = Endpoint(
                derive_rng(seed, "endpoint", f.id, "dst"), granularity=f.granularity,
                integrity=f.integrity, window=f.window, nonce_values=list(f.ack_nonce_values),
            )
            self.receivers[f.id] = _Receiver()

    # event queue

    def _push(self, t: int, kind: str, *args: Any) -> None:
        heapq.heappush(self._heap, (t, self._seq, kind, args))
        self._seq += 1

    def _record(self, ev: str, **fields: Any) -> None:
        fields["ev"] = ev
        fields["t"] = self.now
        self.trace.events.append(fields)

    def _local(self, node: str) -> int:
        return self.now + self.net.hosts[node].clock_offset_us

    def run(self) -> Trace:
        for f in self.flows.values():
            for seq in range(f.count):
                t = f.start_us + seq * f.interval_us
                if t > self.horizon:
                    break
                self._push(t, "send", f.id, seq)
        for change in self.net.route_changes:
            if change.time_us <= self.horizon:
                self._push(change.time_us, "route_change", change)
        while self._heap:
            t, _, kind, args = heapq.heappop(self._heap)
            assert t >= self.now, "event queue went backwards"
            self.now = t
            getattr(self, "_on_" + kind)(*args)
        return self.trace

    # handlers

    def _on_route_change(self, change: RouteChange) -> None:
        self._record("ROUTE_CHANGE", src=change.src, dst=change.dst, path=list(change.path))

    def _new_packet(self, f: FlowSpec, kind: str, seq: int, src_node: str, dst_node: str,
                    size: int, ttl: int, src: str, dst: str, sport: int, dport: int) -> SimPacket:
        self._pid += 1
        path = (src_node,) + self.net.route(src_node, dst_node, self.now) + (dst_node,)
        payload = hashlib.sha256(f"{f.id}:{kind}:{seq}".encode()).digest()
        return SimPacket(
            pid=self._pid, flow=f.id, kind=kind, seq=seq, src_node=src_node, dst_node=dst_node,
            path=path, src=src, dst=dst, sport=sport, dport=dport, ttl=ttl, size=size,
            shim=None, payload=payload, transport_hdr=struct.pack(">IB", seq, kind == "ack"),
            truth=PacketTruth(send_time=self.now),
        )

    def _emit(self, pkt: SimPacket, node: str) -> None:
        self._record(
            "SEND", node=node, pkt=pkt.pid, flow=pkt.flow, kind=pkt.kind, seq=pkt.seq,
            local_us=self._local(node), ttl=pkt.ttl, size=pkt.size, src=pkt.src, dst=pkt.dst,
            sport=pkt.sport, dport=pkt.dport, shim=encode_shim(pkt.shim).hex(), path=list(pkt.path),
            echo_of=pkt.truth.echo_of,
        )

    def _on_send(self, flow_id: str, seq: int) -> None:
        f = self.flows[flow_id]
        src_host, dst_host = self.net.hosts[f.src], self.net.hosts[f.dst]
        pkt = self._new_packet(f, "data", seq, f.src, f.dst, f.size_bytes, f.ttl,
                               src_host.address, dst_host.address, f.sport, f.dport)
        ep = self.endpoints[(f.id, "src")]
        pkt.truth.echo_of = self.receivers[f.id].last_ack_pid
        pkt.shim = ep.on_send(self._local(f.src), f.presence, view=pkt.view(),
                              hop_request=f.hop_request(seq), ttl=pkt.ttl)
        self._emit(pkt, f.src)
        if seq in f.drop_seqs:
            self._drop(pkt, f.src, "scripted")
            return
        pkt.truth.extra_delay = f.extra_delay_us.get(seq, 0)
        self._transmit(pkt, 0)

    def _drop(self, pkt: SimPacket, node: str, reason: str) -> None:
        pkt.truth.drop = reason
        self._record("DROP", node=node, pkt=pkt.pid, flow=pkt.flow, kind=pkt.kind, reason=reason)

    def _transmit(self, pkt: SimPacket, hop: int) -> None:
        """Put ``pkt`` on the link leaving path[hop]."""
        u, v = pkt.path[hop], pkt.path[hop + 1]
        ch = self.channels[(u, v)]
        link = ch.link
        lost = ch.rng.random() < link.loss
        reordered = ch.rng.random() < link.reorder
        duplicated = ch.rng.random() < link.duplicate
        if lost:
            self._drop(pkt, u, "loss")
            return
        if ch.backlog_bytes(self.now) + pkt.size > link.queue_bytes:
            self._drop(pkt, u, "queue")
            return
        start = max(self.now, ch.busy_until)
        ch.busy_until = start + service_time_us(pkt.size, link.rate_bps)
        arrive = ch.busy_until + link.delay_us
        pkt.truth.hops.append(HopTruth(u, self.now, start, ch.busy_until))
        if hop == 0 and pkt.truth.extra_delay:
            arrive += pkt.truth.extra_delay
        if reordered and link.reorder_delay_us:
            arrive += link.reorder_delay_us
            self._record("REORDER", node=u, pkt=pkt.pid, flow=pkt.flow, kind=pkt.kind,
                         extra_us=link.reorder_delay_us)
        self._push(arrive, "arrive", pkt, hop + 1)
        if duplicated:
            self._pid += 1
            twin = dataclasses.replace(pkt, pid=self._pid, truth=copy.deepcopy(pkt.truth))
            self._record("DUP", node=u, pkt=pkt.pid, dup=twin.pid, flow=pkt.flow, kind=pkt.kind)
            self._push(arrive, "arrive", twin, hop + 1)

    def _on_arrive(self, pkt: SimPacket, hop: int) -> None:
        node = pkt.path[hop]
        if hop == len(pkt.path) - 1:
            self._deliver(pkt, node)
            return
        rn = self.net.routers[node]
        state = rn.state
        out = self.channels[(node, pkt.path[hop + 1])]
        backlog = out.backlog_bytes(self.now)
        state.metrics.queue_delay_us = max(0, out.busy_until - self.now)
        state.metrics.available_capacity_bps = max(0, out.link.rate_bps - rn.background_load_bps)
        state.metrics.congestion_level = min(255, backlog * 255 // out.link.queue_bytes)
        before = pkt.shim.hop_stamp
        in_link = self.net.link_between(pkt.path[hop - 1], node)
        result = forward(
            state, pkt, self.now, self.router_rng[node],
            ip_arrive=in_link.ip_of(node),
            ip_depart=out.link.ip_of(node),
        )
        if result is None:
            self._drop(pkt, node, "ttl")
            return
        after = pkt.shim.hop_stamp
        if after is not None and after.filled and (before is None or not before.filled):
            self._record("STAMP", node=node, pkt=pkt.pid, flow=pkt.flow, kind=pkt.kind,
                         shim=encode_shim(pkt.shim).hex())
        self._transmit(pkt, hop)

    def _deliver(self, pkt: SimPacket, node: str) -> None:
        truth = pkt.truth
        self._record(
            "RECV", node=node, pkt=pkt.pid, flow=pkt.flow, kind=pkt.kind, seq=pkt.seq,
            local_us=self._local(node), ttl=pkt.ttl, size=pkt.size, src=pkt.src, dst=pkt.dst,
            sport=pkt.sport, dport=pkt.dport, shim=encode_shim(pkt.shim).hex(),
            truth={
                "send_time": truth.send_time,
                "owd": self.now - truth.send_time,
                "path": list(pkt.path),
                "echo_of": truth.echo_of,
                "hops": [[h.node, h.enqueue, h.service_start, h.depart] for h in truth.hops],
            },
        )
        f = self.flows[pkt.flow]
        role = "dst" if pkt.kind == "data" else "src"
        ep = self.endpoints[(f.id, role)]
        for event in ep.on_receive(pkt.shim, self._local(node), view=pkt.view(), ttl=pkt.ttl):
            self.measurements.append(Measurement(self.now, f.id, role, pkt.pid, event))
            if isinstance(event, IntegrityVerdict):
                self._record("MEASURE", node=node, pkt=pkt.pid, flow=f.id, type="integrity",
                             cover=int(event.cover), mode=int(event.mode), match=event.match)
        rx = self.receivers[f.id]
        if pkt.kind == "ack":
            rx.last_ack_pid = pkt.pid
            return
        if pkt.shim.timing is not None:
            rx.last_data_pid = pkt.pid
        rx.reply_to = (pkt.src, pkt.sport)
        if f.ack is None:
            return
        if f.ack.mode == "fixed":
            self._push(self.now + f.ack.hold_us, "ack", f.id, None)
            return
        rx.pending += 1
        if rx.pending >= f.ack.every:
            rx.token += 1
            self._on_ack(f.id, None)
        elif rx.pending == 1:
            self._push(self.now + f.ack.hold_us, "ack", f.id, rx.token)

    def _on_ack(self, flow_id: str, token: Optional[int]) -> None:
        f = self.flows[flow_id]
        rx = self.receivers[flow_id]
        if token is not None and token != rx.token:
            return
        rx.pending = 0
        if token is not None:
            rx.token += 1
        src_host = self.net.hosts[f.dst]
        dst_addr, dst_port = rx.reply_to or (self.net.hosts[f.src].address, f.sport)
        pkt = self._new_packet(f, "ack", rx.acks_sent, f.dst, f.src, f.ack.size_bytes, 64,
                               src_host.address, dst_addr, f.dport, dst_port)
        rx.acks_sent += 1
        pkt.truth.echo_of = rx.last_data_pid
        presence = f.presence & ~Presence.HOPREQ
        if Presence.HOPREQ in f.presence:
            presence |= Presence.HOPSTAMP
        ep = self.endpoints[(f.id, "dst")]
        pkt.shim = ep.on_send(self._local(f.dst), presence, view=pkt.view(), ttl=pkt.ttl)
        self._emit(pkt, f.dst)
        self._transmit(pkt, 0)


def run(net: Network, workload: list[FlowSpec], seed: int, horizon_us: int) -> Trace:
    """Simulate ``workload`` over ``net``; the result depends only on the arguments."""
    return Simulator(net, workload, seed, horizon_us).run()
