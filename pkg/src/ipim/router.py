"""Router and middlebox handling of IPIM shims."""

from __future__ import annotations

import dataclasses
import enum
import random
from dataclasses import dataclass, field
from typing import Optional

from .integrity import compute_integrity
from .endpoint import ipim_field_bytes
from .packet import SimPacket
from .wire import (
    EVOLUTION_MOD,
    NONCE_MOD,
    QL_MAX,
    QL_UNIT_US,
    AccumTuple,
    Address,
    FieldClass,
    HopKind,
    HopStamp,
    IntegrityMode,
    PerformanceInfo,
    StampStrategy,
    TopologyInfo,
    coarse_rate_class,
)


class AdversaryKind(enum.Enum):
    NONE = "NONE"
    UNDERREPORT_OWN_QL = "UNDERREPORT_OWN_QL"
    INFLATE_VICTIM_QL = "INFLATE_VICTIM_QL"
    NAT_REWRITE = "NAT_REWRITE"
    NONCE_TAMPER = "NONCE_TAMPER"
    HASH_RECOMPUTE = "HASH_RECOMPUTE"


@dataclass
class AdversaryPolicy:
    kind: AdversaryKind = AdversaryKind.NONE
    # UNDERREPORT_OWN_QL
    scale: float = 1.0
    # INFLATE_VICTIM_QL: stamps made this many hops upstream belong to the victim
    victim_as: Optional[int] = None
    inflate_us: int = 0
    victim_hops: tuple[int, ...] = (1,)
    # NAT_REWRITE: source rewrites; destinations are mapped back through the inverse
    addr_map: dict[str, str] = field(default_factory=dict)
    port_map: dict[int, int] = field(default_factory=dict)
    # NONCE_TAMPER
    nonce_delta: int = 1


@dataclass
class RouterMetrics:
    queue_delay_us: int = 0
    available_capacity_bps: int = 0
    congestion_level: int = 0


@dataclass
class Participation:
    stamping: bool = True
    evolution: bool = True
    accum: bool = True


@dataclass
class RouterState:
    router_id: int
    as_number: int
    interfaces: list[Address] = field(default_factory=list)
    o_r: int = 0
    stamp_probability: float = 0.0
    metrics: RouterMetrics = field(default_factory=RouterMetrics)
    participation: Participation = field(default_factory=Participation)
    adversary: AdversaryPolicy = field(default_factory=AdversaryPolicy)
    clock_offset_us: int = 0
    shed_threshold_us: Optional[int] = None
    name: str = ""

    def __post_init__(self) -> None:
        if not 0.0 <= self.stamp_probability <= 1.0:
            raise ValueError(f"stamp_probability {self.stamp_probability} outside [0, 1]")
        if not -(1 << 15) <= self.o_r < (1 << 15):
            raise ValueError(f"evolution offset {self.o_r} is not a signed 16-bit value")


def apply_evolution(e_cur: int, o_r: int) -> int:
    return (e_cur + o_r) % EVOLUTION_MOD


def reported_queue_delay_us(state: RouterState) -> int:
    qd = state.metrics.queue_delay_us
    if state.adversary.kind == AdversaryKind.UNDERREPORT_OWN_QL:
        qd = int(qd * state.adversary.scale)
    return qd


def apply_accum(t: AccumTuple, state: RouterState) -> AccumTuple:
    ql = min(QL_MAX, t.ql_sum + reported_queue_delay_us(state) // QL_UNIT_US)
    return dataclasses.replace(
        t,
        ac_min=min(t.ac_min, coarse_rate_class(state.metrics.available_capacity_bps)),
        ql_sum=ql,
        ttl_prime=(t.ttl_prime - 1) % 256,
    )


def _stamp(state: RouterState, kind: HopKind, ttl: int, now: int,
           ip_arrive: Optional[Address], ip_depart: Optional[Address]) -> HopStamp:
    if kind == HopKind.TOPOLOGY:
        first = state.interfaces[0] if state.interfaces else None
        arrive = ip_arrive or first
        depart = ip_depart or arrive
        info = TopologyInfo(state.router_id, state.as_number, arrive, depart)
        return HopStamp(kind, ttl, topology=info)
    m = state.metrics
    perf = PerformanceInfo(
        t_now=(now + state.clock_offset_us) % (1 << 32),
        ql=min(QL_MAX, reported_queue_delay_us(state) // QL_UNIT_US),
        ac=coarse_rate_class(m.available_capacity_bps),
        cl=max(0, min(255, m.congestion_level)),
    )
    return HopStamp(kind, ttl, performance=perf)


def forward(
    state: RouterState,
    pkt: SimPacket,
    now: int,
    rand: random.Random,
    *,
    ip_arrive: Optional[Address] = None,
    ip_depart: Optional[Address] = None,
) -> Optional[SimPacket]:
    """Process one packet; returns it ready to transmit, or None when dropped.

    The stamp decision and stamped TTL use the TTL the packet arrived with.
    A router whose queue delay exceeds its shed threshold skips all IPIM work.
    """
    arrival_ttl = pkt.ttl
    if arrival_ttl <= 1:
        pkt.ttl = 0
        return None
    pkt.ttl = arrival_ttl - 1
    shim = pkt.shim
    shedding = state.shed_threshold_us is not None and state.metrics.queue_delay_us > state.shed_threshold_us
    if not shedding:
        part = state.participation
        req, slot = shim.hop_request, shim.hop_stamp
        if part.stamping and req is not None and slot is not None and not slot.filled:
            if req.strategy == StampStrategy.PROBABILISTIC:
                hit = rand.random() < state.stamp_probability
            else:
                hit = arrival_ttl == req.target_ttl
            if hit:
                stamp = _stamp(state, req.kind, arrival_ttl, now, ip_arrive, ip_depart)
                shim = dataclasses.replace(shim, hop_stamp=stamp)
        if part.evolution and shim.evolution is not None:
            evo = dataclasses.replace(shim.evolution, e_cur=apply_evolution(shim.evolution.e_cur, state.o_r))
            shim = dataclasses.replace(shim, evolution=evo)
        if part.accum and shim.accum is not None and not shim.accum.echo:
            shim = dataclasses.replace(shim, accum=apply_accum(shim.accum, state))
    pkt.shim = shim
    if state.adversary.kind != AdversaryKind.NONE:
        apply_adversary(state.adversary, pkt, arrival_ttl=arrival_ttl, rand=rand)
    return pkt


def apply_adversary(
    policy: AdversaryPolicy,
    pkt: SimPacket,
    *,
    arrival_ttl: Optional[int] = None,
    rand: Optional[random.Random] = None,
) -> SimPacket:
    kind = policy.kind
    shim = pkt.shim
    if kind == AdversaryKind.INFLATE_VICTIM_QL:
        extra = policy.inflate_us // QL_UNIT_US
        if shim.accum is not None and not shim.accum.echo:
            shim = dataclasses.replace(shim, accum=dataclasses.replace(
                shim.accum, ql_sum=min(QL_MAX, shim.accum.ql_sum + extra)))
        stamp = shim.hop_stamp
        if (
            stamp is not None
            and stamp.performance is not None
            and shim.hop_request is not None
            and arrival_ttl is not None
            and stamp.stamped_ttl - arrival_ttl in policy.victim_hops
        ):
            perf = dataclasses.replace(stamp.performance, ql=min(QL_MAX, stamp.performance.ql + extra))
            shim = dataclasses.replace(shim, hop_stamp=dataclasses.replace(stamp, performance=perf))
    elif kind == AdversaryKind.NAT_REWRITE:
        inverse_addr = {v: k for k, v in policy.addr_map.items()}
        inverse_port = {v: k for k, v in policy.port_map.items()}
        if pkt.src in policy.addr_map:
            pkt.src = policy.addr_map[pkt.src]
            pkt.sport = policy.port_map.get(pkt.sport, pkt.sport)
        elif pkt.dst in inverse_addr:
            pkt.dst = inverse_addr[pkt.dst]
            pkt.dport = inverse_port.get(pkt.dport, pkt.dport)
    elif kind == AdversaryKind.NONCE_TAMPER:
        if shim.nonce is not None:
            shim = dataclasses.replace(shim, nonce=dataclasses.replace(
                shim.nonce, n_xmit=(shim.nonce.n_xmit + policy.nonce_delta) % NONCE_MOD))
    elif kind == AdversaryKind.HASH_RECOMPUTE:
        tup = shim.integrity
        if tup is not None:
            view = pkt.view()
            view[FieldClass.IPIM_FIELDS] = ipim_field_bytes(shim, tup.i_cover, tup.i_mode)
            if tup.i_mode == IntegrityMode.PLAIN:
                forged = compute_integrity(view, tup.i_cover, IntegrityMode.PLAIN)
            else:
                # the salt is unknown here; the best a middlebox can do is guess
                guess = (rand or random.Random(0)).randbytes(8)
                forged = compute_integrity(view, tup.i_cover, tup.i_mode, guess)
            shim = dataclasses.replace(shim, integrity=dataclasses.replace(tup, i_hash=forged))
    pkt.shim = shim
    return pkt

