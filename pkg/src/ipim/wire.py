"""Byte layout of the IPIM shim header.

Layout (version 1, big-endian throughout)::

    [version:1][presence:1] then, in presence-bit order:
      HOSTID     2   host identifier
      TIMING     4   compact word: t_now:10 | t_echo:10 | t_delta:10 | granularity:2
      NONCE      8   n_xmit:u32, n_sum:u32
      INTEGRITY 18   i_cover:u8, i_mode:u8, i_hash:u64, i_echo:u64
      HOPREQ     2   kind<<4 | strategy, target_ttl
      HOPSTAMP   2+  stamped_ttl:u8, slot byte (0x80 filled | kind), payload
                     topology    40  router_id:u32, as:u32, ip_arrive:16, ip_depart:16
                     performance  8  t_now:u32, ql:u16, ac:u8 (low nibble), cl:u8
      EVOLUTION  4   e_cur:u16, e_echo:u16
      ACCUM      5   flags<<4 | ac_min, ql_sum:u16, ttl_prime:u8, echoed_delta:u8

The hop-stamp slot is sized by the sender according to the requested kind, so
its width is fixed from the moment the packet leaves the source.
"""

from __future__ import annotations

import functools
import ipaddress
import struct
from dataclasses import dataclass
from enum import IntEnum, IntFlag
from typing import Optional, Union

VERSION = 1

Address = Union[ipaddress.IPv4Address, ipaddress.IPv6Address]

TIMESTAMP_BITS = 10
TIMESTAMP_MOD = 1 << TIMESTAMP_BITS
NONCE_MOD = 1 << 32
EVOLUTION_MOD = 1 << 16
QL_MAX = 0xFFFF
# queue lengths (per-hop QL and accumulated QL_sum) are carried in 10 us units
QL_UNIT_US = 10
AC_MAX_CLASS = 15
AC_BASE_BPS = 80_000

# microseconds per unit for the 2-bit granularity selector
GRANULARITY_US = {0: 1, 1: 100, 2: 10_000, 3: 1_000_000}


class ShimError(ValueError):
    """Base class for shim encode/decode failures."""


class TruncatedError(ShimError):
    pass


class BadVersionError(ShimError):
    pass


class MalformedError(ShimError):
    """A field holds a value the layout does not allow."""


class TimingOverflowError(ShimError):
    pass


class Presence(IntFlag):
    NONE = 0
    HOSTID = 0x01
    TIMING = 0x02
    NONCE = 0x04
    INTEGRITY = 0x08
    HOPREQ = 0x10
    HOPSTAMP = 0x20
    EVOLUTION = 0x40
    ACCUM = 0x80


class FieldClass(IntFlag):
    """Packet regions an integrity digest can cover."""

    NONE = 0
    ADDRESSES = 0x01
    PORTS = 0x02
    TRANSPORT_HDR = 0x04
    PAYLOAD = 0x08
    IPIM_FIELDS = 0x10


ALL_FIELD_CLASSES = (
    FieldClass.ADDRESSES,
    FieldClass.PORTS,
    FieldClass.TRANSPORT_HDR,
    FieldClass.PAYLOAD,
    FieldClass.IPIM_FIELDS,
)
FULL_COVER = FieldClass(sum(ALL_FIELD_CLASSES))


class IntegrityMode(IntEnum):
    PLAIN = 0
    SENDER_SALT = 1
    SHARED_SALT = 2


class HopKind(IntEnum):
    TOPOLOGY = 1
    PERFORMANCE = 2


class StampStrategy(IntEnum):
    PROBABILISTIC = 1
    TRIGGERED = 2


@dataclass(frozen=True)
class TimingTuple:
    t_now: int
    t_echo: int
    t_delta: int
    granularity: int = 0

    @property
    def unit_us(self) -> int:
        return GRANULARITY_US[self.granularity]


@dataclass(frozen=True)
class NonceTuple:
    n_xmit: int
    n_sum: int


@dataclass(frozen=True)
class IntegrityTuple:
    i_cover: FieldClass
    i_mode: IntegrityMode
    i_hash: int
    i_echo: int = 0


@dataclass(frozen=True)
class HopRequest:
    kind: HopKind
    strategy: StampStrategy
    target_ttl: Optional[int] = None


@dataclass(frozen=True)
class TopologyInfo:
    router_id: int
    as_number: int
    ip_arrive: Address
    ip_depart: Address


@dataclass(frozen=True)
class PerformanceInfo:
    t_now: int
    ql: int
    ac: int
    cl: int


@dataclass(frozen=True)
class HopStamp:
    """The single per-packet stamp slot; empty until a router fills it."""

    kind: HopKind
    stamped_ttl: int = 0
    topology: Optional[TopologyInfo] = None
    performance: Optional[PerformanceInfo] = None

    @property
    def filled(self) -> bool:
        return self.topology is not None or self.performance is not None


@dataclass(frozen=True)
class EvolutionTuple:
    e_cur: int
    e_echo: int = 0


@dataclass(frozen=True)
class AccumTuple:
    """Path-accumulated capacity/queue information.

    ``echo`` marks a tuple carried back by the receiver; routers leave echoed
    tuples alone.
    """

    ac_min: int
    ql_sum: int
    ttl_prime: int
    echoed_delta: int = 0
    echo: bool = False


@dataclass(frozen=True)
class ShimHeader:
    version: int = VERSION
    host_id: Optional[int] = None
    timing: Optional[TimingTuple] = None
    nonce: Optional[NonceTuple] = None
    integrity: Optional[IntegrityTuple] = None
    hop_request: Optional[HopRequest] = None
    hop_stamp: Optional[HopStamp] = None
    evolution: Optional[EvolutionTuple] = None
    accum: Optional[AccumTuple] = None

    @property
    def presence(self) -> Presence:
        bits = Presence.NONE
        for flag, value in (
            (Presence.HOSTID, self.host_id),
            (Presence.TIMING, self.timing),
            (Presence.NONCE, self.nonce),
            (Presence.INTEGRITY, self.integrity),
            (Presence.HOPREQ, self.hop_request),
            (Presence.HOPSTAMP, self.hop_stamp),
            (Presence.EVOLUTION, self.evolution),
            (Presence.ACCUM, self.accum),
        ):
            if value is not None:
                bits |= flag
        return bits


# ---------------------------------------------------------------------------
# compact timing word
# ---------------------------------------------------------------------------


def granularity_unit_us(granularity: int) -> int:
    try:
        return GRANULARITY_US[granularity]
    except KeyError:
        raise MalformedError(f"granularity selector {granularity!r} not in 0..3") from None


def pack_compact_timing(t: TimingTuple) -> int:
    """Pack a timing tuple into its 32-bit wire word."""
    for name in ("t_now", "t_echo", "t_delta"):
        value = getattr(t, name)
        if not 0 <= value < TIMESTAMP_MOD:
            raise TimingOverflowError(f"{name}={value} does not fit in {TIMESTAMP_BITS} bits")
    granularity_unit_us(t.granularity)
    return (t.t_now << 22) | (t.t_echo << 12) | (t.t_delta << 2) | t.granularity


def unpack_compact_timing(word: int) -> TimingTuple:
    word &= 0xFFFFFFFF
    return TimingTuple(
        t_now=(word >> 22) & 0x3FF,
        t_echo=(word >> 12) & 0x3FF,
        t_delta=(word >> 2) & 0x3FF,
        granularity=word & 0x3,
    )


# ---------------------------------------------------------------------------
# coarse rate classes
# ---------------------------------------------------------------------------


def coarse_rate_class(rate_bps: int) -> int:
    """Largest class N with 80 kbit/s * 2**N <= rate, clamped to 0..15."""
    if rate_bps < AC_BASE_BPS:
        return 0
    return min(AC_MAX_CLASS, (int(rate_bps) // AC_BASE_BPS).bit_length() - 1)


def rate_of_class(ac: int) -> int:
    return AC_BASE_BPS << ac


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------

_TOPOLOGY_LEN = 40
_PERFORMANCE_LEN = 8
_SLOT_FILLED = 0x80
_ACCUM_ECHO = 0x1


def _check(cond: bool, message: str) -> None:
    if not cond:
        raise MalformedError(message)


def _uint(value: int, bits: int, name: str) -> None:
    _check(isinstance(value, int) and 0 <= value < (1 << bits), f"{name}={value!r} is not a u{bits}")


_V4_MAPPED = b"\x00" * 10 + b"\xff\xff"


def _address_bytes(addr: Address) -> bytes:
    if isinstance(addr, ipaddress.IPv4Address):
        return _V4_MAPPED + addr.packed
    if isinstance(addr, ipaddress.IPv6Address):
        return addr.packed
    raise MalformedError(f"not an IP address: {addr!r}")


@functools.lru_cache(maxsize=4096)
def _address_from(raw: bytes) -> Address:
    if raw[:12] == _V4_MAPPED:
        return ipaddress.IPv4Address(raw[12:])
    v6 = ipaddress.IPv6Address(raw)
    return v6.ipv4_mapped if v6.ipv4_mapped is not None else v6


def slot_length(kind: HopKind) -> int:
    return 2 + (_TOPOLOGY_LEN if kind == HopKind.TOPOLOGY else _PERFORMANCE_LEN)


def encoded_length(h: ShimHeader) -> int:
    """Length of ``encode_shim(h)`` without building it."""
    fixed = {
        Presence.HOSTID: 2,
        Presence.TIMING: 4,
        Presence.NONCE: 8,
        Presence.INTEGRITY: 18,
        Presence.HOPREQ: 2,
        Presence.EVOLUTION: 4,
        Presence.ACCUM: 5,
    }
    n = 2 + sum(width for flag, width in fixed.items() if flag in h.presence)
    if h.hop_stamp is not None:
        n += slot_length(h.hop_stamp.kind)
    return n


def _validate(h: ShimHeader) -> None:
    _check(h.version == VERSION, f"unsupported version {h.version!r}")
    if h.host_id is not None:
        _uint(h.host_id, 16, "host_id")
    if h.nonce is not None:
        _uint(h.nonce.n_xmit, 32, "n_xmit")
        _uint(h.nonce.n_sum, 32, "n_sum")
    if h.integrity is not None:
        i = h.integrity
        _check(isinstance(i.i_cover, int) and 0 <= i.i_cover <= FULL_COVER, f"i_cover={i.i_cover!r}")
        _check(i.i_mode in IntegrityMode.__members__.values(), f"i_mode={i.i_mode!r}")
        _uint(i.i_hash, 64, "i_hash")
        _uint(i.i_echo, 64, "i_echo")
    if h.hop_request is not None:
        r = h.hop_request
        _check(r.kind in HopKind.__members__.values(), f"hop kind {r.kind!r}")
        _check(r.strategy in StampStrategy.__members__.values(), f"strategy {r.strategy!r}")
        if r.strategy == StampStrategy.TRIGGERED:
            _check(r.target_ttl is not None, "TRIGGERED request needs target_ttl")
            _uint(r.target_ttl, 8, "target_ttl")
        else:
            _check(r.target_ttl is None, "target_ttl is only meaningful for TRIGGERED")
    if h.hop_stamp is not None:
        s = h.hop_stamp
        _check(s.kind in HopKind.__members__.values(), f"stamp kind {s.kind!r}")
        _uint(s.stamped_ttl, 8, "stamped_ttl")
        _check(s.topology is None or s.performance is None, "stamp holds both topology and performance")
        if h.hop_request is not None:
            _check(s.kind == h.hop_request.kind, "stamp slot kind differs from hop request kind")
        if s.topology is not None:
            _check(s.kind == HopKind.TOPOLOGY, "topology info in a performance slot")
            _uint(s.topology.router_id, 32, "router_id")
            _uint(s.topology.as_number, 32, "as_number")
        elif s.performance is not None:
            p = s.performance
            _check(s.kind == HopKind.PERFORMANCE, "performance info in a topology slot")
            _uint(p.t_now, 32, "t_now")
            _uint(p.ql, 16, "ql")
            _uint(p.ac, 4, "ac")
            _uint(p.cl, 8, "cl")
        else:
            _check(s.stamped_ttl == 0, "empty stamp slot with nonzero stamped_ttl")
    if h.evolution is not None:
        _uint(h.evolution.e_cur, 16, "e_cur")
        _uint(h.evolution.e_echo, 16, "e_echo")
    if h.accum is not None:
        a = h.accum
        _uint(a.ac_min, 4, "ac_min")
        _uint(a.ql_sum, 16, "ql_sum")
        _uint(a.ttl_prime, 8, "ttl_prime")
        _uint(a.echoed_delta, 8, "echoed_delta")


def encode_shim(h: ShimHeader) -> bytes:
    _validate(h)
    out = bytearray((h.version, int(h.presence)))
    if h.host_id is not None:
        out += struct.pack(">H", h.host_id)
    if h.timing is not None:
        out += struct.pack(">I", pack_compact_timing(h.timing))
    if h.nonce is not None:
        out += struct.pack(">II", h.nonce.n_xmit, h.nonce.n_sum)
    if h.integrity is not None:
        i = h.integrity
        out += struct.pack(">BBQQ", int(i.i_cover), int(i.i_mode), i.i_hash, i.i_echo)
    if h.hop_request is not None:
        r = h.hop_request
        out += struct.pack(">BB", (int(r.kind) << 4) | int(r.strategy), r.target_ttl or 0)
    if h.hop_stamp is not None:
        s = h.hop_stamp
        out += struct.pack(">BB", s.stamped_ttl, (_SLOT_FILLED if s.filled else 0) | int(s.kind))
        if s.kind == HopKind.TOPOLOGY:
            t = s.topology
            if t is None:
                out += bytes(_TOPOLOGY_LEN)
            else:
                out += struct.pack(">II", t.router_id, t.as_number)
                out += _address_bytes(t.ip_arrive) + _address_bytes(t.ip_depart)
        else:
            p = s.performance
            if p is None:
                out += bytes(_PERFORMANCE_LEN)
            else:
                out += struct.pack(">IHBB", p.t_now, p.ql, p.ac, p.cl)
    if h.evolution is not None:
        out += struct.pack(">HH", h.evolution.e_cur, h.evolution.e_echo)
    if h.accum is not None:
        a = h.accum
        flags = _ACCUM_ECHO if a.echo else 0
        out += struct.pack(">BHBB", (flags << 4) | a.ac_min, a.ql_sum, a.ttl_prime, a.echoed_delta)
    return bytes(out)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"{what}: need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        chunk = bytes(self.data[self.pos : self.pos + n])
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _enum(cls, value: int, what: str):
    try:
        return cls(value)
    except ValueError:
        raise MalformedError(f"{what}: unknown value {value}") from None


def decode_shim_prefix(data: bytes) -> tuple[ShimHeader, int]:
    """Decode a shim from the front of ``data``.

    Returns the header and the number of trailing bytes not consumed by it.
    """
    r = _Reader(data)
    version, presence = r.unpack(">BB", "shim preamble")
    if version != VERSION:
        raise BadVersionError(f"unknown shim version {version}")
    presence = Presence(presence)
    fields: dict = {}
    if Presence.HOSTID in presence:
        (fields["host_id"],) = r.unpack(">H", "HOSTID")
    if Presence.TIMING in presence:
        (word,) = r.unpack(">I", "TIMING")
        fields["timing"] = unpack_compact_timing(word)
    if Presence.NONCE in presence:
        fields["nonce"] = NonceTuple(*r.unpack(">II", "NONCE"))
    if Presence.INTEGRITY in presence:
        cover, mode, i_hash, i_echo = r.unpack(">BBQQ", "INTEGRITY")
        _check(cover <= FULL_COVER, f"INTEGRITY: i_cover 0x{cover:02x} has undefined bits")
        fields["integrity"] = IntegrityTuple(
            FieldClass(cover), _enum(IntegrityMode, mode, "INTEGRITY i_mode"), i_hash, i_echo
        )
    request = None
    if Presence.HOPREQ in presence:
        packed, target = r.unpack(">BB", "HOPREQ")
        kind = _enum(HopKind, packed >> 4, "HOPREQ kind")
        strategy = _enum(StampStrategy, packed & 0xF, "HOPREQ strategy")
        if strategy == StampStrategy.TRIGGERED:
            request = HopRequest(kind, strategy, target)
        else:
            _check(target == 0, "HOPREQ: target_ttl set on a PROBABILISTIC request")
            request = HopRequest(kind, strategy)
        fields["hop_request"] = request
    if Presence.HOPSTAMP in presence:
        stamped_ttl, slot = r.unpack(">BB", "HOPSTAMP")
        _check(slot & 0x70 == 0, f"HOPSTAMP: reserved slot bits set (0x{slot:02x})")
        kind = _enum(HopKind, slot & 0xF, "HOPSTAMP kind")
        filled = bool(slot & _SLOT_FILLED)
        if request is not None:
            _check(kind == request.kind, "HOPSTAMP: slot kind differs from hop request kind")
        if kind == HopKind.TOPOLOGY:
            raw = r.take(_TOPOLOGY_LEN, "HOPSTAMP topology")
        else:
            raw = r.take(_PERFORMANCE_LEN, "HOPSTAMP performance")
        if not filled:
            _check(stamped_ttl == 0 and not any(raw), "HOPSTAMP: empty slot carries data")
            fields["hop_stamp"] = HopStamp(kind)
        elif kind == HopKind.TOPOLOGY:
            rid, asn = struct.unpack(">II", raw[:8])
            info = TopologyInfo(rid, asn, _address_from(raw[8:24]), _address_from(raw[24:40]))
            fields["hop_stamp"] = HopStamp(kind, stamped_ttl, topology=info)
        else:
            t_now, ql, ac, cl = struct.unpack(">IHBB", raw)
            _check(ac <= AC_MAX_CLASS, f"HOPSTAMP: ac class {ac} exceeds 4 bits")
            fields["hop_stamp"] = HopStamp(kind, stamped_ttl, performance=PerformanceInfo(t_now, ql, ac, cl))
    if Presence.EVOLUTION in presence:
        fields["evolution"] = EvolutionTuple(*r.unpack(">HH", "EVOLUTION"))
    if Presence.ACCUM in presence:
        packed, ql_sum, ttl_prime, echoed = r.unpack(">BHBB", "ACCUM")
        flags = packed >> 4
        _check(flags & ~_ACCUM_ECHO == 0, f"ACCUM: reserved flag bits set (0x{flags:x})")
        fields["accum"] = AccumTuple(packed & 0xF, ql_sum, ttl_prime, echoed, bool(flags & _ACCUM_ECHO))
    return ShimHeader(version=version, **fields), len(data) - r.pos


def decode_shim(data: bytes) -> ShimHeader:
    header, _ = decode_shim_prefix(data)
    return header
