from __future__ import annotations

import functools
import ipaddress
import struct
from dataclasses import dataclass, field
from typing import Optional

from .wire import FieldClass, ShimHeader


@dataclass
class HopTruth:
    node: str
    enqueue: int
    service_start: int
    depart: int


@dataclass
class PacketTruth:
    """Simulator-only annotations; endpoint and router logic never read these."""

    send_time: int = 0
    hops: list[HopTruth] = field(default_factory=list)
    drop: Optional[str] = None
    echo_of: Optional[int] = None
    extra_delay: int = 0


@dataclass
class SimPacket:
    pid: int
    flow: str
    kind: str  # "data" or "ack"
    seq: int
    src_node: str
    dst_node: str
    path: tuple[str, ...]
    src: str
    dst: str
    sport: int
    dport: int
    ttl: int
    size: int
    shim: ShimHeader
    payload: bytes = b""
    transport_hdr: bytes = b""
    truth: PacketTruth = field(default_factory=PacketTruth)

    def view(self) -> dict[FieldClass, bytes]:
        """Field-class byte regions as they currently appear on the wire."""
        return {
            FieldClass.ADDRESSES: _addr16(self.src) + _addr16(self.dst),
            FieldClass.PORTS: struct.pack(">HH", self.sport, self.dport),
            FieldClass.TRANSPORT_HDR: self.transport_hdr,
            FieldClass.PAYLOAD: self.payload,
        }


@functools.lru_cache(maxsize=1024)
def _addr16(addr: str) -> bytes:
    ip = ipaddress.ip_address(addr)
    if ip.version == 4:
        return b"\x00" * 10 + b"\xff\xff" + ip.packed
    return ip.packed
