"""Turn simulation traces into path knowledge.

Everything here reads only what an observer at a host sees: shim bytes,
local timestamps and IP header fields recorded on SEND and RECV. The
``truth`` blocks in the trace are never consulted.
"""

from __future__ import annotations

import statistics
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Optional, Sequence

from .endpoint import RttDecomposition, decompose, verify_participation
from .integrity import localize_mutation
from .netsim import Trace
from .nonce import ArrivalReport, InconsistentError, NonceTracker
from .wire import (
    EVOLUTION_MOD,
    QL_UNIT_US,
    TIMESTAMP_MOD,
    FieldClass,
    HopKind,
    ShimHeader,
    decode_shim,
    granularity_unit_us,
)

__all__ = [
    "EmptySeriesError",
    "InsufficientDataError",
    "RouterEntry",
    "TopologyMap",
    "ChangePoint",
    "DiscrepancyParams",
    "Flag",
    "DiscrepancyReport",
    "latency_series",
    "build_topology_map",
    "evolution_series",
    "detect_path_change",
    "participation_series",
    "verify_participation",
    "arrival_report",
    "integrity_history",
    "discrepancy_check",
]


class EmptySeriesError(ValueError):
    """The flow carries no timing tuples."""


class InsufficientDataError(ValueError):
    """Too few samples for any discrepancy test."""


@lru_cache(maxsize=65536)
def _shim(hexstr: str) -> ShimHeader:
    return decode_shim(bytes.fromhex(hexstr))


def _role_events(trace: Trace, flow: str, role: str) -> list[tuple[str, dict]]:
    """(direction, event) pairs as seen by one endpoint of the flow."""
    own, peer = ("data", "ack") if role == "src" else ("ack", "data")
    out = []
    for e in trace.events:
        if e.get("flow") != flow:
            continue
        if e["ev"] == "SEND" and e["kind"] == own:
            out.append(("tx", e))
        elif e["ev"] == "RECV" and e["kind"] == peer:
            out.append(("rx", e))
    return out


# -- latency -------------------------------------------------------------------


def _replay_timing(events: list[tuple[str, dict]]) -> Iterable[tuple[dict, ShimHeader, RttDecomposition]]:
    """Replay an endpoint's timestamp log: sent t_now values pruned at half
    the timestamp range, echoes matched against them."""
    sent_log: dict[int, int] = {}
    granularity: Optional[int] = None
    for direction, e in events:
        shim = _shim(e["shim"])
        timing = shim.timing
        if timing is None:
            continue
        local = e["local_us"]
        if direction == "tx":
            granularity = timing.granularity
            sent_log[timing.t_now] = local
            horizon = TIMESTAMP_MOD // 2 * timing.unit_us
            sent_log = {k: v for k, v in sent_log.items() if local - v < horizon}
            continue
        if granularity is None or timing.granularity != granularity or timing.t_echo not in sent_log:
            continue
        unit = granularity_unit_us(granularity)
        d = decompose((local // unit) % TIMESTAMP_MOD, timing.t_echo, timing.t_delta, unit)
        if d.network_delay >= 0:
            yield e, shim, d


def latency_series(trace: Trace, flow: str, role: str = "src") -> list[RttDecomposition]:
    """One decomposition per echoed timing tuple the given endpoint receives."""
    events = _role_events(trace, flow, role)
    if not events:
        raise ValueError(f"flow {flow!r} not in trace")
    if not any(_shim(e["shim"]).timing is not None for _, e in events):
        raise EmptySeriesError(f"flow {flow!r} has no timing tuples")
    return [d for _, _, d in _replay_timing(events)]


# -- topology ------------------------------------------------------------------


@dataclass
class RouterEntry:
    as_number: int
    interfaces: set[str] = field(default_factory=set)
    stamped_ttls: set[int] = field(default_factory=set)


@dataclass
class TopologyMap:
    routers: dict[int, RouterEntry] = field(default_factory=dict)
    # (flow, packet kind) -> [(stamped_ttl, as_number, confidence)], nearest the sender first
    as_path_estimates: dict[tuple[str, str], list[tuple[int, int, float]]] = field(default_factory=dict)
    # (address, router already owning it, router also claiming it)
    conflicts: list[tuple[str, int, int]] = field(default_factory=list)
    owner: dict[str, int] = field(default_factory=dict)

    def aliases(self, router_id: int) -> set[str]:
        return set(self.routers[router_id].interfaces)

    def ttl_as_map(self, flow: str, kind: str = "data") -> dict[int, int]:
        return {ttl: asn for ttl, asn, _ in self.as_path_estimates.get((flow, kind), [])}


def _in_transit_stamps(trace: Trace, kind: HopKind) -> Iterable[tuple[dict, object]]:
    for e in trace.events:
        if e["ev"] != "RECV":
            continue
        shim = _shim(e["shim"])
        stamp = shim.hop_stamp
        if shim.hop_request is not None and stamp is not None and stamp.filled and stamp.kind == kind:
            yield e, stamp


def build_topology_map(trace: Trace) -> TopologyMap:
    topo = TopologyMap()
    votes: dict[tuple[str, str], dict[int, Counter]] = defaultdict(lambda: defaultdict(Counter))
    for e, stamp in _in_transit_stamps(trace, HopKind.TOPOLOGY):
        info = stamp.topology
        entry = topo.routers.setdefault(info.router_id, RouterEntry(info.as_number))
        entry.stamped_ttls.add(stamp.stamped_ttl)
        for addr in {str(info.ip_arrive), str(info.ip_depart)}:
            owner = topo.owner.setdefault(addr, info.router_id)
            if owner != info.router_id:
                conflict = (addr, owner, info.router_id)
                if conflict not in topo.conflicts:
                    topo.conflicts.append(conflict)
                continue
            entry.interfaces.add(addr)
        votes[(e["flow"], e["kind"])][stamp.stamped_ttl][info.as_number] += 1
    for key, by_ttl in sorted(votes.items()):
        path = []
        for ttl in sorted(by_ttl, reverse=True):
            asn, n = sorted(by_ttl[ttl].items(), key=lambda kv: (-kv[1], kv[0]))[0]
            path.append((ttl, asn, n / sum(by_ttl[ttl].values())))
        topo.as_path_estimates[key] = path
    return topo


# -- path change -----------------------------------------------------------------


@dataclass(frozen=True)
class ChangePoint:
    index: int
    time: int
    old: int
    new: int


def _heard(shim: ShimHeader, sent_tnow: set[int]) -> bool:
    if shim.timing is not None:
        return shim.timing.t_echo in sent_tnow
    if shim.nonce is not None:
        return shim.nonce.n_sum != 0
    return True


def evolution_series(trace: Trace, flow: str, role: str = "src") -> list[tuple[int, int]]:
    """(trace time, path signature) for each echoed evolution tuple."""
    e_init: Optional[int] = None
    sent_tnow: set[int] = set()
    out = []
    for direction, e in _role_events(trace, flow, role):
        shim = _shim(e["shim"])
        if direction == "tx":
            if shim.evolution is not None:
                e_init = shim.evolution.e_cur
            if shim.timing is not None:
                sent_tnow.add(shim.timing.t_now)
        elif shim.evolution is not None and e_init is not None and _heard(shim, sent_tnow):
            out.append((e["t"], (shim.evolution.e_echo - e_init) % EVOLUTION_MOD))
    return out


def detect_path_change(series: Sequence[tuple[int, int]]) -> list[ChangePoint]:
    """Exact-match change points: every index where the signature differs from its predecessor."""
    if not series:
        raise ValueError("empty signature series")
    points = []
    for i in range(1, len(series)):
        if series[i][1] != series[i - 1][1]:
            points.append(ChangePoint(i, series[i][0], series[i - 1][1], series[i][1]))
    return points


# -- participation ---------------------------------------------------------------


def participation_series(trace: Trace, flow: str, role: str = "src") -> list[tuple[int, int, int, bool]]:
    """(time, initial delta, echoed delta, complete) per echoed accumulation tuple."""
    initial: Optional[int] = None
    out = []
    for direction, e in _role_events(trace, flow, role):
        accum = _shim(e["shim"]).accum
        if accum is None:
            continue
        if direction == "tx" and not accum.echo and initial is None:
            initial = abs(e["ttl"] - accum.ttl_prime)
        elif direction == "rx" and accum.echo and initial is not None:
            out.append((e["t"], initial, accum.echoed_delta, verify_participation(initial, accum.echoed_delta)))
    return out


# -- arrivals ----------------------------------------------------------------------


def arrival_report(trace: Trace, flow: str, role: str = "src", window: int = 3) -> tuple[ArrivalReport, int]:
    """Replay the cumulative-nonce reconstruction; returns the report and the inconsistency count."""
    tracker = NonceTracker(window=window)
    for direction, e in _role_events(trace, flow, role):
        nonce = _shim(e["shim"]).nonce
        if nonce is None:
            continue
        if direction == "tx":
            tracker.sent(nonce.n_xmit)
        else:
            try:
                tracker.observe(nonce.n_xmit, nonce.n_sum)
            except InconsistentError:
                pass
    return tracker.summary(), tracker.inconsistencies


# -- integrity ---------------------------------------------------------------------


def integrity_history(trace: Trace, flow: str, node: Optional[str] = None) -> list[tuple[FieldClass, bool]]:
    return [
        (FieldClass(e["cover"]), e["match"])
        for e in trace.of("MEASURE", flow=flow)
        if e.get("type") == "integrity" and (node is None or e["node"] == node)
    ]


# -- discrepancies -------------------------------------------------------------------


@dataclass
class DiscrepancyParams:
    ql_mismatch_fraction: float = 0.25
    median_shift_us: int = 5000
    min_samples: int = 30
    # known propagation and service floor per flow; otherwise the minimum observed RTT
    floor_us: dict[str, int] = field(default_factory=dict)
    # mismatches below this many timing units are rounding, never a flag
    guard_units: int = 2


@dataclass(frozen=True)
class Flag:
    subject: str
    kind: str
    magnitude: float
    samples: int


@dataclass
class DiscrepancyReport:
    flagged: list[Flag] = field(default_factory=list)


def _qlsum_samples(trace: Trace, flow: str) -> list[tuple[int, int]]:
    """(reported ql_sum in us, network delay in us) for ACKs carrying both."""
    return [
        (shim.accum.ql_sum * QL_UNIT_US, d.network_delay_us)
        for _, shim, d in _replay_timing(_role_events(trace, flow, "src"))
        if shim.accum is not None and shim.accum.echo
    ]


def _perf_samples(trace: Trace, topo: TopologyMap) -> list[tuple[str, frozenset[int], int, int]]:
    """(flow, ASes seen on the flow, attributed AS, reported queue delay in us)."""
    flow_ases: dict[tuple[str, str], frozenset[int]] = {
        key: frozenset(asn for _, asn, _ in path) for key, path in topo.as_path_estimates.items()
    }
    out = []
    for e, stamp in _in_transit_stamps(trace, HopKind.PERFORMANCE):
        key = (e["flow"], e["kind"])
        asn = topo.ttl_as_map(*key).get(stamp.stamped_ttl)
        if asn is None:
            continue
        out.append((e["flow"] + "/" + e["kind"], flow_ases[key], asn, stamp.performance.ql * QL_UNIT_US))
    return out


def discrepancy_check(trace: Trace, params: Optional[DiscrepancyParams] = None) -> DiscrepancyReport:
    """Cross-check router-reported queueing against end-to-end timing and across paths."""
    params = params or DiscrepancyParams()
    report = DiscrepancyReport()
    qualified = False

    for flow in trace.flows():
        samples = _qlsum_samples(trace, flow)
        if len(samples) < params.min_samples:
            continue
        qualified = True
        floor = params.floor_us.get(flow, min(rtt for _, rtt in samples))
        excess = [max(0, rtt - floor) for _, rtt in samples]
        mismatch = [abs(ql - x) for (ql, _), x in zip(samples, excess)]
        med_mismatch = statistics.median(mismatch)
        unit = _flow_unit_us(trace, flow)
        if med_mismatch > params.ql_mismatch_fraction * statistics.median(excess) and med_mismatch > params.guard_units * max(unit, QL_UNIT_US):
            report.flagged.append(Flag(f"flow:{flow}", "QLSUM_VS_RTT", float(med_mismatch), len(samples)))

    topo = build_topology_map(trace)
    perf = _perf_samples(trace, topo)
    all_ases = sorted({a for _, ases, _, _ in perf for a in ases})
    for victim in all_ases:
        for suspect in all_ases:
            if suspect == victim:
                continue
            with_s = [ql for _, ases, asn, ql in perf if asn == victim and suspect in ases]
            without = [ql for _, ases, asn, ql in perf if asn == victim and suspect not in ases]
            if len(with_s) < params.min_samples or len(without) < params.min_samples:
                continue
            qualified = True
            shift = statistics.median(with_s) - statistics.median(without)
            if shift > params.median_shift_us:
                report.flagged.append(Flag(
                    f"suspect:AS{suspect} victim:AS{victim}", "CONDITIONAL_BLAME", float(shift),
                    min(len(with_s), len(without)),
                ))
    if not qualified:
        raise InsufficientDataError(f"no flow has {params.min_samples} usable samples")
    return report


def _flow_unit_us(trace: Trace, flow: str) -> int:
    for e in trace.of("SEND", flow=flow):
        timing = _shim(e["shim"]).timing
        if timing is not None:
            return timing.unit_us
    return 1
