"""Per-flow endpoint behaviour: what a host writes into the shim and what it
learns from the shim its peer sends back."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Mapping, Optional, Union

from .integrity import compute_integrity, round_robin_covers
from .nonce import ArrivalReport, InconsistentError, NonceTracker
from .wire import (
    AC_MAX_CLASS,
    EVOLUTION_MOD,
    NONCE_MOD,
    TIMESTAMP_MOD,
    AccumTuple,
    EvolutionTuple,
    FieldClass,
    HopRequest,
    HopStamp,
    IntegrityMode,
    IntegrityTuple,
    NonceTuple,
    Presence,
    ShimHeader,
    TimingTuple,
    encode_shim,
    granularity_unit_us,
)

ROTATION_PERIOD_US = 30 * 60 * 1_000_000
NONCE_STEP_MAX = 1 << 16
TTL_PRIME_RANGE = (16, 240)
MAX_HOPS = 16

PacketView = Mapping[FieldClass, bytes]


@dataclass(frozen=True)
class RttDecomposition:
    """Feedback time split into host and network parts, in timing units."""

    feedback_time: int
    host_delay: int
    network_delay: int
    unit_us: int = 1

    @property
    def network_delay_us(self) -> int:
        return self.network_delay * self.unit_us


@dataclass(frozen=True)
class NonceInconsistency:
    observer_nx: int
    n_sum: int
    reason: str


@dataclass(frozen=True)
class IntegrityVerdict:
    cover: FieldClass
    mode: IntegrityMode
    match: bool


@dataclass(frozen=True)
class PathSignature:
    signature: int


@dataclass(frozen=True)
class ParticipationCheck:
    initial_delta: int
    echoed_delta: int
    ac_min: int
    ql_sum: int

    @property
    def complete(self) -> bool:
        return verify_participation(self.initial_delta, self.echoed_delta)


@dataclass(frozen=True)
class StampObserved:
    stamp: HopStamp
    echoed: bool


Event = Union[
    RttDecomposition,
    ArrivalReport,
    NonceInconsistency,
    IntegrityVerdict,
    PathSignature,
    ParticipationCheck,
    StampObserved,
]


def verify_participation(initial_delta: int, echoed_delta: int) -> bool:
    """True iff every router on the path processed the accumulated tuple."""
    return initial_delta == echoed_delta


def decompose(arrival: int, t_echo: int, t_delta: int, unit_us: int = 1) -> RttDecomposition:
    """Split the feedback time of an echoed timestamp.

    All arguments are in the same timing units; the subtraction wraps at the
    10-bit timestamp range.
    """
    feedback = (arrival - t_echo) % TIMESTAMP_MOD
    return RttDecomposition(feedback, t_delta, feedback - t_delta, unit_us)


def ipim_field_bytes(shim: ShimHeader, cover: FieldClass, mode: IntegrityMode) -> bytes:
    """The shim bytes an integrity digest covers under IPIM_FIELDS.

    Only the tuples no router rewrites are included, plus the cover and mode
    of the integrity tuple itself (never its digests).
    """
    stable = ShimHeader(host_id=shim.host_id, timing=shim.timing, nonce=shim.nonce)
    return encode_shim(stable) + bytes((int(cover), int(mode)))


@dataclass
class IntegrityConfig:
    mode: IntegrityMode = IntegrityMode.PLAIN
    salt: bytes = b""
    covers: list[FieldClass] = field(default_factory=round_robin_covers)


@dataclass
class HostIdSchedule:
    current: Optional[int] = None
    last_rotation: int = 0
    network_epoch: int = 0


class Endpoint:
    """One side of a flow.

    Times passed in are this host's local clock in microseconds; the timing
    tuple carries them reduced to the flow's granularity unit.
    """

    def __init__(
        self,
        rng: random.Random,
        *,
        granularity: int = 1,
        integrity: Optional[IntegrityConfig] = None,
        window: int = 3,
        rotation_period_us: int = ROTATION_PERIOD_US,
        nonce_values: Optional[list[int]] = None,
        max_outstanding: int = 16,
    ) -> None:
        self.rng = rng
        self.granularity = granularity
        self.unit_us = granularity_unit_us(granularity)
        self.rotation_period_us = rotation_period_us
        self.host_id_schedule = HostIdSchedule()

        self.last_rx_time: Optional[int] = None
        self.last_peer_tnow: Optional[int] = None
        self.sent_log: dict[int, int] = {}

        self.nonce_accumulator = 0
        self._n_xmit = rng.randrange(1 << 24)
        self._scripted_nonces = list(nonce_values) if nonce_values else []
        self.nonces = NonceTracker(window=window, max_outstanding=max_outstanding)

        self.integrity_config = integrity or IntegrityConfig()
        self.integrity_history: list[tuple[FieldClass, bool]] = []
        self._cover_index = 0
        self._echo_value: Optional[int] = None
        self._expected_echo: dict[int, tuple[int, FieldClass]] = {}

        self.e_init = rng.randrange(EVOLUTION_MOD)
        self._peer_e_cur: Optional[int] = None

        self.ttl_prime: Optional[int] = None
        self.initial_delta: Optional[int] = None
        self._accum_echo: Optional[AccumTuple] = None
        self._stamp_echo: Optional[HopStamp] = None
        self.peer_host_id: Optional[int] = None

        self.stale_echoes = 0
        self.unmatched_integrity_echoes = 0
        self.granularity_mismatches = 0

    # -- host identity ----------------------------------------------------

    def rotate_host_id(self, now: int, epoch_changed: bool = False) -> int:
        sched = self.host_id_schedule
        due = sched.current is None or now - sched.last_rotation >= self.rotation_period_us
        if due or epoch_changed:
            fresh = self.rng.randrange(1 << 16)
            if sched.current is not None and fresh == sched.current:
                fresh = (fresh + 1 + self.rng.randrange((1 << 16) - 1)) % (1 << 16)
            sched.current = fresh
            sched.last_rotation = now
            if epoch_changed:
                sched.network_epoch += 1
        return sched.current

    # -- transmit -----------------------------------------------------------

    def _next_nonce(self) -> int:
        if self._scripted_nonces:
            self._n_xmit = self._scripted_nonces.pop(0)
        else:
            self._n_xmit = (self._n_xmit + self.rng.randrange(1, NONCE_STEP_MAX)) % NONCE_MOD
        return self._n_xmit

    def _draw_ttl_prime(self, ttl: int) -> int:
        # reject TTL' just below TTL: there k skipped routers could fold |TTL-TTL'| back onto its start
        lo, hi = TTL_PRIME_RANGE
        while True:
            candidate = self.rng.randint(lo, hi)
            if not 0 < ttl - candidate <= MAX_HOPS // 2:
                return candidate

    def on_send(
        self,
        now: int,
        presence: Presence,
        *,
        view: Optional[PacketView] = None,
        hop_request: Optional[HopRequest] = None,
        ttl: int = 64,
    ) -> ShimHeader:
        fields: dict = {}
        if Presence.HOSTID in presence:
            fields["host_id"] = self.rotate_host_id(now)

        t_now = None
        if Presence.TIMING in presence:
            t_now = (now // self.unit_us) % TIMESTAMP_MOD
            t_echo = t_delta = 0
            if self.last_rx_time is not None and self.last_peer_tnow is not None:
                held = (now - self.last_rx_time) // self.unit_us
                if held < TIMESTAMP_MOD:
                    t_echo, t_delta = self.last_peer_tnow, held
            fields["timing"] = TimingTuple(t_now, t_echo, t_delta, self.granularity)
            self.sent_log[t_now] = now
            horizon = TIMESTAMP_MOD // 2 * self.unit_us
            self.sent_log = {k: v for k, v in self.sent_log.items() if now - v < horizon}

        if Presence.NONCE in presence:
            n_xmit = self._next_nonce()
            fields["nonce"] = NonceTuple(n_xmit, self.nonce_accumulator)
            self.nonces.sent(n_xmit)

        if hop_request is not None:
            fields["hop_request"] = hop_request
            fields["hop_stamp"] = HopStamp(hop_request.kind)
        elif Presence.HOPSTAMP in presence and self._stamp_echo is not None:
            fields["hop_stamp"] = self._stamp_echo
            self._stamp_echo = None

        if Presence.EVOLUTION in presence:
            fields["evolution"] = EvolutionTuple(self.e_init, self._peer_e_cur or 0)

        if Presence.ACCUM in presence:
            if self._accum_echo is not None:
                fields["accum"] = self._accum_echo
                self._accum_echo = None
            else:
                if self.ttl_prime is None:
                    self.ttl_prime = self._draw_ttl_prime(ttl)
                    self.initial_delta = abs(ttl - self.ttl_prime)
                fields["accum"] = AccumTuple(AC_MAX_CLASS, 0, self.ttl_prime)

        if Presence.INTEGRITY in presence:
            cfg = self.integrity_config
            cover = cfg.covers[self._cover_index % len(cfg.covers)]
            self._cover_index += 1
            partial = ShimHeader(**fields)
            full_view = dict(view or {})
            full_view[FieldClass.IPIM_FIELDS] = ipim_field_bytes(partial, cover, cfg.mode)
            salt = cfg.salt if cfg.mode != IntegrityMode.PLAIN else b""
            i_hash = compute_integrity(full_view, cover, cfg.mode, salt)
            if cfg.mode == IntegrityMode.SENDER_SALT and t_now is not None:
                self._expected_echo[t_now] = (
                    compute_integrity(full_view, cover, IntegrityMode.SENDER_SALT, i_hash.to_bytes(8, "big")),
                    cover,
                )
            fields["integrity"] = IntegrityTuple(cover, cfg.mode, i_hash, self._echo_value or 0)
        return ShimHeader(**fields)

    # -- receive ------------------------------------------------------------

    def on_receive(
        self,
        shim: ShimHeader,
        now: int,
        *,
        view: Optional[PacketView] = None,
        ttl: Optional[int] = None,
    ) -> list[Event]:
        events: list[Event] = []
        heard_us: Optional[bool] = None
        self.last_rx_time = now

        if shim.host_id is not None:
            self.peer_host_id = shim.host_id

        timing = shim.timing
        if timing is not None:
            if timing.granularity != self.granularity:
                self.granularity_mismatches += 1
            else:
                heard_us = timing.t_echo in self.sent_log
                if heard_us:
                    arrival = (now // self.unit_us) % TIMESTAMP_MOD
                    d = decompose(arrival, timing.t_echo, timing.t_delta, self.unit_us)
                    if d.network_delay >= 0:
                        events.append(d)
                    else:
                        self.stale_echoes += 1
                else:
                    self.stale_echoes += 1
                self.last_peer_tnow = timing.t_now

        if shim.nonce is not None:
            self.nonce_accumulator = (self.nonce_accumulator + shim.nonce.n_xmit) % NONCE_MOD
            if heard_us is None:
                heard_us = shim.nonce.n_sum != 0
            try:
                events.append(self.nonces.observe(shim.nonce.n_xmit, shim.nonce.n_sum))
            except InconsistentError as exc:
                events.append(NonceInconsistency(shim.nonce.n_xmit, shim.nonce.n_sum, str(exc)))

        if shim.integrity is not None:
            events.extend(self._receive_integrity(shim, view, timing))

        stamp = shim.hop_stamp
        if stamp is not None and stamp.filled:
            echoed = shim.hop_request is None
            events.append(StampObserved(stamp, echoed))
            if not echoed:
                self._stamp_echo = stamp

        if shim.evolution is not None:
            self._peer_e_cur = shim.evolution.e_cur
            if heard_us is None or heard_us:
                events.append(PathSignature((shim.evolution.e_echo - self.e_init) % EVOLUTION_MOD))

        accum = shim.accum
        if accum is not None:
            if accum.echo:
                if self.initial_delta is not None:
                    events.append(
                        ParticipationCheck(self.initial_delta, accum.echoed_delta, accum.ac_min, accum.ql_sum)
                    )
            elif ttl is not None:
                self._accum_echo = AccumTuple(
                    accum.ac_min, accum.ql_sum, 0, abs(ttl - accum.ttl_prime) & 0xFF, echo=True
                )
        return events

    def _receive_integrity(
        self, shim: ShimHeader, view: Optional[PacketView], timing: Optional[TimingTuple]
    ) -> list[Event]:
        events: list[Event] = []
        tup = shim.integrity
        if view is not None:
            full_view = dict(view)
            full_view[FieldClass.IPIM_FIELDS] = ipim_field_bytes(shim, tup.i_cover, tup.i_mode)
            if tup.i_mode == IntegrityMode.SENDER_SALT:
                # cannot verify without the sender's salt; fold what we saw into the echo
                self._echo_value = compute_integrity(
                    full_view, tup.i_cover, IntegrityMode.SENDER_SALT, tup.i_hash.to_bytes(8, "big")
                )
            else:
                salt = self.integrity_config.salt if tup.i_mode == IntegrityMode.SHARED_SALT else b""
                try:
                    expected = compute_integrity(full_view, tup.i_cover, tup.i_mode, salt)
                except ValueError:
                    expected = None
                verdict = IntegrityVerdict(tup.i_cover, tup.i_mode, expected == tup.i_hash)
                self.integrity_history.append((verdict.cover, verdict.match))
                events.append(verdict)
                self._echo_value = tup.i_hash

        if self.integrity_config.mode == IntegrityMode.SENDER_SALT and tup.i_echo:
            entry = self._expected_echo.pop(timing.t_echo, None) if timing is not None else None
            if entry is None:
                self.unmatched_integrity_echoes += 1
            else:
                expected_echo, cover = entry
                verdict = IntegrityVerdict(cover, IntegrityMode.SENDER_SALT, expected_echo == tup.i_echo)
                self.integrity_history.append((cover, verdict.match))
                events.append(verdict)
        return events
