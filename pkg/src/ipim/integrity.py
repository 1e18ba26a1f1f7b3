"""Integrity digests over packet field classes and mutation localization."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Mapping

from .wire import ALL_FIELD_CLASSES, FULL_COVER, FieldClass, IntegrityMode


class MissingSaltError(ValueError):
    pass


def covered_classes(cover: FieldClass) -> list[FieldClass]:
    return [c for c in ALL_FIELD_CLASSES if c & cover]


def compute_integrity(
    packet_view: Mapping[FieldClass, bytes],
    cover: FieldClass,
    mode: IntegrityMode,
    salt: bytes = b"",
) -> int:
    """64-bit digest over the covered field classes.

    SHA-256 over ``mode || cover || salt || covered fields`` (bitmap order),
    truncated to its first eight bytes. Classes missing from ``packet_view``
    hash as empty.
    """
    if mode == IntegrityMode.PLAIN:
        if salt:
            raise MissingSaltError("PLAIN mode takes no salt")
    elif not salt:
        raise MissingSaltError(f"{IntegrityMode(mode).name} mode requires a salt")
    h = hashlib.sha256()
    h.update(bytes((int(mode), int(cover))))
    h.update(salt)
    for cls in covered_classes(cover):
        h.update(packet_view.get(cls, b""))
    return int.from_bytes(h.digest()[:8], "big")


def round_robin_covers() -> list[FieldClass]:
    """Every singleton cover followed by the full cover."""
    return list(ALL_FIELD_CLASSES) + [FULL_COVER]


@dataclass(frozen=True)
class MutationVerdict:
    mutated: frozenset[FieldClass]
    intact: frozenset[FieldClass]
    undetermined: frozenset[FieldClass]


def localize_mutation(history: Iterable[tuple[FieldClass, bool]]) -> MutationVerdict:
    """Decide which field classes the path rewrites, from (cover, matched) pairs.

    A class is intact once any matching cover includes it. It is mutated when
    some mismatching cover contains it and every other class in that cover is
    intact. Anything else seen in a cover stays undetermined.
    """
    history = [(FieldClass(cover), bool(ok)) for cover, ok in history]
    if not history:
        raise ValueError("history is empty")
    seen: set[FieldClass] = set()
    intact: set[FieldClass] = set()
    for cover, ok in history:
        members = covered_classes(cover)
        seen.update(members)
        if ok:
            intact.update(members)
    mutated: set[FieldClass] = set()
    for cover, ok in history:
        if ok:
            continue
        suspects = [c for c in covered_classes(cover) if c not in intact]
        if len(suspects) == 1:
            mutated.add(suspects[0])
    undetermined = seen - intact - mutated
    return MutationVerdict(frozenset(mutated), frozenset(intact), frozenset(undetermined))
