"""Cumulative-nonce arrival reconstruction.

A sender stamps each packet with an increasing random ``n_xmit``; the peer
echoes the modular sum of every ``n_xmit`` it has received. Successive sums
therefore differ by the nonces that arrived in between, and the sender can
recover which packets arrived, in which batch order, and which did not.

The search treats each outstanding nonce as arriving at most once. A
duplicated delivery adds a nonce twice, which no subset explains, and the
observation is rejected as inconsistent (the same signal a receiver claiming
undelivered packets produces).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

NONCE_MOD = 1 << 32


class InconsistentError(ValueError):
    """No subset of the outstanding nonces explains an observed sum."""


@dataclass(frozen=True)
class ArrivalReport:
    arrived: tuple[int, ...] = ()
    lost_candidates: tuple[int, ...] = ()
    reordered: tuple[tuple[int, int], ...] = ()
    ambiguous: tuple[int, ...] = ()
    acks_in_order: bool = True


def _normalize(observations: Iterable[tuple[int, int]]) -> tuple[list[tuple[int, int]], bool]:
    """Drop repeated observations and sort by the observer's own nonce."""
    seen: dict[int, int] = {}
    ordered: list[tuple[int, int]] = []
    for nx, nsum in observations:
        if nx in seen:
            if seen[nx] != nsum:
                raise InconsistentError(f"observer nonce {nx} reported with sums {seen[nx]} and {nsum}")
            continue
        seen[nx] = nsum
        ordered.append((nx, nsum))
    in_order = all(a[0] < b[0] for a, b in zip(ordered, ordered[1:]))
    return sorted(ordered), in_order


def _subset_masks(indices: Sequence[int], values: Sequence[int], target: int) -> list[int]:
    """All bitmasks over ``indices`` whose values sum to ``target`` mod 2**32.

    Meet in the middle: enumerate both halves, join on the complement sum.
    """
    half = len(indices) // 2

    def enumerate_half(part: Sequence[int]) -> list[tuple[int, int]]:
        sums = [(0, 0)]
        for i in part:
            bit, v = 1 << i, values[i]
            sums += [((s + v) % NONCE_MOD, m | bit) for s, m in sums]
        return sums

    left: dict[int, list[int]] = {}
    for s, m in enumerate_half(indices[:half]):
        left.setdefault(s, []).append(m)
    found = []
    for s, m in enumerate_half(indices[half:]):
        for lm in left.get((target - s) % NONCE_MOD, ()):
            found.append(lm | m)
    return found


def solve_assignments(
    nonces: Sequence[int], sums: Sequence[int], base: int = 0
) -> list[tuple[int, ...]]:
    """Every way to place nonces into the batches implied by ``sums``.

    Returns one tuple per consistent explanation, giving for each nonce the
    1-based index of the observation that first includes it, or 0 when no
    observation does.
    """
    n = len(nonces)
    deltas = []
    prev = base
    for s in sums:
        deltas.append((s - prev) % NONCE_MOD)
        prev = s
    memo: dict[tuple[int, int], list[tuple[int, ...]]] = {}

    def suffixes(k: int, used: int) -> list[tuple[int, ...]]:
        if k == len(deltas):
            return [()]
        key = (k, used)
        if key not in memo:
            free = [i for i in range(n) if not used >> i & 1]
            out = []
            for mask in _subset_masks(free, nonces, deltas[k]):
                for rest in suffixes(k + 1, used | mask):
                    out.append((mask,) + rest)
            memo[key] = out
        return memo[key]

    assignments = []
    for chain in suffixes(0, 0):
        groups = [0] * n
        for k, mask in enumerate(chain, start=1):
            for i in range(n):
                if mask >> i & 1:
                    groups[i] = k
        assignments.append(tuple(groups))
    return assignments


def _definite_groups(assignments: Sequence[tuple[int, ...]], n: int) -> list[Optional[int]]:
    out: list[Optional[int]] = []
    for i in range(n):
        values = {a[i] for a in assignments}
        out.append(values.pop() if len(values) == 1 else None)
    return out


def _classify(
    nonces: Sequence[int],
    m: int,
    assignments: Sequence[tuple[int, ...]],
    window: int,
    acks_in_order: bool,
    carried: Optional[dict[int, int]] = None,
) -> ArrivalReport:
    carried = carried or {}
    n = len(nonces)
    group = _definite_groups(assignments, n)
    arrived = sorted((g, i) for i, g in enumerate(group) if g)
    reordered = [
        (nonces[i], nonces[j])
        for i in range(n)
        for j in range(i + 1, n)
        if group[i] and group[j] and group[i] > group[j]
    ]
    lost, ambiguous = [], []
    for i, g in enumerate(group):
        if g:
            continue
        if g is None:
            ambiguous.append(nonces[i])
            continue
        overtaken = [group[j] for j in range(i + 1, n) if group[j]]
        if nonces[i] in carried:
            excluded = m + carried[nonces[i]]
        elif overtaken:
            excluded = m - min(overtaken) + 1
        else:
            excluded = 0
        (lost if excluded and excluded >= window else ambiguous).append(nonces[i])
    return ArrivalReport(
        arrived=tuple(nonces[i] for _, i in arrived),
        lost_candidates=tuple(lost),
        reordered=tuple(reordered),
        ambiguous=tuple(ambiguous),
        acks_in_order=acks_in_order,
    )


def reconstruct_arrivals(
    outstanding: Sequence[int],
    observations: Iterable[tuple[int, int]],
    *,
    base: int = 0,
    window: int = 3,
) -> ArrivalReport:
    """Reconstruct the arrival stream from the peer's cumulative nonce sums.

    ``outstanding`` lists the sender's nonces in send order; ``observations``
    are (peer n_xmit, n_sum) pairs in the order they reached the sender;
    ``base`` is the peer's sum before any outstanding nonce could arrive.

    A nonce becomes a loss candidate only after ``window`` observations have
    excluded it while confirming a packet sent later.
    """
    obs, in_order = _normalize(observations)
    assignments = solve_assignments(list(outstanding), [s for _, s in obs], base)
    if not assignments:
        raise InconsistentError("no subset of outstanding nonces explains the observed sums")
    return _classify(list(outstanding), len(obs), assignments, window, in_order)


@dataclass
class NonceTracker:
    """Incremental reconstruction for a long-lived flow.

    Observations whose batches are fully determined are folded into running
    totals so the search stays bounded by ``max_outstanding`` nonces.
    """

    window: int = 3
    max_outstanding: int = 16
    base: int = 0
    outstanding: list[int] = field(default_factory=list)
    observations: list[tuple[int, int]] = field(default_factory=list)
    final_arrived: list[int] = field(default_factory=list)
    final_lost: list[int] = field(default_factory=list)
    final_reordered: list[tuple[int, int]] = field(default_factory=list)
    acks_in_order: bool = True
    inconsistencies: int = 0
    stale_observations: int = 0
    # nonce -> observations already folded away that excluded it after it was overtaken
    carried: dict[int, int] = field(default_factory=dict)
    # nonce -> later-sent nonces already folded away as arrived
    overtakers: dict[int, list[int]] = field(default_factory=dict)
    folded_nx: Optional[int] = None
    _last: ArrivalReport = field(default_factory=ArrivalReport)

    def sent(self, n_xmit: int) -> None:
        self.outstanding.append(n_xmit)
        while len(self.outstanding) > self.max_outstanding:
            evicted = self.outstanding.pop(0)
            self.final_lost.append(evicted)
            self.carried.pop(evicted, None)
            self.overtakers.pop(evicted, None)

    def observe(self, peer_nx: int, n_sum: int) -> ArrivalReport:
        """Feed one (peer n_xmit, n_sum) pair; return the cumulative report.

        Raises InconsistentError when the sums cannot be explained; the
        tracker then rebases on the offending sum and keeps going.
        """
        if self.folded_nx is not None and peer_nx <= self.folded_nx:
            self.stale_observations += 1
            self.acks_in_order = False
            return self.summary()
        candidate = self.observations + [(peer_nx, n_sum)]
        try:
            obs, in_order = _normalize(candidate)
            sums = [s for _, s in obs]
            assignments = solve_assignments(self.outstanding, sums, self.base)
            if not assignments:
                raise InconsistentError(
                    f"sum {n_sum} from observer nonce {peer_nx} matches no subset of {len(self.outstanding)} outstanding nonces"
                )
        except InconsistentError:
            self.inconsistencies += 1
            self.base = n_sum
            self.observations = []
            self.folded_nx = max([peer_nx] + [nx for nx, _ in candidate])
            self.carried.clear()
            self.overtakers.clear()
            raise
        self.observations = candidate
        self.acks_in_order = self.acks_in_order and in_order
        self._last = _classify(self.outstanding, len(obs), assignments, self.window, True, self.carried)
        self._fold(obs, assignments)
        return self.summary()

    def _fold(self, obs: list[tuple[int, int]], assignments: list[tuple[int, ...]]) -> None:
        n = len(self.outstanding)
        settled = 0
        for k in range(1, len(obs) + 1):
            views = {tuple(g if 1 <= g <= k else 0 for g in a) for a in assignments}
            if len(views) != 1:
                break
            settled = k
        if not settled:
            return
        groups = assignments[0]
        done = sorted((groups[i], i) for i in range(n) if 1 <= groups[i] <= settled)
        done_idx = {i for _, i in done}
        for _, i in done:
            x = self.outstanding[i]
            self.final_arrived.append(x)
            for earlier in self.overtakers.pop(x, []):
                self.final_reordered.append((x, earlier))
            self.carried.pop(x, None)
        for _, i in done:
            for _, j in done:
                if i < j and groups[i] > groups[j]:
                    self.final_reordered.append((self.outstanding[i], self.outstanding[j]))
        for i in range(n):
            if i in done_idx:
                continue
            x = self.outstanding[i]
            later = [groups[j] for j in done_idx if j > i]
            if later:
                self.overtakers.setdefault(x, []).extend(self.outstanding[j] for j in sorted(done_idx) if j > i)
                self.carried[x] = self.carried.get(x, 0) + settled - min(later) + 1
            elif x in self.carried:
                self.carried[x] += settled
        self.base = obs[settled - 1][1]
        self.folded_nx = obs[settled - 1][0]
        dropped = set(obs[:settled])
        self.observations = [o for o in self.observations if o not in dropped]
        self.outstanding = [x for i, x in enumerate(self.outstanding) if i not in done_idx]
        remaining = self._last
        # re-derive the window report over what is left so summary() stays exact
        if self.observations:
            robs, _ = _normalize(self.observations)
            ras = solve_assignments(self.outstanding, [s for _, s in robs], self.base)
            remaining = _classify(self.outstanding, len(robs), ras, self.window, True, self.carried)
        else:
            remaining = _classify(self.outstanding, 0, [(0,) * len(self.outstanding)], self.window, True, self.carried)
        self._last = remaining

    def summary(self) -> ArrivalReport:
        """Folded history merged with the current window."""
        w = self._last
        pending_pairs = [
            (x, later)
            for x in w.arrived
            for later in self.overtakers.get(x, [])
        ]
        return ArrivalReport(
            arrived=tuple(self.final_arrived) + w.arrived,
            lost_candidates=tuple(self.final_lost) + w.lost_candidates,
            reordered=tuple(self.final_reordered) + tuple(pending_pairs) + w.reordered,
            ambiguous=w.ambiguous,
            acks_in_order=self.acks_in_order,
        )
