"""Independent reference computations for the test suite.

Each oracle takes a different route from the implementation it checks:
nonce reconstruction enumerates every subset of the sent nonces once and
chains nested cumulative sets, instead of searching per-delta subsets;
mutation localization enumerates every hypothesis about the mutated set.
"""

from __future__ import annotations

from itertools import combinations

MOD = 1 << 32
CLASSES = (0x01, 0x02, 0x04, 0x08, 0x10)


class OracleInconsistent(Exception):
    pass


def brute_force_arrivals(outstanding, observations, base=0, window=3):
    """Returns a dict with the same fields as ArrivalReport."""
    seen = {}
    obs = []
    for nx, s in observations:
        if nx in seen:
            if seen[nx] != s:
                raise OracleInconsistent("conflicting repeat")
            continue
        seen[nx] = s
        obs.append((nx, s))
    in_order = all(obs[k][0] < obs[k + 1][0] for k in range(len(obs) - 1))
    obs.sort()
    n = len(outstanding)

    by_sum = {}
    for mask in range(1 << n):
        total = sum(outstanding[i] for i in range(n) if mask >> i & 1) % MOD
        by_sum.setdefault(total, []).append(mask)

    targets = [(s - base) % MOD for _, s in obs]
    chains = []

    def extend(k, prev, chain):
        if k == len(targets):
            chains.append(chain)
            return
        for mask in by_sum.get(targets[k], []):
            if mask & prev == prev:
                extend(k + 1, mask, chain + [mask])

    extend(0, 0, [])
    if not chains:
        raise OracleInconsistent("no chain of nested arrival sets")

    def group_of(chain, i):
        for k, mask in enumerate(chain, start=1):
            if mask >> i & 1:
                return k
        return 0

    groups = []
    for i in range(n):
        vals = {group_of(c, i) for c in chains}
        groups.append(vals.pop() if len(vals) == 1 else None)

    m = len(obs)
    arrived = [outstanding[i] for g, i in sorted((g, i) for i, g in enumerate(groups) if g)]
    reordered = []
    for i, j in combinations(range(n), 2):
        if groups[i] and groups[j] and groups[i] > groups[j]:
            reordered.append((outstanding[i], outstanding[j]))
    lost, ambiguous = [], []
    for i in range(n):
        if groups[i] is None:
            ambiguous.append(outstanding[i])
        elif groups[i] == 0:
            later = [groups[j] for j in range(i + 1, n) if groups[j]]
            # observations from the first one confirming a later packet onward all exclude i
            if later and m - min(later) + 1 >= window:
                lost.append(outstanding[i])
            else:
                ambiguous.append(outstanding[i])
    return {
        "arrived": tuple(arrived),
        "lost_candidates": tuple(lost),
        "reordered": tuple(reordered),
        "ambiguous": tuple(ambiguous),
        "acks_in_order": in_order,
    }


def hypothesis_localize(history):
    """(mutated, intact, undetermined) as sets of class bits.

    A hypothesis is a set M of mutated classes; it is consistent when every
    cover matched exactly iff it avoids M.
    """
    seen = set()
    for cover, _ in history:
        seen |= {c for c in CLASSES if c & cover}
    consistent = []
    for bits in range(1 << len(CLASSES)):
        m = {c for k, c in enumerate(CLASSES) if bits >> k & 1}
        if all(matched == (not any(c & cover for c in m)) for cover, matched in history):
            consistent.append(m)
    if not consistent:
        raise OracleInconsistent("no mutated set explains the history")
    mutated = set.intersection(*consistent) & seen
    possible = set.union(*consistent)
    intact = seen - possible
    return mutated, intact, seen - mutated - intact
