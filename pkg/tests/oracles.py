"""Independent brute-force oracles used by the test suite.

Everything here is written from the problem definitions alone
(exhaustive enumeration, no shared code with the package) so the tests
can act as an external check on the optimized implementations.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field


# ---------------------------------------------------------------------------
# routing: exhaustive permutation search


def sequence_is_valid(seq, occupancy: int, capacity: int) -> bool:
    pickups = {s.order_id for s in seq if s.kind == "pickup"}
    load = occupancy
    picked: set[int] = set()
    for s in seq:
        if s.kind == "pickup":
            load += 1
            if load > capacity:
                return False
            picked.add(s.order_id)
        else:
            if s.order_id in pickups and s.order_id not in picked:
                return False
            load -= 1
    return True


def brute_route_duration(origin, stops, occupancy: int, capacity: int, travel):
    """Minimum total duration over all valid stop orderings, or None."""
    best = None
    for perm in itertools.permutations(stops):
        if not sequence_is_valid(perm, occupancy, capacity):
            continue
        t = 0.0
        loc = origin
        for s in perm:
            t += travel.minutes(loc, s.point)
            loc = s.point
        if best is None or t < best:
            best = t
    return best


@dataclass
class StubOrder:
    id: int
    origin: tuple[float, float]
    destination: tuple[float, float]
    deadline: float = math.inf


@dataclass
class StubWorker:
    location: tuple[float, float]
    capacity: int = 3
    onboard: list = field(default_factory=list)
    route: tuple = ()
    available: bool = True


# ---------------------------------------------------------------------------
# matching: exhaustive assignment enumeration


def brute_stage1_value(values, available) -> float:
    """Best total value of a partial worker-order matching.

    Rows with available[i] False may not be used; each worker takes at
    most one order and vice versa.  The empty matching is feasible.
    """
    n, m = values.shape
    rows = [i for i in range(n) if available[i]]

    def go(idx: int, used_cols: frozenset) -> float:
        if idx == len(rows):
            return 0.0
        best = go(idx + 1, used_cols)  # leave this worker unassigned
        for j in range(m):
            if j in used_cols:
                continue
            cand = values[rows[idx], j] + go(idx + 1, used_cols | {j})
            if cand > best:
                best = cand
        return best

    return go(0, frozenset())


def brute_stage2_value(log_probs, available) -> float:
    """Best total log-probability when each available worker picks a real
    order (at most one worker per order) or the shared reject column.

    ``log_probs`` has shape (n, m + 1); the last column is reject and
    may be chosen by any number of workers.
    """
    n, width = log_probs.shape
    m = width - 1
    rows = [i for i in range(n) if available[i]]

    def go(idx: int, used_cols: frozenset) -> float:
        if idx == len(rows):
            return 0.0
        i = rows[idx]
        best = log_probs[i, m] + go(idx + 1, used_cols)  # reject
        for j in range(m):
            if j in used_cols:
                continue
            cand = log_probs[i, j] + go(idx + 1, used_cols | {j})
            if cand > best:
                best = cand
        return best

    return go(0, frozenset())


def enumerate_action_count(n: int, m: int) -> int:
    """Count distinct partial matchings of m workers onto n orders by
    direct enumeration: every subset of workers, every injective map of
    that subset into the orders.
    """
    count = 0
    for k in range(0, min(n, m) + 1):
        for _workers in itertools.combinations(range(m), k):
            for _orders in itertools.permutations(range(n), k):
                count += 1
    return count
