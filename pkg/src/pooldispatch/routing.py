"""Travel-time models and exact pickup/delivery route planning.

Locations are (x, y) kilometre coordinates.  A travel-time model is any
object with a ``minutes(a, b) -> float`` method; the default is a
constant-speed Euclidean model.  Motion between stops is assumed to
follow the straight segment between their coordinates (only relevant to
``advance_route``, which interpolates partial legs).

Route optimization is exact: every precedence- and capacity-feasible
stop ordering is enumerated (with branch-and-bound pruning), so plans
are optimal for the given travel-time model.  Vehicles here carry at
most a handful of stops, which keeps enumeration cheap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

Point = tuple[float, float]

PICKUP = "pickup"
DROPOFF = "dropoff"


@dataclass(frozen=True)
class EuclideanTravel:
    """Straight-line travel at a constant speed."""

    speed_kmh: float = 60.0

    def minutes(self, a: Point, b: Point) -> float:
        return math.dist(a, b) / self.speed_kmh * 60.0


@dataclass(frozen=True)
class MatrixTravel:
    """Table-driven travel times over a fixed set of reference points.

    Arbitrary query points snap to their nearest reference point, so a
    precomputed zone-to-zone matrix (e.g. from map data) can stand in
    for the Euclidean model without touching callers.
    """

    points: tuple[Point, ...]
    minutes_table: np.ndarray  # (k, k) minutes, row = from, col = to

    def __post_init__(self) -> None:
        k = len(self.points)
        if self.minutes_table.shape != (k, k):
            raise ValueError("minutes table must be square over the reference points")

    def _snap(self, p: Point) -> int:
        return min(range(len(self.points)), key=lambda i: math.dist(self.points[i], p))

    def minutes(self, a: Point, b: Point) -> float:
        return float(self.minutes_table[self._snap(a), self._snap(b)])


@dataclass(frozen=True)
class Stop:
    """A single pickup or dropoff on a vehicle's route."""

    kind: str  # PICKUP or DROPOFF
    order_id: int
    point: Point


@dataclass(frozen=True)
class RoutePlan:
    """Result of inserting one order into a worker's route.

    ``per_order_eta`` maps order id to minutes-from-now until that
    order's dropoff.  ``added_duration`` is the growth of the route's
    total duration relative to the worker's previous route.  ``chi``
    counts orders (onboard plus the new one) whose projected arrival
    exceeds their deadline; ``rho`` is the net increase of the onboard
    orders' delivery times.
    """

    feasible: bool
    stops: tuple[Stop, ...] = ()
    total_duration: float = 0.0
    added_duration: float = 0.0
    per_order_eta: dict[int, float] = field(default_factory=dict)
    chi: int = 0
    rho: float = 0.0


INFEASIBLE_PLAN = RoutePlan(feasible=False)


def route_schedule(
    origin: Point, stops: tuple[Stop, ...] | list[Stop], travel
) -> tuple[float, dict[int, float]]:
    """Total duration and per-order dropoff arrival times for a fixed stop order."""
    t = 0.0
    loc = origin
    etas: dict[int, float] = {}
    for s in stops:
        t += travel.minutes(loc, s.point)
        loc = s.point
        if s.kind == DROPOFF:
            etas[s.order_id] = t
    return t, etas


def optimal_stop_sequence(
    origin: Point,
    stops: list[Stop],
    occupancy: int,
    capacity: int,
    travel,
) -> tuple[tuple[Stop, ...], float] | None:
    """Minimum-total-duration ordering of ``stops`` starting from ``origin``.

    A dropoff whose pickup appears in ``stops`` must come after it;
    the onboard count (starting at ``occupancy``) may never exceed
    ``capacity``.  Returns None when no feasible ordering exists.
    Ties resolve toward the ordering that enumerates first, so results
    are deterministic for a fixed input order.
    """
    pickups_present = {s.order_id for s in stops if s.kind == PICKUP}
    best_seq: tuple[Stop, ...] | None = None
    best_total = math.inf
    seq: list[Stop] = []

    def search(loc: Point, t: float, load: int, remaining: list[Stop], picked: set[int]) -> None:
        nonlocal best_seq, best_total
        if t >= best_total:
            return
        if not remaining:
            best_seq = tuple(seq)
            best_total = t
            return
        for i, s in enumerate(remaining):
            if s.kind == PICKUP:
                if load + 1 > capacity:
                    continue
                load2, picked2 = load + 1, picked | {s.order_id}
            else:
                if s.order_id in pickups_present and s.order_id not in picked:
                    continue
                load2, picked2 = load - 1, picked
            seq.append(s)
            search(
                s.point,
                t + travel.minutes(loc, s.point),
                load2,
                remaining[:i] + remaining[i + 1 :],
                picked2,
            )
            seq.pop()

    search(origin, 0.0, occupancy, list(stops), set())
    if best_seq is None:
        return None
    return best_seq, best_total


def best_insertion(worker, order, now: float, travel) -> RoutePlan:
    """Optimal plan for ``worker`` to serve ``order``, scored for dispatch.

    ``worker`` needs ``location``, ``route``, ``onboard``, ``capacity``
    and ``available``; ``order`` needs ``id``, ``origin``,
    ``destination`` and ``deadline``.  Unavailable workers get an
    infeasible plan.  The previous route is taken as already optimal
    (the simulator maintains that invariant), so ``added_duration`` is
    measured against its as-is duration.
    """
    if not worker.available:
        return INFEASIBLE_PLAN

    old_total, old_etas = route_schedule(worker.location, worker.route, travel)
    candidate = list(worker.route) + [
        Stop(PICKUP, order.id, order.origin),
        Stop(DROPOFF, order.id, order.destination),
    ]
    result = optimal_stop_sequence(
        worker.location, candidate, len(worker.onboard), worker.capacity, travel
    )
    if result is None:
        return INFEASIBLE_PLAN
    stops, total = result
    _, etas = route_schedule(worker.location, stops, travel)

    rho = sum(etas[o.id] - old_etas[o.id] for o in worker.onboard)
    overdue = [o for o in worker.onboard if now + etas[o.id] > o.deadline]
    chi = len(overdue) + (1 if now + etas[order.id] > order.deadline else 0)

    return RoutePlan(
        feasible=True,
        stops=stops,
        total_duration=total,
        added_duration=total - old_total,
        per_order_eta=etas,
        chi=chi,
        rho=rho,
    )


def advance_route(
    location: Point, route: tuple[Stop, ...], minutes: float, travel
) -> tuple[Point, tuple[Stop, ...], list[tuple[Stop, float]]]:
    """Move along ``route`` for ``minutes``, returning the new position,
    the remaining stops and the stops reached as (stop, minutes-from-start)
    pairs.  Partial progress along a leg is preserved by interpolating on
    the straight segment; once the route empties the vehicle idles in place.
    """
    loc = location
    left = float(minutes)
    elapsed = 0.0
    remaining = list(route)
    fired: list[tuple[Stop, float]] = []
    while remaining and left > 0.0:
        leg = travel.minutes(loc, remaining[0].point)
        if leg <= left:
            stop = remaining.pop(0)
            loc = stop.point
            left -= leg
            elapsed += leg
            fired.append((stop, elapsed))
        else:
            frac = left / leg
            loc = (
                loc[0] + (remaining[0].point[0] - loc[0]) * frac,
                loc[1] + (remaining[0].point[1] - loc[1]) * frac,
            )
            left = 0.0
    return loc, tuple(remaining), fired
