"""Discrete-time ride-pooling world.

Time advances in 1-minute steps.  Each step the caller supplies an
assignment action (see ``matching``); the world attaches assigned
orders to workers with re-optimized routes, credits per-worker rewards,
moves every vehicle for one minute, fires pickups/dropoffs as stops are
reached, cancels orders whose age exceeds the patience window, and then
reveals the next step's arrivals.

Pickup/dropoff timestamps are exact fractional step indices (a step is
one minute, so step indices and minutes coincide); integer rounding
would break the delivery-time >= direct-time guarantee of the metric
travel model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ConfigError, ConstraintViolation, InfeasibleInsertion
from .matching import AssignmentAction
from .routing import DROPOFF, PICKUP, EuclideanTravel, Point, RoutePlan, Stop, advance_route, best_insertion

REQUESTED = "requested"
ASSIGNED = "assigned"
ONBOARD = "onboard"
DELIVERED = "delivered"
CANCELLED = "cancelled"


@dataclass
class OrderState:
    """A trip request and its lifecycle timestamps (all in step units)."""

    id: int
    origin: Point
    destination: Point
    request_time: int
    deadline: float
    direct_time: float
    status: str = REQUESTED
    assign_time: float | None = None
    pickup_time: float | None = None
    dropoff_time: float | None = None

    @property
    def direct_km(self) -> float:
        return math.dist(self.origin, self.destination)


def build_order(
    oid: int,
    origin: Point,
    destination: Point,
    request_time: int,
    speed_kmh: float,
    patience: int,
    deadline: float | None = None,
) -> OrderState:
    """Construct an order, synthesizing the deadline when none is given:
    request + ceil(1.5 * direct travel time) + patience."""
    direct = math.dist(origin, destination) / speed_kmh * 60.0
    if deadline is None:
        deadline = request_time + math.ceil(1.5 * direct) + patience
    return OrderState(
        id=oid,
        origin=origin,
        destination=destination,
        request_time=request_time,
        deadline=float(deadline),
        direct_time=direct,
    )


@dataclass
class WorkerState:
    id: int
    location: Point
    capacity: int
    onboard: list[OrderState] = field(default_factory=list)
    route: tuple[Stop, ...] = ()
    pickup_target: int | None = None

    @property
    def available(self) -> bool:
        """A worker en route to a pickup or at capacity cannot take orders."""
        return self.pickup_target is None and len(self.onboard) < self.capacity

    def minutes_until_available(self, travel) -> float:
        """Estimated minutes until the availability predicate turns true,
        assuming no further assignments: walk the planned route until the
        pending pickup is reached and a seat is free."""
        if self.available:
            return 0.0
        t = 0.0
        loc = self.location
        load = len(self.onboard)
        pending = self.pickup_target
        for s in self.route:
            t += travel.minutes(loc, s.point)
            loc = s.point
            if s.kind == PICKUP:
                load += 1
                if s.order_id == pending:
                    pending = None
            else:
                load -= 1
            if pending is None and load < self.capacity:
                return t
        return t


@dataclass(frozen=True)
class RewardParams:
    """Weights and fare constants of the per-assignment reward."""

    beta1: float = 1.0
    beta2: float = 1.0
    beta3: float = 1.0
    beta4: float = 2.0
    beta5: float = 0.1
    fare_base: float = 2.0
    fare_per_km: float = 1.0
    payout_per_km: float = 0.6

    def __post_init__(self) -> None:
        for name in ("beta1", "beta2", "beta3", "beta4", "beta5"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")


@dataclass(frozen=True)
class RewardBreakdown:
    """One assignment's reward: r = b1 + b2*p_in - b3*p_out - b4*chi - b5*rho."""

    income: float
    payout: float
    overdue_count: int
    added_time: float
    total: float

    @classmethod
    def zero(cls) -> "RewardBreakdown":
        return cls(0.0, 0.0, 0, 0.0, 0.0)


def compute_reward(
    order: OrderState, plan: RoutePlan, params: RewardParams, speed_kmh: float
) -> RewardBreakdown:
    """Score one feasible insertion.  Income is the fare on the order's
    direct distance; payout is per-km on the added route distance."""
    if not plan.feasible:
        raise InfeasibleInsertion(f"no feasible route for order {order.id}")
    p_in = params.fare_base + params.fare_per_km * order.direct_km
    p_out = params.payout_per_km * (plan.added_duration / 60.0 * speed_kmh)
    total = (
        params.beta1
        + params.beta2 * p_in
        - params.beta3 * p_out
        - params.beta4 * plan.chi
        - params.beta5 * plan.rho
    )
    return RewardBreakdown(p_in, p_out, plan.chi, plan.rho, total)


@dataclass(frozen=True)
class WorldConfig:
    n_workers: int = 20
    capacity: int = 3
    extent: tuple[float, float] = (10.0, 10.0)
    speed_kmh: float = 60.0
    horizon: int = 30
    patience: int = 5
    reward: RewardParams = field(default_factory=RewardParams)

    def __post_init__(self) -> None:
        if self.n_workers < 1 or self.capacity < 1:
            raise ConfigError("need at least one worker and positive capacity")
        if self.horizon < 1 or self.patience < 0:
            raise ConfigError("horizon must be positive and patience non-negative")
        if self.speed_kmh <= 0 or min(self.extent) <= 0:
            raise ConfigError("speed and extent must be positive")


@dataclass(frozen=True)
class Event:
    time: float
    kind: str  # assign | pickup | dropoff | cancel
    order_id: int
    worker_id: int | None = None


@dataclass
class StepResult:
    rewards: list[float]
    breakdowns: dict[int, RewardBreakdown]
    global_reward: float
    events: list[Event]


class World:
    """Mutable episode state.  Deterministic given (config, orders, seed)."""

    def __init__(self, config: WorldConfig, orders: list[OrderState], rng) -> None:
        self.config = config
        self.travel = EuclideanTravel(config.speed_kmh)
        self.time = 0
        w, h = config.extent
        self.workers = [
            WorkerState(
                id=i,
                location=(float(rng.uniform(0, w)), float(rng.uniform(0, h))),
                capacity=config.capacity,
            )
            for i in range(config.n_workers)
        ]
        usable = [o for o in orders if 0 <= o.request_time < config.horizon]
        self._pending = sorted(usable, key=lambda o: (o.request_time, o.id))
        self.orders: dict[int, OrderState] = {}
        self.open_ids: list[int] = []
        self.events: list[Event] = []
        self.reward_log: list[float] = []
        self._inject_arrivals()

    # -- views -------------------------------------------------------------

    @property
    def done(self) -> bool:
        return self.time >= self.config.horizon

    def open_orders(self) -> list[OrderState]:
        return [self.orders[i] for i in self.open_ids]

    def worker_by_id(self, wid: int) -> WorkerState:
        return self.workers[wid]

    @property
    def total_reward(self) -> float:
        return sum(self.reward_log)

    # -- transition --------------------------------------------------------

    def _inject_arrivals(self) -> None:
        while self._pending and self._pending[0].request_time == self.time:
            order = self._pending.pop(0)
            self.orders[order.id] = order
            self.open_ids.append(order.id)

    def _validate(self, action: AssignmentAction) -> None:
        open_set = set(self.open_ids)
        for wid, oid in action.pairs:
            if not (0 <= wid < len(self.workers)):
                raise ConstraintViolation(f"unknown worker {wid}")
            if not self.workers[wid].available:
                raise ConstraintViolation(f"worker {wid} is not available")
            if oid not in open_set:
                raise ConstraintViolation(f"order {oid} is not open for assignment")

    def step(self, action: AssignmentAction) -> StepResult:
        if self.done:
            raise RuntimeError("episode already finished")
        self._validate(action)

        events: list[Event] = []
        rewards = [0.0] * len(self.workers)
        breakdowns: dict[int, RewardBreakdown] = {}
        for wid, oid in sorted(action.pairs):
            worker = self.workers[wid]
            order = self.orders[oid]
            plan = best_insertion(worker, order, self.time, self.travel)
            if not plan.feasible:
                raise ConstraintViolation(
                    f"no feasible insertion of order {oid} into worker {wid}"
                )
            breakdown = compute_reward(order, plan, self.config.reward, self.config.speed_kmh)
            worker.route = plan.stops
            worker.pickup_target = oid
            order.status = ASSIGNED
            order.assign_time = float(self.time)
            self.open_ids.remove(oid)
            rewards[wid] = breakdown.total
            breakdowns[wid] = breakdown
            events.append(Event(float(self.time), "assign", oid, wid))

        for worker in self.workers:
            if not worker.route:
                continue
            loc, remaining, fired = advance_route(worker.location, worker.route, 1.0, self.travel)
            worker.location = loc
            worker.route = remaining
            for stop, offset in fired:
                order = self.orders[stop.order_id]
                stamp = self.time + offset
                if stop.kind == PICKUP:
                    order.status = ONBOARD
                    order.pickup_time = stamp
                    worker.onboard.append(order)
                    if worker.pickup_target == order.id:
                        worker.pickup_target = None
                    assert len(worker.onboard) <= worker.capacity
                else:
                    order.status = DELIVERED
                    order.dropoff_time = stamp
                    worker.onboard = [o for o in worker.onboard if o.id != order.id]
                events.append(Event(stamp, stop.kind, order.id, worker.id))

        self.time += 1
        for oid in expire_orders(self):
            events.append(Event(float(self.time), "cancel", oid, None))
        self._inject_arrivals()

        global_reward = sum(rewards)
        self.reward_log.append(global_reward)
        self.events.extend(events)
        return StepResult(rewards, breakdowns, global_reward, events)


def expire_orders(world: World) -> list[int]:
    """Cancel open orders whose age strictly exceeds the patience window."""
    cancelled = []
    for oid in list(world.open_ids):
        order = world.orders[oid]
        if world.time - order.request_time > world.config.patience:
            order.status = CANCELLED
            world.open_ids.remove(oid)
            cancelled.append(oid)
    return cancelled


@dataclass(frozen=True)
class EpisodeMetrics:
    """Aggregate episode outcomes.  Means over empty populations are None."""

    total_reward: float
    requested: int
    served: int
    cancelled: int
    service_rate: float | None
    mean_delivery: float | None
    mean_detour: float | None
    mean_pickup: float | None
    mean_confirmation: float | None


def _mean(xs: list[float]) -> float | None:
    return sum(xs) / len(xs) if xs else None


def collect_metrics(world: World) -> EpisodeMetrics:
    """Episode metrics over the applicable order populations: delivery and
    detour over delivered orders, pickup over picked-up, confirmation over
    assigned."""
    orders = list(world.orders.values())
    served = [o for o in orders if o.assign_time is not None]
    picked = [o for o in orders if o.pickup_time is not None]
    delivered = [o for o in orders if o.dropoff_time is not None]
    deliveries = [o.dropoff_time - o.pickup_time for o in delivered]
    return EpisodeMetrics(
        total_reward=world.total_reward,
        requested=len(orders),
        served=len(served),
        cancelled=sum(1 for o in orders if o.status == CANCELLED),
        service_rate=len(served) / len(orders) if orders else None,
        mean_delivery=_mean(deliveries),
        mean_detour=_mean(
            [d - o.direct_time for d, o in zip(deliveries, delivered)]
        ),
        mean_pickup=_mean([o.pickup_time - o.assign_time for o in picked]),
        mean_confirmation=_mean([o.assign_time - o.request_time for o in served]),
    )
