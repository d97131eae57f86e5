"""Experience containers and the fixed-capacity replay buffer shared by
both training stages."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .matching import AssignmentAction
from .policy import StateSnapshot


@dataclass(frozen=True)
class AgentTransition:
    """One worker's step record: its single-agent view, the order column it
    took (None when idle), the reward, and the view one step later."""

    state: StateSnapshot
    order_index: int | None
    reward: float
    next_state: StateSnapshot
    terminal: bool

    def __post_init__(self) -> None:
        if self.state.n_workers != 1 or self.next_state.n_workers != 1:
            raise ValueError("agent transitions hold single-worker views")
        if self.order_index is None:
            if self.reward != 0.0:
                raise ValueError("idle transitions carry zero reward")
        elif not 0 <= self.order_index < self.state.n_orders:
            raise ValueError("order_index outside the state's order list")


@dataclass(frozen=True)
class GlobalTransition:
    """One dispatch step for the whole fleet; the action uses order-column
    indices into ``state.orders`` and ``reward`` is the step's global sum."""

    state: StateSnapshot
    action: AssignmentAction
    reward: float
    next_state: StateSnapshot
    terminal: bool

    def __post_init__(self) -> None:
        n, m = self.state.n_workers, self.state.n_orders
        for w, o in self.action.pairs:
            if not (0 <= w < n and 0 <= o < m):
                raise ValueError(f"pair ({w}, {o}) outside the state")
        for w in self.action.rejecting:
            if not 0 <= w < n:
                raise ValueError(f"rejecting worker {w} outside the state")


class ReplayBuffer:
    """Ring buffer: at capacity the oldest entry is overwritten.  Sampling
    is uniform without replacement within a batch."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("replay capacity must be at least 1")
        self.capacity = int(capacity)
        self._items: list = []
        self._cursor = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, item) -> None:
        if len(self._items) < self.capacity:
            self._items.append(item)
        else:
            self._items[self._cursor] = item
            self._cursor = (self._cursor + 1) % self.capacity

    def sample(self, batch: int, rng) -> list | None:
        """A list of ``batch`` distinct entries, or None while warming up."""
        if batch < 1:
            raise ValueError("batch size must be at least 1")
        if len(self._items) < batch:
            return None
        idx = rng.choice(len(self._items), size=batch, replace=False)
        return [self._items[i] for i in idx]
