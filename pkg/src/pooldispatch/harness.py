"""Experiment harness: baseline policies, model policies driven by saved
checkpoints, the episode runner, and CSV artifact writers.

Policies return actions keyed by actual order ids, ready for
``World.step``.  All randomness flows through explicitly seeded
generators so a (scenario, seed, episode) triple replays byte-for-byte.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConfigError
from .matching import AssignmentAction, NoiseSpec, perturb_probabilities, solve_stage1, solve_stage2
from .policy import (
    PolicyConfig,
    actor_forward,
    batch_states,
    load_policy,
    policy_config_for,
    probability_matrix,
    snapshot_state,
    stage1_q_matrix,
)
from .scenarios import ScenarioSpec, make_world
from .sim import EpisodeMetrics, World, collect_metrics

POLICY_STREAM = 1


def policy_rng(seed: int, episode: int = 0):
    """Generator for policy-side randomness, independent of the world's."""
    return np.random.default_rng(np.random.SeedSequence((seed, episode, POLICY_STREAM)))


class RandomPolicy:
    """Assigns each open order (in random sequence) to a uniformly random
    remaining available worker."""

    def __init__(self, rng):
        self.rng = rng

    def act(self, world: World) -> AssignmentAction:
        open_orders = world.open_orders()
        free = [w.id for w in world.workers if w.available]
        pairs = []
        for idx in self.rng.permutation(len(open_orders)):
            if not free:
                break
            order = open_orders[idx]
            w = free.pop(int(self.rng.integers(len(free))))
            pairs.append((w, order.id))
        return AssignmentAction.make(pairs, free)


class GreedyNearestPolicy:
    """Assigns orders oldest-first to the nearest available worker."""

    def act(self, world: World) -> AssignmentAction:
        free = {w.id: w for w in world.workers if w.available}
        pairs = []
        for order in sorted(world.open_orders(), key=lambda o: (o.request_time, o.id)):
            if not free:
                break
            ox, oy = order.origin
            best = min(
                free.values(),
                key=lambda w: ((w.location[0] - ox) ** 2 + (w.location[1] - oy) ** 2, w.id),
            )
            pairs.append((best.id, order.id))
            del free[best.id]
        return AssignmentAction.make(pairs, free.keys())


class Stage1Policy:
    """Greedy partial matching on the pretrained pair scores."""

    def __init__(self, params, cfg: PolicyConfig):
        self.params = params
        self.cfg = cfg

    def act(self, world: World) -> AssignmentAction:
        snap = snapshot_state(world)
        if snap.n_orders == 0 or not snap.available.any():
            return AssignmentAction.empty()
        action = solve_stage1(stage1_q_matrix(snap, self.params, self.cfg))
        return action.with_columns_mapped(snap.order_ids)


class Stage2Policy:
    """Greedy full assignment on the actor's choice matrix, optionally
    perturbed for exploration."""

    def __init__(self, params, cfg: PolicyConfig, noise: NoiseSpec | None = None, rng=None):
        self.params = params
        self.cfg = cfg
        self.noise = noise
        self.rng = rng

    def act(self, world: World) -> AssignmentAction:
        snap = snapshot_state(world)
        batch = batch_states([snap])
        with nn.no_grad():
            out = actor_forward(batch, self.params, self.cfg)
        probs = probability_matrix(out, batch)
        if self.noise is not None and self.noise.magnitude > 0:
            probs = perturb_probabilities(probs, self.noise, self.rng)
        action = solve_stage2(probs)
        return action.with_columns_mapped(snap.order_ids)


def load_model_policy(path, spec: ScenarioSpec):
    """Build the policy a checkpoint was trained as, using its recorded
    stage; returns (policy, meta)."""
    cfg = policy_config_for(spec.world_config())
    params, meta = load_policy(path, cfg)
    stage = meta.get("stage")
    if stage == 1:
        return Stage1Policy(params, cfg), meta
    if stage == 2:
        return Stage2Policy(params, cfg), meta
    raise ConfigError(f"checkpoint {path} does not record a training stage")


def build_policy(name: str, spec: ScenarioSpec, seed: int, episode: int = 0, checkpoint=None):
    if name == "random":
        return RandomPolicy(policy_rng(seed, episode))
    if name == "greedy":
        return GreedyNearestPolicy()
    if name in ("stage1", "stage2"):
        if checkpoint is None:
            raise ConfigError(f"policy {name} needs a checkpoint")
        policy, meta = load_model_policy(checkpoint, spec)
        if meta.get("stage") != int(name[-1]):
            raise ConfigError(
                f"checkpoint {checkpoint} holds a stage-{meta.get('stage')} model, not {name}"
            )
        return policy
    raise ConfigError(f"unknown policy {name!r}")


# ---------------------------------------------------------------------------
# episode runner and CSV artifacts


def run_episode(policy, spec: ScenarioSpec, seed: int, episode: int = 0,
                return_world: bool = False):
    """One full episode under the scenario's dynamics."""
    world = make_world(spec, seed, episode)
    while not world.done:
        world.step(policy.act(world))
    metrics = collect_metrics(world)
    return (metrics, world) if return_world else metrics


METRICS_FIELDS = (
    "episode", "seed", "reward", "requested", "served", "service_rate",
    "mean_delivery", "mean_detour", "mean_pickup", "mean_confirmation",
)
EVENT_FIELDS = ("time", "kind", "order_id", "worker_id")


def metrics_row(episode: int, seed: int, m: EpisodeMetrics) -> dict:
    return {
        "episode": episode,
        "seed": seed,
        "reward": m.total_reward,
        "requested": m.requested,
        "served": m.served,
        "service_rate": m.service_rate,
        "mean_delivery": m.mean_delivery,
        "mean_detour": m.mean_detour,
        "mean_pickup": m.mean_pickup,
        "mean_confirmation": m.mean_confirmation,
    }


def _cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_metrics_csv(path, rows: list[dict]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_FIELDS)
        for row in rows:
            writer.writerow([_cell(row[f]) for f in METRICS_FIELDS])


def write_events_csv(path, world: World) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EVENT_FIELDS)
        for ev in world.events:
            writer.writerow([_cell(ev.time), ev.kind, ev.order_id, _cell(ev.worker_id)])


def evaluate(spec: ScenarioSpec, seeds, policy_builder, out_path=None) -> list[dict]:
    """Run one noise-free episode per seed (merged in seed order) and
    optionally write the metrics CSV.  ``policy_builder(seed)`` supplies
    a fresh policy per seed."""
    rows = []
    for i, seed in enumerate(seeds):
        metrics = run_episode(policy_builder(seed), spec, seed)
        rows.append(metrics_row(i, seed, metrics))
    if out_path is not None:
        write_metrics_csv(out_path, rows)
    return rows
