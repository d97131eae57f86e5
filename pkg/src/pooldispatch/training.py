"""Two-stage trainer.

Stage 1 treats every worker as an independent double-Q agent sharing one
set of encoder and pair-scoring parameters: per step it scores all
(worker, order) pairs, boosts a random fraction of entries to a huge
value to force exploration, dispatches with the partial matcher, and
stores one transition per worker.  Stage 2 fine-tunes the full network
centrally: twin critics regress a smoothed min-bootstrap target and the
actor follows a score-function surrogate with delayed updates.

Idle transitions (a worker that took no order) regress the constant 0,
the value of idling; they shape the loss value but carry no gradient,
so they are downsampled before storage to keep batches informative.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, NumericError
from .matching import (
    LOG_FLOOR,
    NOISE_KINDS,
    AssignmentAction,
    NoiseSpec,
    inject_exploration,
    perturb_probabilities,
    solve_stage1,
    solve_stage2,
)
from .policy import (
    PolicyConfig,
    actor_forward,
    actor_params,
    batch_states,
    critic_forward,
    critic_params,
    init_policy_params,
    probability_matrix,
    save_policy,
    snapshot_state,
    stage1_params,
    stage1_q_matrix,
    stage1_q_scores,
)
from .replay import AgentTransition, GlobalTransition, ReplayBuffer
from .sim import collect_metrics


@dataclass(frozen=True)
class TrainerConfig:
    """Knobs shared by both stages.  ``epsilon`` follows a multiplicative
    per-episode schedule down to ``epsilon_final``; stage 2 reuses the
    same schedule for its probability-matrix noise, starting from
    ``noise_scale`` (0 disables exploration noise entirely)."""

    gamma: float = 0.99
    tau: float = 0.005
    epsilon: float = 0.99
    epsilon_final: float = 0.0005
    epsilon_decay: float = 0.975
    noise_scale: float = 0.99
    smoothing: float = 0.05
    policy_delay: int = 2
    stage1_batch: int = 256
    stage2_batch: int = 16
    stage1_buffer: int = 100_000
    stage2_buffer: int = 10_000
    episodes: int = 300
    noise_kind: str = "bsc"
    big_q: float = 1e6
    baseline: float = 0.0
    optimize_every: int = 4
    lr: float = 1e-4
    lr_decay: float = 0.99
    idle_keep: float = 0.25
    include_reject_logprobs: bool = True

    def __post_init__(self) -> None:
        for name in ("gamma", "tau", "epsilon", "epsilon_decay", "lr_decay"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1]")
        if not 0.0 < self.epsilon_final <= self.epsilon:
            raise ConfigError("epsilon_final must lie in (0, epsilon]")
        if self.noise_scale < 0 or self.smoothing < 0:
            raise ConfigError("noise magnitudes must be non-negative")
        if self.policy_delay < 1:
            raise ConfigError("policy delay must be at least 1")
        if self.optimize_every < 1:
            raise ConfigError("optimize_every must be at least 1")
        if min(self.stage1_batch, self.stage2_batch) < 1:
            raise ConfigError("batch sizes must be at least 1")
        if self.stage1_buffer < self.stage1_batch or self.stage2_buffer < self.stage2_batch:
            raise ConfigError("buffers must hold at least one batch")
        if self.episodes < 0:
            raise ConfigError("episode count must be non-negative")
        if self.noise_kind not in NOISE_KINDS:
            raise ConfigError(f"noise kind must be one of {NOISE_KINDS}")
        if not (math.isfinite(self.big_q) and self.big_q > 0):
            raise ConfigError("the exploration boost value must be positive and finite")
        if self.baseline != 0.0:
            raise ConfigError("the advantage baseline is fixed at zero")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if not 0.0 <= self.idle_keep <= 1.0:
            raise ConfigError("idle_keep must lie in [0, 1]")


# ---------------------------------------------------------------------------
# target builders (pure array arithmetic, unit-tested in isolation)


def double_q_targets(rewards, terminal, online_next, target_next, feasible_next, gamma):
    """y = r + gamma * Q_target(s', argmax_online Q(s', .)), with the argmax
    restricted to feasible next choices.  Terminal rows and rows with no
    feasible next choice do not bootstrap."""
    rewards = np.asarray(rewards, dtype=float)
    terminal = np.asarray(terminal, dtype=bool)
    online_next = np.asarray(online_next, dtype=float)
    target_next = np.asarray(target_next, dtype=float)
    b, m = online_next.shape
    if m == 0:
        boot = np.zeros(b)
    else:
        feasible = np.asarray(feasible_next, dtype=bool)
        has_choice = feasible.any(axis=1)
        masked = np.where(feasible, online_next, -np.inf)
        kappa = np.where(has_choice, np.argmax(masked, axis=1), 0)
        picked = np.take_along_axis(target_next, kappa[:, None], axis=1)[:, 0]
        boot = np.where(has_choice, picked, 0.0)
    return rewards + gamma * np.where(terminal, 0.0, boot)


def twin_min_targets(rewards, terminal, q1_next, q2_next, gamma):
    """y = R + gamma * min(Q1_target, Q2_target); terminal rows use y = R."""
    rewards = np.asarray(rewards, dtype=float)
    terminal = np.asarray(terminal, dtype=bool)
    boot = np.minimum(np.asarray(q1_next, float), np.asarray(q2_next, float))
    return rewards + gamma * np.where(terminal, 0.0, boot)


# ---------------------------------------------------------------------------
# losses


def ddqn_loss(batch, params, target_params, gamma, cfg: PolicyConfig, return_info=False):
    """Mean squared TD error over agent transitions with double-Q targets:
    the online net selects the next order, the target net prices it.

    Idle transitions contribute (0 - y)^2 as a constant; assigned ones
    regress the pair score at the taken column.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    states = batch_states([t.state for t in batch])
    nxt = batch_states([t.next_state for t in batch])
    rewards = np.array([t.reward for t in batch])
    terminal = np.array([t.terminal for t in batch], dtype=bool)

    with nn.no_grad():
        online_next = stage1_q_scores(nxt, params, cfg).data[:, 0, :]
        target_next = stage1_q_scores(nxt, target_params, cfg).data[:, 0, :]
    avail_next = np.array([t.next_state.available[0] for t in batch])
    feasible = nxt.order_mask & avail_next[:, None]
    targets = double_q_targets(rewards, terminal, online_next, target_next, feasible, gamma)

    b = len(batch)
    rows = [k for k, t in enumerate(batch) if t.order_index is not None]
    cols = [t.order_index for t in batch if t.order_index is not None]
    if rows:
        scores = stage1_q_scores(states, params, cfg)
        flat = nn.reshape(scores, (b, states.max_orders))
        picked = nn.take_pairs(flat, rows, cols)
        resid = nn.sub(picked, targets[rows])
        live = nn.reduce_sum(nn.mul(resid, resid))
    else:
        live = nn.Tensor(np.zeros(()))
    idle_sq = float(np.sum(targets[[k for k, t in enumerate(batch) if t.order_index is None]] ** 2))
    loss = nn.mul(nn.add(live, idle_sq), 1.0 / b)

    if return_info:
        predictions = np.zeros(b)
        if rows:
            predictions[rows] = picked.data
        info = {
            "targets": targets,
            "predictions": predictions,
            "online_next": online_next,
            "target_next": target_next,
            "feasible": feasible,
        }
        return loss, info
    return loss


def critic_loss(
    batch,
    params,
    target_params,
    gamma,
    cfg: PolicyConfig,
    smoothing: NoiseSpec | None = None,
    rng=None,
    return_info=False,
    train_rng=None,
):
    """Summed twin MSE against the smoothed min-bootstrap target.

    The bootstrap action is the greedy assignment of the target actor on
    the next state's (optionally perturbed) choice matrix.  Critics score
    detached actor features, so only critic parameters receive gradients.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    states = batch_states([t.state for t in batch])
    nxt = batch_states([t.next_state for t in batch])
    rewards = np.array([t.reward for t in batch])
    terminal = np.array([t.terminal for t in batch], dtype=bool)

    with nn.no_grad():
        out_s = actor_forward(states, params, cfg)
        out_n = actor_forward(nxt, target_params, cfg)
        next_actions = []
        for k in range(len(batch)):
            probs = probability_matrix(out_n, nxt, sample=k)
            if smoothing is not None and smoothing.magnitude > 0:
                probs = perturb_probabilities(probs, smoothing, rng)
            next_actions.append(solve_stage2(probs))
        q1_next = critic_forward(
            out_n.worker_tokens.data, out_n.order_tokens.data, next_actions,
            nxt.order_mask, target_params, cfg, 1,
        ).data
        q2_next = critic_forward(
            out_n.worker_tokens.data, out_n.order_tokens.data, next_actions,
            nxt.order_mask, target_params, cfg, 2,
        ).data
    targets = twin_min_targets(rewards, terminal, q1_next, q2_next, gamma)

    actions = [t.action for t in batch]
    w_tok, o_tok = out_s.worker_tokens.data, out_s.order_tokens.data
    train = train_rng is not None
    q1 = critic_forward(w_tok, o_tok, actions, states.order_mask, params, cfg, 1,
                        rng=train_rng, train=train)
    q2 = critic_forward(w_tok, o_tok, actions, states.order_mask, params, cfg, 2,
                        rng=train_rng, train=train)
    r1 = nn.sub(q1, targets)
    r2 = nn.sub(q2, targets)
    loss = nn.add(nn.reduce_mean(nn.mul(r1, r1)), nn.reduce_mean(nn.mul(r2, r2)))

    if return_info:
        info = {
            "targets": targets,
            "q1_next": q1_next,
            "q2_next": q2_next,
            "q1": q1.data,
            "q2": q2.data,
            "next_actions": next_actions,
        }
        return loss, info
    return loss


def actor_loss(
    batch,
    params,
    cfg: PolicyConfig,
    baseline: float = 0.0,
    include_rejects: bool = True,
    return_info=False,
    train_rng=None,
):
    """Score-function surrogate: -mean over samples of
    (stopgrad Q1(S, A) - baseline) * sum of log choice probabilities.

    The sum covers assigned pairs and, when ``include_rejects``, the
    available workers that turned every order down.  Q1 is the first
    online critic and enters as a constant, so gradients flow only
    through the log probabilities.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    states = batch_states([t.state for t in batch])
    b, n, mp = states.batch, states.n_workers, states.max_orders
    out = actor_forward(states, params, cfg, rng=train_rng, train=train_rng is not None)
    with nn.no_grad():
        qhat = critic_forward(
            out.worker_tokens.data, out.order_tokens.data, [t.action for t in batch],
            states.order_mask, params, cfg, 1,
        ).data
    advantage = qhat - baseline

    rows, cols, weights = [], [], []
    for k, t in enumerate(batch):
        for w, o in t.action.pairs:
            rows.append(k * n + w)
            cols.append(o)
            weights.append(advantage[k])
        if include_rejects:
            for w in t.action.rejecting:
                rows.append(k * n + w)
                cols.append(mp)
                weights.append(advantage[k])
    if rows:
        flat = nn.reshape(out.probs, (b * n, mp + 1))
        logs = nn.log(nn.clip_min(nn.take_pairs(flat, rows, cols), LOG_FLOOR))
        loss = nn.mul(nn.reduce_sum(nn.mul(logs, np.array(weights))), -1.0 / b)
    else:
        logs = nn.Tensor(np.zeros(0))
        loss = nn.Tensor(np.zeros(()))

    if return_info:
        info = {"qhat": qhat, "rows": rows, "cols": cols, "log_probs": logs.data}
        return loss, info
    return loss


# ---------------------------------------------------------------------------
# training loops


STAGE1_LOG_FIELDS = (
    "episode", "reward", "service_rate", "mean_pickup", "mean_delivery",
    "mean_detour", "mean_confirmation", "epsilon", "loss",
)
STAGE2_LOG_FIELDS = (
    "episode", "reward", "service_rate", "mean_pickup", "mean_delivery",
    "mean_detour", "mean_confirmation", "noise", "critic_loss", "actor_loss",
)


@dataclass
class TrainResult:
    params: dict[str, nn.Tensor]
    episodes: list = field(default_factory=list)
    optimizer_steps: int = 0
    critic_updates: int = 0
    actor_updates: int = 0


def _csv_value(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


class _EpisodeLog:
    """Collects per-episode rows and mirrors them to a CSV file."""

    def __init__(self, path, fields):
        self.rows: list[dict] = []
        self.fields = fields
        self._fh = open(path, "w", newline="") if path else None
        if self._fh:
            self._writer = csv.writer(self._fh)
            self._writer.writerow(fields)

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self._fh:
            self._writer.writerow([_csv_value(row[f]) for f in self.fields])
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()


def _mean_or_none(xs: list[float]) -> float | None:
    return sum(xs) / len(xs) if xs else None


def _episode_row(episode: int, metrics, **extra) -> dict:
    row = {
        "episode": episode,
        "reward": metrics.total_reward,
        "service_rate": metrics.service_rate,
        "mean_pickup": metrics.mean_pickup,
        "mean_delivery": metrics.mean_delivery,
        "mean_detour": metrics.mean_detour,
        "mean_confirmation": metrics.mean_confirmation,
    }
    row.update(extra)
    return row


def _abort_on_nonfinite(loss, context: str) -> None:
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericError(f"non-finite {context}: {value!r}")


def stage1_train(
    trainer: TrainerConfig,
    cfg: PolicyConfig,
    env_factory,
    rng,
    params: dict | None = None,
    log_path=None,
    checkpoint_path=None,
    checkpoint_every: int = 0,
    action_trace: list | None = None,
) -> TrainResult:
    """Pre-train the shared encoder and pair-scoring heads with per-worker
    double-Q learning.  ``env_factory(episode)`` builds each episode's
    world.  Returns the full parameter dict; the stage-1 subset is the
    part stage 2 inherits."""
    if params is None:
        params = init_policy_params(rng, cfg)
    trainable = stage1_params(params)
    target = nn.clone_params(trainable)
    opt = nn.Adam(trainable, lr=trainer.lr, lr_decay=trainer.lr_decay)
    buffer = ReplayBuffer(trainer.stage1_buffer)
    log = _EpisodeLog(log_path, STAGE1_LOG_FIELDS)
    result = TrainResult(params, log.rows)
    epsilon = trainer.epsilon
    steps = 0

    try:
        for episode in range(trainer.episodes):
            world = env_factory(episode)
            losses: list[float] = []
            snap = snapshot_state(world)
            while not world.done:
                if snap.n_orders and snap.available.any():
                    q = stage1_q_matrix(snap, params, cfg)
                    if epsilon > 0:
                        q = inject_exploration(q, epsilon, trainer.big_q, rng)
                    action = solve_stage1(q)
                else:
                    action = AssignmentAction.empty()
                if action_trace is not None:
                    action_trace.append((episode, world.time, action))
                step_result = world.step(action.with_columns_mapped(snap.order_ids))
                next_snap = snapshot_state(world)
                chosen = dict(action.pairs)
                for i in range(snap.n_workers):
                    col = chosen.get(i)
                    if col is None and rng.random() >= trainer.idle_keep:
                        continue
                    buffer.push(AgentTransition(
                        snap.agent_view(i), col, step_result.rewards[i],
                        next_snap.agent_view(i), world.done,
                    ))
                snap = next_snap
                steps += 1
                if steps % trainer.optimize_every == 0:
                    sample = buffer.sample(trainer.stage1_batch, rng)
                    if sample is not None:
                        loss = ddqn_loss(sample, params, target, trainer.gamma, cfg)
                        _abort_on_nonfinite(loss, f"stage-1 TD loss (episode {episode}, step {steps})")
                        opt.zero_grad()
                        loss.backward()
                        opt.step()
                        nn.soft_update(trainable, target, trainer.tau)
                        result.optimizer_steps += 1
                        losses.append(float(loss.data))
            log.write(_episode_row(
                episode, collect_metrics(world),
                epsilon=epsilon, loss=_mean_or_none(losses),
            ))
            epsilon = max(trainer.epsilon_final, epsilon * trainer.epsilon_decay)
            opt.decay_lr()
            if checkpoint_path and checkpoint_every and (episode + 1) % checkpoint_every == 0:
                save_policy(checkpoint_path, params, cfg, {"stage": 1, "episode": episode + 1})
        if checkpoint_path:
            save_policy(checkpoint_path, params, cfg, {"stage": 1, "episode": trainer.episodes})
    finally:
        log.close()
    return result


def stage2_train(
    trainer: TrainerConfig,
    cfg: PolicyConfig,
    env_factory,
    rng,
    init: dict | None = None,
    log_path=None,
    checkpoint_path=None,
    checkpoint_every: int = 0,
    action_trace: list | None = None,
) -> TrainResult:
    """Fine-tune the full network centrally with twin critics, delayed
    actor updates, and target-policy smoothing.  ``init`` supplies
    stage-1 parameters (None trains from scratch, the ablation case)."""
    params = init_policy_params(rng, cfg)
    if init is not None:
        for name, tensor in stage1_params(init).items():
            if name not in params or params[name].data.shape != tensor.data.shape:
                raise ConfigError(f"pretrained parameter {name} does not fit this architecture")
            params[name].data = tensor.data.copy()
    targets = nn.clone_params(params)
    a_opt = nn.Adam(actor_params(params), lr=trainer.lr, lr_decay=trainer.lr_decay)
    c_opt = nn.Adam(
        {**critic_params(params, 1), **critic_params(params, 2)},
        lr=trainer.lr, lr_decay=trainer.lr_decay,
    )
    buffer = ReplayBuffer(trainer.stage2_buffer)
    log = _EpisodeLog(log_path, STAGE2_LOG_FIELDS)
    result = TrainResult(params, log.rows)
    noise = trainer.noise_scale
    smoothing = NoiseSpec(trainer.noise_kind, trainer.smoothing) if trainer.smoothing > 0 else None
    dropout_rng = rng if cfg.dropout > 0 else None
    steps = 0

    try:
        for episode in range(trainer.episodes):
            world = env_factory(episode)
            c_losses: list[float] = []
            a_losses: list[float] = []
            snap = snapshot_state(world)
            while not world.done:
                batch_one = batch_states([snap])
                with nn.no_grad():
                    out = actor_forward(batch_one, params, cfg)
                probs = probability_matrix(out, batch_one)
                if noise > 0:
                    probs = perturb_probabilities(probs, NoiseSpec(trainer.noise_kind, noise), rng)
                action = solve_stage2(probs)
                if action_trace is not None:
                    action_trace.append((episode, world.time, action))
                step_result = world.step(action.with_columns_mapped(snap.order_ids))
                next_snap = snapshot_state(world)
                buffer.push(GlobalTransition(
                    snap, action, step_result.global_reward, next_snap, world.done,
                ))
                snap = next_snap
                steps += 1
                if steps % trainer.optimize_every == 0:
                    sample = buffer.sample(trainer.stage2_batch, rng)
                    if sample is not None:
                        loss = critic_loss(
                            sample, params, targets, trainer.gamma, cfg,
                            smoothing=smoothing, rng=rng, train_rng=dropout_rng,
                        )
                        _abort_on_nonfinite(loss, f"critic loss (episode {episode}, step {steps})")
                        c_opt.zero_grad()
                        loss.backward()
                        c_opt.step()
                        result.critic_updates += 1
                        c_losses.append(float(loss.data))
                        if result.critic_updates % trainer.policy_delay == 0:
                            a_loss = actor_loss(
                                sample, params, cfg,
                                baseline=trainer.baseline,
                                include_rejects=trainer.include_reject_logprobs,
                                train_rng=dropout_rng,
                            )
                            _abort_on_nonfinite(a_loss, f"actor loss (episode {episode}, step {steps})")
                            a_opt.zero_grad()
                            a_loss.backward()
                            a_opt.step()
                            result.actor_updates += 1
                            a_losses.append(float(a_loss.data))
                            nn.soft_update(params, targets, trainer.tau)
            log.write(_episode_row(
                episode, collect_metrics(world),
                noise=noise,
                critic_loss=_mean_or_none(c_losses),
                actor_loss=_mean_or_none(a_losses),
            ))
            if noise > 0:
                noise = max(trainer.epsilon_final, noise * trainer.epsilon_decay)
            a_opt.decay_lr()
            c_opt.decay_lr()
            if checkpoint_path and checkpoint_every and (episode + 1) % checkpoint_every == 0:
                save_policy(checkpoint_path, params, cfg, {"stage": 2, "episode": episode + 1})
        if checkpoint_path:
            save_policy(checkpoint_path, params, cfg, {"stage": 2, "episode": trainer.episodes})
    finally:
        log.close()
    return result
