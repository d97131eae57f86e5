"""Command-line front end.

Subcommands: ``simulate`` (baseline or checkpointed policies),
``train-stage1`` / ``train-stage2`` (the two training stages),
``evaluate`` (replay a checkpoint over seeds), ``count-actions`` (joint
action-space calculator), ``grad-check`` (finite-difference audit), and
``match-bench`` (assignment-latency probe).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import nn
from .errors import ConfigError, DataError, NumericError
from .matching import (
    NOISE_KINDS,
    NoiseSpec,
    action_space_lower_bound,
    benchmark_stage2,
    count_action_space,
)
from .harness import (
    Stage1Policy,
    Stage2Policy,
    build_policy,
    evaluate,
    load_model_policy,
    metrics_row,
    run_episode,
    write_events_csv,
    write_metrics_csv,
)
from .policy import load_policy, policy_config_for
from .scenarios import desk_scenario_path, env_factory, load_scenario
from .training import TrainerConfig, stage1_train, stage2_train

TRAIN_STREAM = 2


def _train_rng(seed: int):
    return np.random.default_rng(np.random.SeedSequence((seed, TRAIN_STREAM)))


def _print_rows(rows) -> None:
    for row in rows:
        served = f"{row['served']}/{row['requested']}"
        rate = "n/a" if row["service_rate"] is None else f"{row['service_rate']:.3f}"
        print(f"seed {row['seed']}: reward {row['reward']:.3f}, served {served}, rate {rate}")
    rewards = [row["reward"] for row in rows]
    if rewards:
        print(f"mean reward over {len(rewards)} seeds: {sum(rewards) / len(rewards):.3f}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    spec = load_scenario(args.scenario)
    seed = spec.seeds[0] if args.seed is None else args.seed
    rows = []
    last_world = None
    for episode in range(args.episodes):
        policy = build_policy(args.policy, spec, seed, episode, checkpoint=args.checkpoint)
        metrics, world = run_episode(policy, spec, seed, episode, return_world=True)
        rows.append(metrics_row(episode, seed, metrics))
        last_world = world
    if args.out:
        write_metrics_csv(args.out, rows)
        print(f"wrote {len(rows)} episode rows to {args.out}")
    else:
        _print_rows([{**r, "seed": seed} for r in rows])
    if args.events and last_world is not None:
        write_events_csv(args.events, last_world)
    return 0


def _trainer_from_args(args, **overrides) -> TrainerConfig:
    base = dict(
        episodes=args.episodes,
        lr=args.lr,
        noise_kind=args.noise_kind,
    )
    base.update(overrides)
    return TrainerConfig(**base)


def cmd_train_stage1(args) -> int:
    spec = load_scenario(args.scenario)
    cfg = policy_config_for(spec.world_config())
    trainer = _trainer_from_args(args)
    seed = spec.seeds[0] if args.seed is None else args.seed
    result = stage1_train(
        trainer, cfg, env_factory(spec, seed), _train_rng(seed),
        log_path=args.log, checkpoint_path=args.out,
        checkpoint_every=args.checkpoint_every,
    )
    print(f"stage 1 done: {trainer.episodes} episodes, "
          f"{result.optimizer_steps} optimizer steps, checkpoint {args.out}")
    if not args.no_eval:
        rows = evaluate(spec, spec.seeds,
                        lambda s: Stage1Policy(result.params, cfg),
                        out_path=args.eval_out)
        _print_rows(rows)
    return 0


def cmd_train_stage2(args) -> int:
    spec = load_scenario(args.scenario)
    cfg = policy_config_for(spec.world_config())
    trainer = _trainer_from_args(
        args, noise_scale=args.noise_scale, smoothing=args.smoothing,
        policy_delay=args.policy_delay,
    )
    seed = spec.seeds[0] if args.seed is None else args.seed
    init = None
    if args.init:
        init, meta = load_policy(args.init, cfg)
        if meta.get("stage") != 1:
            raise ConfigError(f"{args.init} is not a stage-1 checkpoint")
    result = stage2_train(
        trainer, cfg, env_factory(spec, seed), _train_rng(seed), init=init,
        log_path=args.log, checkpoint_path=args.out,
        checkpoint_every=args.checkpoint_every,
    )
    print(f"stage 2 done: {trainer.episodes} episodes, "
          f"{result.critic_updates} critic / {result.actor_updates} actor updates, "
          f"checkpoint {args.out}")
    if not args.no_eval:
        rows = evaluate(spec, spec.seeds,
                        lambda s: Stage2Policy(result.params, cfg),
                        out_path=args.eval_out)
        _print_rows(rows)
    return 0


def cmd_evaluate(args) -> int:
    spec = load_scenario(args.scenario)
    seeds = spec.seeds if args.seeds is None else tuple(int(s) for s in args.seeds.split(","))
    policy, meta = load_model_policy(args.checkpoint, spec)
    rows = evaluate(spec, seeds, lambda s: policy, out_path=args.out)
    print(f"stage-{meta.get('stage')} checkpoint over seeds {list(seeds)}:")
    _print_rows(rows)
    return 0


def cmd_count_actions(args) -> int:
    count = count_action_space(args.orders, args.workers)
    bound = action_space_lower_bound(args.orders, args.workers)
    print(f"orders={args.orders} workers={args.workers}")
    print(f"joint actions: {count}")
    print(f"lower bound (n-m+2)^m: {bound}")
    return 0


def cmd_match_bench(args) -> int:
    rng = np.random.default_rng(args.seed)
    noise = NoiseSpec(args.noise_kind, args.magnitude)
    times = benchmark_stage2(args.workers, args.orders, args.trials, noise, rng)
    for i, t in enumerate(times):
        print(f"trial {i}: {t:.4f} s")
    print(f"max {max(times):.4f} s over {args.trials} trials "
          f"({args.workers} workers x {args.orders} orders)")
    return 0


# ---------------------------------------------------------------------------
# gradient audit


def gradient_suite(rng) -> dict[str, tuple[float, float]]:
    """Representative finite-difference checks: a few primitives at the
    tight tolerance and the composed losses at the loose one.  Returns
    name -> (max relative error, tolerance)."""
    from .matching import AssignmentAction
    from .policy import (
        ORDER_FEATURES,
        WORKER_FEATURES,
        PolicyConfig,
        StateSnapshot,
        actor_forward,
        batch_states,
        critic_forward,
        init_policy_params,
        stage1_q_scores,
    )

    results: dict[str, tuple[float, float]] = {}

    def pt(*shape):
        return nn.Tensor(rng.normal(size=shape), requires_grad=True)

    x = nn.Tensor(rng.normal(size=(4, 3)))
    params = {"w": pt(3, 2), "b": pt(2)}
    results["affine-tanh-mean"] = (
        nn.grad_check(lambda: nn.reduce_mean(nn.tanh(nn.add(nn.matmul(x, params["w"]), params["b"]))), params),
        1e-5,
    )
    w = {"w": pt(5, 5)}
    mask = np.tril(np.ones((5, 5), dtype=bool))
    soft_w = rng.normal(size=(5, 5))
    results["masked-softmax"] = (
        nn.grad_check(lambda: nn.reduce_sum(nn.mul(nn.masked_softmax(w["w"], mask), soft_w)), w),
        1e-5,
    )
    g = {"w": pt(6, 8)}
    ln_w = rng.normal(size=(6, 8))
    results["layer-norm"] = (
        nn.grad_check(lambda: nn.reduce_sum(nn.mul(nn.layer_norm(g["w"]), ln_w)), g),
        1e-5,
    )

    cfg = PolicyConfig(
        embed_dim=8, actor_layers=1, actor_heads=2, critic_dim=16, critic_layers=1,
        critic_heads=2, qk_dim=4, head_hidden=6, lstm_hidden=3, ffn_mult=2, capacity=2,
        order_scale=(1.0,) * ORDER_FEATURES, worker_scale=(1.0,) * WORKER_FEATURES,
    )
    n, m = 3, 2
    onboard_len = rng.integers(0, cfg.capacity + 1, n)
    onboard = rng.normal(size=(n, cfg.capacity, ORDER_FEATURES))
    for i, length in enumerate(onboard_len):
        onboard[i, length:] = 0.0
    snap = StateSnapshot(
        worker_static=rng.normal(size=(n, WORKER_FEATURES)),
        onboard=onboard,
        onboard_len=onboard_len.astype(np.int64),
        orders=rng.normal(size=(m, ORDER_FEATURES)),
        available=np.ones(n, dtype=bool),
        order_ids=tuple(range(m)),
    )
    batch = batch_states([snap])
    pp = init_policy_params(rng, cfg)
    action = AssignmentAction.make([(0, 0)], [1, 2])
    weights = rng.normal(size=(n, m))

    def stage1_loss():
        scores = stage1_q_scores(batch, pp, cfg)
        return nn.reduce_sum(nn.mul(nn.reshape(scores, (n, m)), weights))

    probe = np.random.default_rng(0)
    results["stage1-scores"] = (
        nn.grad_check(stage1_loss, pp, rng=probe, max_per_param=2), 1e-4)

    log_weights = rng.normal(size=(2,))

    def actor_surrogate():
        out = actor_forward(batch, pp, cfg)
        flat = nn.reshape(out.probs, (n, m + 1))
        picked = nn.log(nn.clip_min(nn.take_pairs(flat, [0, 1], [0, m]), 1e-12))
        return nn.reduce_sum(nn.mul(picked, log_weights))

    results["actor-loss"] = (
        nn.grad_check(actor_surrogate, pp, rng=probe, max_per_param=2), 1e-4)

    with nn.no_grad():
        out = actor_forward(batch, pp, cfg)
    w_tok, o_tok = out.worker_tokens.data, out.order_tokens.data

    def critic_surrogate():
        q = critic_forward(w_tok, o_tok, [action], batch.order_mask, pp, cfg, 1)
        diff = nn.sub(q, 1.5)
        return nn.reduce_mean(nn.mul(diff, diff))

    results["critic-loss"] = (
        nn.grad_check(critic_surrogate, pp, rng=probe, max_per_param=2), 1e-4)
    return results


def cmd_grad_check(args) -> int:
    results = gradient_suite(np.random.default_rng(args.seed))
    failed = []
    for name, (err, tol) in results.items():
        status = "ok" if err < tol else "FAIL"
        print(f"{name:20s} max rel err {err:.3e}  (tol {tol:.0e})  {status}")
        if err >= tol:
            failed.append(name)
    if failed:
        raise NumericError(f"gradient checks failed: {', '.join(failed)}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common_train_flags(p: argparse.ArgumentParser, default_out: str) -> None:
    p.add_argument("--scenario", default=str(desk_scenario_path()),
                   help="scenario JSON (default: packaged desk scenario)")
    p.add_argument("--episodes", type=int, default=300, help="training episodes")
    p.add_argument("--seed", type=int, default=None,
                   help="training seed (default: first scenario seed)")
    p.add_argument("--lr", type=float, default=1e-4, help="initial learning rate")
    p.add_argument("--noise-kind", choices=NOISE_KINDS, default="bsc",
                   help="exploration noise family")
    p.add_argument("--out", default=default_out, help="checkpoint path")
    p.add_argument("--log", default=None, help="per-episode training CSV")
    p.add_argument("--checkpoint-every", type=int, default=0,
                   help="also checkpoint every K episodes (0: only at the end)")
    p.add_argument("--eval-out", default=None, help="post-training eval metrics CSV")
    p.add_argument("--no-eval", action="store_true", help="skip post-training evaluation")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pooldispatch",
        description="Desk-scale ride-pooling dispatch: simulate, train, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run episodes under a fixed policy")
    p.add_argument("--scenario", default=str(desk_scenario_path()))
    p.add_argument("--policy", choices=["random", "greedy", "stage1", "stage2"],
                   default="greedy")
    p.add_argument("--checkpoint", default=None, help="model checkpoint for stage1/stage2")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--out", default=None, help="metrics CSV path")
    p.add_argument("--events", default=None, help="event CSV path (last episode)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train-stage1", help="pre-train the encoder and pair scores")
    _add_common_train_flags(p, "stage1.ckpt")
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="fine-tune the full policy")
    _add_common_train_flags(p, "stage2.ckpt")
    p.add_argument("--init", default=None, help="stage-1 checkpoint to start from")
    p.add_argument("--noise-scale", type=float, default=0.99,
                   help="initial exploration noise magnitude")
    p.add_argument("--smoothing", type=float, default=0.05,
                   help="target-policy smoothing magnitude")
    p.add_argument("--policy-delay", type=int, default=2,
                   help="critic updates per actor update")
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("evaluate", help="replay a checkpoint over scenario seeds")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario", default=str(desk_scenario_path()))
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.add_argument("--out", default=None, help="metrics CSV path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("count-actions", help="joint action-space calculator")
    p.add_argument("orders", type=int)
    p.add_argument("workers", type=int)
    p.set_defaults(func=cmd_count_actions)

    p = sub.add_parser("grad-check", help="finite-difference gradient audit")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("match-bench", help="assignment-latency probe")
    p.add_argument("--workers", type=int, default=2000)
    p.add_argument("--orders", type=int, default=500)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--noise-kind", choices=NOISE_KINDS, default="bsc")
    p.add_argument("--magnitude", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_match_bench)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
