"""Policy-network tests: featurization, architecture contracts,
permutation properties, and composed gradients on a small config."""

from __future__ import annotations

import numpy as np
import pytest

import pooldispatch.nn as nn
from pooldispatch.errors import ConfigError
from pooldispatch.matching import AssignmentAction, SENTINEL, solve_stage1, solve_stage2
from pooldispatch.policy import (
    ORDER_FEATURES,
    WORKER_FEATURES,
    BatchedState,
    PolicyConfig,
    StateSnapshot,
    actor_forward,
    batch_states,
    bilstm_encode,
    critic_forward,
    encode_state,
    init_policy_params,
    load_policy,
    normalized_order_keys,
    pair_utilities,
    policy_config_for,
    probability_matrix,
    qk_complexity_probe,
    save_policy,
    snapshot_state,
    stage1_params,
    stage1_q_matrix,
    stage1_q_scores,
)
from pooldispatch.sim import World, WorldConfig, build_order

SMALL = PolicyConfig(
    embed_dim=8,
    actor_layers=1,
    actor_heads=2,
    critic_dim=16,
    critic_layers=1,
    critic_heads=2,
    qk_dim=4,
    head_hidden=6,
    lstm_hidden=3,
    ffn_mult=2,
    capacity=2,
    order_scale=(1.0,) * ORDER_FEATURES,
    worker_scale=(1.0,) * WORKER_FEATURES,
)


def random_snapshot(rng, cfg, n=3, m=2) -> StateSnapshot:
    onboard_len = rng.integers(0, cfg.capacity + 1, n)
    onboard = rng.normal(size=(n, cfg.capacity, ORDER_FEATURES))
    for i, length in enumerate(onboard_len):
        onboard[i, length:] = 0.0
    return StateSnapshot(
        worker_static=rng.normal(size=(n, WORKER_FEATURES)),
        onboard=onboard,
        onboard_len=onboard_len.astype(np.int64),
        orders=rng.normal(size=(m, ORDER_FEATURES)),
        available=rng.random(n) < 0.8,
        order_ids=tuple(range(m)),
    )


# ---------------------------------------------------------------------------
# featurization


def test_snapshot_from_world():
    config = WorldConfig(n_workers=4, capacity=3)
    orders = [build_order(0, (1.0, 2.0), (3.0, 4.0), 0, 60.0, 5)]
    world = World(config, orders, np.random.default_rng(0))
    snap = snapshot_state(world)
    assert snap.worker_static.shape == (4, WORKER_FEATURES)
    assert snap.onboard.shape == (4, 3, ORDER_FEATURES)
    assert snap.orders.shape == (1, ORDER_FEATURES)
    assert snap.order_ids == (0,)
    assert np.all(snap.available)
    # raw order features: origin, destination, direct, slack, age
    o = world.orders[0]
    row = snap.orders[0]
    assert tuple(row[:4]) == (1.0, 2.0, 3.0, 4.0)
    assert row[4] == pytest.approx(o.direct_time)
    assert row[5] == pytest.approx(o.deadline)
    assert row[6] == 0.0


def test_batch_states_pads_and_masks():
    rng = np.random.default_rng(0)
    snaps = [random_snapshot(rng, SMALL, m=1), random_snapshot(rng, SMALL, m=3)]
    batch = batch_states(snaps)
    assert batch.orders.shape == (2, 3, ORDER_FEATURES)
    assert batch.order_mask.tolist() == [[True, False, False], [True, True, True]]
    assert np.all(batch.orders[0, 1:] == 0.0)
    with pytest.raises(ValueError):
        batch_states([random_snapshot(rng, SMALL, n=2), random_snapshot(rng, SMALL, n=3)])


def test_policy_config_validation_and_derivation():
    with pytest.raises(ConfigError):
        PolicyConfig(critic_dim=100)
    with pytest.raises(ConfigError):
        PolicyConfig(actor_heads=7)
    cfg = policy_config_for(WorldConfig(extent=(8.0, 6.0), horizon=20, capacity=2))
    assert cfg.order_scale == (8.0, 6.0, 8.0, 6.0, 20.0, 20.0, 20.0)
    assert cfg.worker_scale == (8.0, 6.0, 2.0, 1.0, 20.0, 20.0)
    assert cfg.capacity == 2


# ---------------------------------------------------------------------------
# encoder contracts


def test_empty_onboard_sequence_encodes_to_zero():
    rng = np.random.default_rng(1)
    params = init_policy_params(rng, SMALL)
    seq = nn.Tensor(rng.normal(size=(4, SMALL.capacity, ORDER_FEATURES)))
    lengths = np.array([0, 2, 0, 1])
    out = bilstm_encode(seq, lengths, params, "enc.worker.lstm", SMALL.lstm_hidden)
    assert np.all(out.data[0] == 0.0)
    assert np.all(out.data[2] == 0.0)
    assert np.any(out.data[1] != 0.0)


def test_arl_is_elementwise_reweighting():
    rng = np.random.default_rng(2)
    snap = random_snapshot(rng, SMALL)
    batch = batch_states([snap])

    def with_constant_omega(value: float):
        params = init_policy_params(np.random.default_rng(3), SMALL)
        params["enc.arl.l1.w"].data = np.zeros_like(params["enc.arl.l1.w"].data)
        params["enc.arl.l1.b"].data = np.full_like(params["enc.arl.l1.b"].data, value)
        return encode_state(batch, params, SMALL)

    w_one, o_one = with_constant_omega(1.0)
    w_two, o_two = with_constant_omega(2.0)
    assert np.allclose(w_two.data, 2.0 * w_one.data)
    assert np.allclose(o_two.data, 2.0 * o_one.data)


def test_identical_orders_get_identical_embeddings():
    rng = np.random.default_rng(4)
    snap = random_snapshot(rng, SMALL, m=2)
    snap.orders[1] = snap.orders[0]
    params = init_policy_params(rng, SMALL)
    _, o_embed = encode_state(batch_states([snap]), params, SMALL)
    assert np.array_equal(o_embed.data[0, 0], o_embed.data[0, 1])


# ---------------------------------------------------------------------------
# pair scoring (factorized attention with positive normalization)


def test_order_keys_are_nonnegative_unit_vectors():
    rng = np.random.default_rng(5)
    params = init_policy_params(rng, SMALL)
    vecs = nn.Tensor(rng.normal(0.0, 2.0, size=(1, 500, SMALL.embed_dim)))
    keys = normalized_order_keys(vecs, params, SMALL).data[0]
    assert np.all(keys >= 0.0)
    assert np.allclose(np.linalg.norm(keys, axis=1), 1.0, atol=1e-9)


def test_constant_g_output_gives_row_constant_scores():
    rng = np.random.default_rng(6)
    params = init_policy_params(rng, SMALL)
    # force the g head to a constant output regardless of input
    params["actor.g.l1.w"].data = np.zeros_like(params["actor.g.l1.w"].data)
    params["actor.g.l1.b"].data = np.full(SMALL.qk_dim, 0.3)
    w_vec = nn.Tensor(rng.normal(size=(1, 3, SMALL.embed_dim)))
    o_vec = nn.Tensor(rng.normal(size=(1, 4, SMALL.embed_dim)))
    scores = pair_utilities(w_vec, o_vec, params, SMALL).data[0]
    from pooldispatch.policy import _mlp  # reference f branch

    f_out = _mlp(w_vec, params, "actor.f", 2).data[0]
    expected = f_out.sum(axis=1) / np.sqrt(SMALL.qk_dim)
    for j in range(4):
        assert scores[:, j] == pytest.approx(expected, abs=1e-12)


def test_qk_dim_one_collapses_to_worker_score():
    cfg = PolicyConfig(
        embed_dim=8, actor_layers=1, actor_heads=2, critic_dim=16, critic_layers=1,
        critic_heads=2, qk_dim=1, head_hidden=6, lstm_hidden=3, ffn_mult=2, capacity=2,
        order_scale=(1.0,) * ORDER_FEATURES, worker_scale=(1.0,) * WORKER_FEATURES,
    )
    rng = np.random.default_rng(7)
    params = init_policy_params(rng, cfg)
    w_vec = nn.Tensor(rng.normal(size=(1, 3, cfg.embed_dim)))
    o_vec = nn.Tensor(rng.normal(size=(1, 5, cfg.embed_dim)))
    scores = pair_utilities(w_vec, o_vec, params, cfg).data[0]
    assert np.allclose(scores, scores[:, :1], atol=1e-12)


# ---------------------------------------------------------------------------
# actor forward


def test_actor_probability_rows():
    rng = np.random.default_rng(8)
    snaps = [random_snapshot(rng, SMALL, m=2), random_snapshot(rng, SMALL, m=3)]
    batch = batch_states(snaps)
    params = init_policy_params(rng, SMALL)
    out = actor_forward(batch, params, SMALL)
    probs = out.probs.data
    assert probs.shape == (2, 3, 4)
    assert np.allclose(probs.sum(axis=2), 1.0, atol=1e-12)
    assert np.all(probs[0, :, 2] == 0.0)  # padded order column
    p = probability_matrix(out, batch, sample=0)
    assert p.probs.shape == (3, 3)
    unavail = ~snaps[0].available
    assert np.all(p.probs[unavail, -1] == 1.0)


def test_actor_permutation_equivariance():
    rng = np.random.default_rng(9)
    snap = random_snapshot(rng, SMALL, n=4, m=3)
    params = init_policy_params(rng, SMALL)
    base = actor_forward(batch_states([snap]), params, SMALL)
    perm_w = rng.permutation(4)
    perm_o = rng.permutation(3)
    permuted = StateSnapshot(
        worker_static=snap.worker_static[perm_w],
        onboard=snap.onboard[perm_w],
        onboard_len=snap.onboard_len[perm_w],
        orders=snap.orders[perm_o],
        available=snap.available[perm_w],
        order_ids=tuple(snap.order_ids[j] for j in perm_o),
    )
    out = actor_forward(batch_states([permuted]), params, SMALL)
    assert np.allclose(
        out.pair_scores.data[0], base.pair_scores.data[0][perm_w][:, perm_o], atol=1e-9
    )
    assert np.allclose(out.reject_scores.data[0], base.reject_scores.data[0][perm_w], atol=1e-9)
    cols = np.concatenate([perm_o, [3]])
    assert np.allclose(out.probs.data[0], base.probs.data[0][perm_w][:, cols], atol=1e-9)


def test_actor_handles_zero_orders():
    rng = np.random.default_rng(10)
    snap = random_snapshot(rng, SMALL, m=0)
    batch = batch_states([snap])
    params = init_policy_params(rng, SMALL)
    out = actor_forward(batch, params, SMALL)
    assert out.probs.data.shape == (1, 3, 1)
    assert np.allclose(out.probs.data, 1.0)
    p = probability_matrix(out, batch)
    action = solve_stage2(p)
    assert action.pairs == ()


# ---------------------------------------------------------------------------
# stage-1 Q matrix


def test_stage1_q_matrix_masks_unavailable_rows():
    rng = np.random.default_rng(11)
    snap = random_snapshot(rng, SMALL, n=4, m=2)
    snap.available[1] = False
    params = init_policy_params(rng, SMALL)
    q = stage1_q_matrix(snap, params, SMALL)
    assert q.values.shape == (4, 2)
    assert np.all(q.values[1] == SENTINEL)
    assert np.all(np.isfinite(q.values[snap.available]))


def test_stage1_q_zero_orders_yields_empty_action():
    rng = np.random.default_rng(12)
    snap = random_snapshot(rng, SMALL, m=0)
    params = init_policy_params(rng, SMALL)
    q = stage1_q_matrix(snap, params, SMALL)
    assert q.values.shape == (3, 0)
    assert solve_stage1(q).pairs == ()


def test_stage1_q_batched_equals_per_agent():
    rng = np.random.default_rng(13)
    snap = random_snapshot(rng, SMALL, n=4, m=3)
    params = init_policy_params(rng, SMALL)
    full = stage1_q_matrix(snap, params, SMALL)
    for i in range(4):
        solo = stage1_q_matrix(snap.agent_view(i), params, SMALL)
        if snap.available[i]:
            assert np.allclose(full.values[i], solo.values[0], atol=1e-12)


# ---------------------------------------------------------------------------
# critics


def test_critic_forward_contract():
    rng = np.random.default_rng(14)
    snap = random_snapshot(rng, SMALL, n=3, m=2)
    batch = batch_states([snap])
    params = init_policy_params(rng, SMALL)
    out = actor_forward(batch, params, SMALL)
    idle = AssignmentAction.empty()
    q1 = critic_forward(out.worker_tokens, out.order_tokens, [idle], batch.order_mask, params, SMALL, 1)
    q2 = critic_forward(out.worker_tokens, out.order_tokens, [idle], batch.order_mask, params, SMALL, 2)
    assert q1.data.shape == (1,)
    assert np.isfinite(q1.data[0]) and np.isfinite(q2.data[0])
    assert abs(q1.data[0] - q2.data[0]) > 0.0  # independent critics
    with pytest.raises(ValueError):
        critic_forward(out.worker_tokens, out.order_tokens, [idle], batch.order_mask, params, SMALL, 3)
    bad = AssignmentAction.make([(0, 5)], [1, 2])
    with pytest.raises(ValueError):
        critic_forward(out.worker_tokens, out.order_tokens, [bad], batch.order_mask, params, SMALL, 1)


def test_critic_permutation_invariance():
    rng = np.random.default_rng(15)
    snap = random_snapshot(rng, SMALL, n=4, m=3)
    params = init_policy_params(rng, SMALL)
    batch = batch_states([snap])
    out = actor_forward(batch, params, SMALL)
    action = AssignmentAction.make([(0, 1), (2, 0)], [1, 3])
    base = critic_forward(out.worker_tokens, out.order_tokens, [action], batch.order_mask, params, SMALL, 1)
    perm = rng.permutation(4)
    inv = np.argsort(perm)
    w_perm = out.worker_tokens.data[:, perm]
    relabeled = AssignmentAction.make(
        [(inv[w], o) for w, o in action.pairs], [inv[w] for w in action.rejecting]
    )
    permuted = critic_forward(w_perm, out.order_tokens, [relabeled], batch.order_mask, params, SMALL, 1)
    assert abs(base.data[0] - permuted.data[0]) < 1e-9


# ---------------------------------------------------------------------------
# composed gradients (small config; acceptance re-runs at full width)


def test_actor_loss_gradient_small():
    rng = np.random.default_rng(16)
    snaps = [random_snapshot(rng, SMALL, m=2), random_snapshot(rng, SMALL, m=1)]
    batch = batch_states(snaps)
    params = init_policy_params(rng, SMALL)
    weights = nn.Tensor(rng.normal(size=(4,)))
    rows = [0, 1, 4, 5]  # flattened (sample, worker) choices
    cols = [0, 2, 0, 2]  # valid columns only (order or reject), as in training

    def loss_fn():
        out = actor_forward(batch, params, SMALL)
        flat = nn.reshape(out.probs, (6, 3))
        picked = nn.log(nn.clip_min(nn.take_pairs(flat, rows, cols), 1e-12))
        return nn.reduce_sum(nn.mul(picked, weights))

    err = nn.grad_check(loss_fn, params, rng=np.random.default_rng(0), max_per_param=2)
    assert err < 1e-4


def test_critic_loss_gradient_small():
    rng = np.random.default_rng(17)
    snap = random_snapshot(rng, SMALL, n=3, m=2)
    batch = batch_states([snap])
    params = init_policy_params(rng, SMALL)
    with nn.no_grad():
        out = actor_forward(batch, params, SMALL)
    w_tok, o_tok = out.worker_tokens.data, out.order_tokens.data
    action = AssignmentAction.make([(0, 0)], [1, 2])
    target = nn.Tensor(np.array([2.5]))

    def loss_fn():
        q = critic_forward(w_tok, o_tok, [action], batch.order_mask, params, SMALL, 1)
        diff = nn.sub(q, target)
        return nn.reduce_mean(nn.mul(diff, diff))

    err = nn.grad_check(loss_fn, params, rng=np.random.default_rng(1), max_per_param=2)
    assert err < 1e-4


def test_stage1_scores_gradient_small():
    rng = np.random.default_rng(18)
    snap = random_snapshot(rng, SMALL, n=3, m=2)
    batch = batch_states([snap])
    params = init_policy_params(rng, SMALL)
    subset = stage1_params(params)
    weights = nn.Tensor(rng.normal(size=(3, 2)))

    def loss_fn():
        scores = stage1_q_scores(batch, params, SMALL)
        return nn.reduce_sum(nn.mul(nn.reshape(scores, (3, 2)), weights))

    err = nn.grad_check(loss_fn, subset, rng=np.random.default_rng(2), max_per_param=2)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# persistence and probe


def test_policy_checkpoint_validates_architecture(tmp_path):
    rng = np.random.default_rng(19)
    params = init_policy_params(rng, SMALL)
    path = tmp_path / "policy.ckpt"
    save_policy(path, params, SMALL, extra_meta={"stage": 1})
    loaded, meta = load_policy(path, SMALL)
    assert meta["stage"] == 1
    assert np.array_equal(loaded["actor.f.l0.w"].data, params["actor.f.l0.w"].data)
    other = PolicyConfig(
        embed_dim=16, actor_layers=1, actor_heads=2, critic_dim=32, critic_layers=1,
        critic_heads=2, qk_dim=4, head_hidden=6, lstm_hidden=3, ffn_mult=2, capacity=2,
        order_scale=(1.0,) * ORDER_FEATURES, worker_scale=(1.0,) * WORKER_FEATURES,
    )
    with pytest.raises(ValueError):
        load_policy(path, other)


def test_complexity_probe_counts():
    tiny = qk_complexity_probe(1, 1, trials=1)
    assert tiny.factorized_evals == 2 and tiny.pairwise_evals == 1
    shapes = [(50, 10), (100, 20), (200, 50)]
    ratios = [qk_complexity_probe(n, m, trials=1).eval_ratio for n, m in shapes]
    assert ratios == sorted(ratios)
    big = qk_complexity_probe(200, 50, trials=1)
    assert big.factorized_evals == 250
    assert big.pairwise_evals == 10000
