"""Dispatch policy network.

Pipeline (actor): raw worker/order features -> fixed affine input
normalization -> branch encoders (bi-directional LSTM over onboard
orders + feedforward for workers; feedforward for orders) -> shared
adaptive re-weighting (y = x * Omega(x)) -> a positional-embedding-free
attention-encoder stack over the joint token sequence -> pair utilities
via a factorized query/key scoring head with positive normalization,
plus a position-wise reject head -> row softmax into a choice matrix.

The pair score for worker i and order j is

    M[i][j] = f(w_i) . softplus(g(o_j)) / ||softplus(g(o_j))||_2

so each side is embedded once (n + m head evaluations instead of n * m
pairwise evaluations) and the order-side vector is non-negative with
unit L2 norm.  Stage-1 Q-values apply the same f/g heads directly to
the branch-encoder outputs, skipping the attention stack.

Twin critics score (state, action) pairs: per worker a token
concat(contextual worker embedding, chosen order embedding or a learned
null-order embedding), run through an independent attention stack and a
learned-query attention pooling into a scalar.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError
from .matching import AssignmentAction, ProbabilityMatrix, QMatrix
from .nn import Tensor

WORKER_FEATURES = 6
ORDER_FEATURES = 7


@dataclass(frozen=True)
class PolicyConfig:
    """Architecture hyperparameters plus the fixed feature scales."""

    embed_dim: int = 64
    actor_layers: int = 3
    actor_heads: int = 4
    critic_dim: int = 128
    critic_layers: int = 3
    critic_heads: int = 4
    qk_dim: int = 16
    head_hidden: int = 32
    lstm_hidden: int = 16
    ffn_mult: int = 4
    dropout: float = 0.1
    capacity: int = 3
    order_scale: tuple[float, ...] = (10.0, 10.0, 10.0, 10.0, 30.0, 30.0, 30.0)
    worker_scale: tuple[float, ...] = (10.0, 10.0, 3.0, 1.0, 30.0, 30.0)

    def __post_init__(self) -> None:
        if self.critic_dim != 2 * self.embed_dim:
            raise ConfigError("critic width must equal twice the embedding width")
        if self.embed_dim % self.actor_heads or self.critic_dim % self.critic_heads:
            raise ConfigError("width must divide evenly into heads")
        if len(self.order_scale) != ORDER_FEATURES or len(self.worker_scale) != WORKER_FEATURES:
            raise ConfigError("feature scale length mismatch")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")


def policy_config_for(world_config, **overrides) -> PolicyConfig:
    """Derive feature scales (coordinates by extent, times by horizon,
    counts by capacity) from a world configuration."""
    w, h = world_config.extent
    t = float(world_config.horizon)
    return PolicyConfig(
        capacity=world_config.capacity,
        order_scale=(w, h, w, h, t, t, t),
        worker_scale=(w, h, float(world_config.capacity), 1.0, t, t),
        **overrides,
    )


# ---------------------------------------------------------------------------
# featurization


def order_features(order, now: float) -> np.ndarray:
    """Raw (unnormalized) order features: origin, destination, direct
    travel time, deadline slack, and age."""
    return np.array(
        [
            order.origin[0],
            order.origin[1],
            order.destination[0],
            order.destination[1],
            order.direct_time,
            order.deadline - now,
            now - order.request_time,
        ],
        dtype=np.float64,
    )


def worker_features(worker, now: float, travel, capacity: int) -> tuple[np.ndarray, np.ndarray]:
    """Raw worker features: (static vector, onboard order feature rows
    padded to capacity, in pickup order)."""
    total_route = 0.0
    loc = worker.location
    for s in worker.route:
        total_route += travel.minutes(loc, s.point)
        loc = s.point
    static = np.array(
        [
            worker.location[0],
            worker.location[1],
            float(len(worker.onboard)),
            1.0 if worker.available else 0.0,
            worker.minutes_until_available(travel),
            total_route,
        ],
        dtype=np.float64,
    )
    onboard = np.zeros((capacity, ORDER_FEATURES), dtype=np.float64)
    for k, o in enumerate(worker.onboard[:capacity]):
        onboard[k] = order_features(o, now)
    return static, onboard


@dataclass(frozen=True)
class StateSnapshot:
    """Replay-storable feature view of a decision state.

    Arrays are plain float64 so snapshots round-trip through buffers
    without touching simulator objects.  ``order_ids`` maps order
    columns back to simulator order ids.
    """

    worker_static: np.ndarray  # (n, WORKER_FEATURES)
    onboard: np.ndarray  # (n, capacity, ORDER_FEATURES)
    onboard_len: np.ndarray  # (n,) int
    orders: np.ndarray  # (m, ORDER_FEATURES)
    available: np.ndarray  # (n,) bool
    order_ids: tuple[int, ...] = ()

    @property
    def n_workers(self) -> int:
        return self.worker_static.shape[0]

    @property
    def n_orders(self) -> int:
        return self.orders.shape[0]

    def agent_view(self, i: int) -> "StateSnapshot":
        """Single-worker slice sharing the underlying arrays."""
        return StateSnapshot(
            worker_static=self.worker_static[i : i + 1],
            onboard=self.onboard[i : i + 1],
            onboard_len=self.onboard_len[i : i + 1],
            orders=self.orders,
            available=self.available[i : i + 1],
            order_ids=self.order_ids,
        )


def snapshot_state(world) -> StateSnapshot:
    now = float(world.time)
    capacity = world.config.capacity
    statics, onboards, lens = [], [], []
    for w in world.workers:
        static, onboard = worker_features(w, now, world.travel, capacity)
        statics.append(static)
        onboards.append(onboard)
        lens.append(len(w.onboard))
    open_orders = world.open_orders()
    orders = (
        np.stack([order_features(o, now) for o in open_orders])
        if open_orders
        else np.zeros((0, ORDER_FEATURES), dtype=np.float64)
    )
    return StateSnapshot(
        worker_static=np.stack(statics),
        onboard=np.stack(onboards),
        onboard_len=np.array(lens, dtype=np.int64),
        orders=orders,
        available=np.array([w.available for w in world.workers], dtype=bool),
        order_ids=tuple(o.id for o in open_orders),
    )


@dataclass(frozen=True)
class BatchedState:
    """Padded stack of snapshots (worker count must agree across samples)."""

    worker_static: np.ndarray  # (B, n, WORKER_FEATURES)
    onboard: np.ndarray  # (B, n, K, ORDER_FEATURES)
    onboard_len: np.ndarray  # (B, n)
    orders: np.ndarray  # (B, Mp, ORDER_FEATURES)
    order_mask: np.ndarray  # (B, Mp) bool
    available: np.ndarray  # (B, n) bool

    @property
    def batch(self) -> int:
        return self.worker_static.shape[0]

    @property
    def n_workers(self) -> int:
        return self.worker_static.shape[1]

    @property
    def max_orders(self) -> int:
        return self.orders.shape[1]


def batch_states(snapshots: list[StateSnapshot]) -> BatchedState:
    n = snapshots[0].n_workers
    if any(s.n_workers != n for s in snapshots):
        raise ValueError("snapshots in a batch must share the worker count")
    mp = max(s.n_orders for s in snapshots)
    b = len(snapshots)
    orders = np.zeros((b, mp, ORDER_FEATURES), dtype=np.float64)
    order_mask = np.zeros((b, mp), dtype=bool)
    for i, s in enumerate(snapshots):
        m = s.n_orders
        orders[i, :m] = s.orders
        order_mask[i, :m] = True
    return BatchedState(
        worker_static=np.stack([s.worker_static for s in snapshots]),
        onboard=np.stack([s.onboard for s in snapshots]),
        onboard_len=np.stack([s.onboard_len for s in snapshots]),
        orders=orders,
        order_mask=order_mask,
        available=np.stack([s.available for s in snapshots]),
    )


# ---------------------------------------------------------------------------
# parameter construction


def _mlp_params(rng, prefix: str, sizes: list[int]) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for k in range(len(sizes) - 1):
        params.update(nn.linear_params(rng, f"{prefix}.l{k}", sizes[k], sizes[k + 1]))
    return params


def _lstm_params(rng, prefix: str, n_in: int, hidden: int) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for direction in ("fwd", "bwd"):
        params[f"{prefix}.{direction}.w_ih"] = Tensor(
            nn.uniform_init(rng, (n_in, 4 * hidden), n_in), requires_grad=True
        )
        params[f"{prefix}.{direction}.w_hh"] = Tensor(
            nn.uniform_init(rng, (hidden, 4 * hidden), hidden), requires_grad=True
        )
        params[f"{prefix}.{direction}.b"] = Tensor(
            nn.uniform_init(rng, (4 * hidden,), hidden), requires_grad=True
        )
    return params


def _attention_block_params(rng, prefix: str, dim: int, ffn_mult: int) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for name in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}.attn.{name}"] = Tensor(
            nn.uniform_init(rng, (dim, dim), dim), requires_grad=True
        )
        params[f"{prefix}.attn.{name[1]}b"] = Tensor(
            nn.uniform_init(rng, (dim,), dim), requires_grad=True
        )
    params.update(_mlp_params(rng, f"{prefix}.ffn", [dim, ffn_mult * dim, dim]))
    for ln in ("ln1", "ln2"):
        params[f"{prefix}.{ln}.gain"] = Tensor(np.ones(dim), requires_grad=True)
        params[f"{prefix}.{ln}.bias"] = Tensor(np.zeros(dim), requires_grad=True)
    return params


def init_policy_params(rng, cfg: PolicyConfig) -> dict[str, Tensor]:
    d = cfg.embed_dim
    half = d // 2
    params: dict[str, Tensor] = {}
    params.update(_mlp_params(rng, "enc.order", [ORDER_FEATURES, d, d]))
    params.update(_mlp_params(rng, "enc.worker.nonseq", [WORKER_FEATURES, half]))
    params.update(_lstm_params(rng, "enc.worker.lstm", ORDER_FEATURES, cfg.lstm_hidden))
    params.update(
        _mlp_params(rng, "enc.worker.comb", [half + 2 * cfg.lstm_hidden, d])
    )
    params.update(_mlp_params(rng, "enc.arl", [d, d, d]))
    for k in range(cfg.actor_layers):
        params.update(_attention_block_params(rng, f"actor.layer{k}", d, cfg.ffn_mult))
    params.update(_mlp_params(rng, "actor.f", [d, cfg.head_hidden, cfg.qk_dim]))
    params.update(_mlp_params(rng, "actor.g", [d, cfg.head_hidden, cfg.qk_dim]))
    params.update(_mlp_params(rng, "actor.reject", [d, cfg.head_hidden, 1]))
    for c in (1, 2):
        for k in range(cfg.critic_layers):
            params.update(
                _attention_block_params(rng, f"critic{c}.layer{k}", cfg.critic_dim, cfg.ffn_mult)
            )
        params[f"critic{c}.pool.query"] = Tensor(
            nn.uniform_init(rng, (cfg.critic_dim,), cfg.critic_dim), requires_grad=True
        )
        params.update(_mlp_params(rng, f"critic{c}.head", [cfg.critic_dim, 1]))
    params["critic.null_order"] = Tensor(
        nn.uniform_init(rng, (d,), d), requires_grad=True
    )
    return params


STAGE1_PREFIXES = ("enc.", "actor.f.", "actor.g.")


def stage1_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """The pretraining parameter subset: branch encoders + scoring heads."""
    return {k: v for k, v in params.items() if k.startswith(STAGE1_PREFIXES)}


def actor_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {
        k: v
        for k, v in params.items()
        if k.startswith("enc.") or k.startswith("actor.")
    }


def critic_params(params: dict[str, Tensor], idx: int) -> dict[str, Tensor]:
    out = {k: v for k, v in params.items() if k.startswith(f"critic{idx}.")}
    out["critic.null_order"] = params["critic.null_order"]
    return out


# ---------------------------------------------------------------------------
# forward building blocks


def _mlp(x: Tensor, params, prefix: str, layers: int) -> Tensor:
    for k in range(layers):
        x = nn.linear(x, params, f"{prefix}.l{k}")
        if k < layers - 1:
            x = nn.relu(x)
    return x


def _lstm_direction(steps, masks, params, prefix: str, hidden: int) -> Tensor:
    """Unrolled LSTM over a list of (R, F) step tensors; ``masks`` holds
    (R, 1) validity columns.  Padded steps copy state through, so an
    empty sequence yields the zero vector."""
    rows = steps[0].data.shape[0]
    h = Tensor(np.zeros((rows, hidden)))
    c = Tensor(np.zeros((rows, hidden)))
    w_ih = params[f"{prefix}.w_ih"]
    w_hh = params[f"{prefix}.w_hh"]
    b = params[f"{prefix}.b"]
    for x_t, m_t in zip(steps, masks):
        gates = nn.add(nn.add(nn.matmul(x_t, w_ih), nn.matmul(h, w_hh)), b)
        i_g = nn.sigmoid(nn.narrow(gates, 1, 0, hidden))
        f_g = nn.sigmoid(nn.narrow(gates, 1, hidden, hidden))
        g_g = nn.tanh(nn.narrow(gates, 1, 2 * hidden, hidden))
        o_g = nn.sigmoid(nn.narrow(gates, 1, 3 * hidden, hidden))
        c_new = nn.add(nn.mul(f_g, c), nn.mul(i_g, g_g))
        h_new = nn.mul(o_g, nn.tanh(c_new))
        c = nn.add(nn.mul(m_t, c_new), nn.mul(1.0 - m_t.data, c))
        h = nn.add(nn.mul(m_t, h_new), nn.mul(1.0 - m_t.data, h))
    return h


def bilstm_encode(seq: Tensor, lengths: np.ndarray, params, prefix: str, hidden: int) -> Tensor:
    """Bi-directional final states over (R, T, F) with per-row lengths."""
    rows, t_max, _ = seq.data.shape
    steps = [nn.reshape(nn.narrow(seq, 1, t, 1), (rows, -1)) for t in range(t_max)]
    masks = [
        Tensor((lengths > t).astype(np.float64).reshape(rows, 1)) for t in range(t_max)
    ]
    fwd = _lstm_direction(steps, masks, params, f"{prefix}.fwd", hidden)
    bwd = _lstm_direction(steps[::-1], masks[::-1], params, f"{prefix}.bwd", hidden)
    return nn.concat([fwd, bwd], axis=1)


def multi_head_attention(
    x: Tensor, params, prefix: str, heads: int, key_mask: np.ndarray | None
) -> Tensor:
    b, t, d = x.data.shape
    dh = d // heads

    def split(v: Tensor) -> Tensor:
        return nn.swapaxes(nn.reshape(v, (b, t, heads, dh)), 1, 2)

    q = split(nn.add(nn.matmul(x, params[f"{prefix}.wq"]), params[f"{prefix}.qb"]))
    k = split(nn.add(nn.matmul(x, params[f"{prefix}.wk"]), params[f"{prefix}.kb"]))
    v = split(nn.add(nn.matmul(x, params[f"{prefix}.wv"]), params[f"{prefix}.vb"]))
    scores = nn.mul(nn.matmul(q, nn.swapaxes(k, 2, 3)), 1.0 / np.sqrt(dh))
    mask = None if key_mask is None else key_mask[:, None, None, :]
    attn = nn.masked_softmax(scores, mask)
    ctx = nn.reshape(nn.swapaxes(nn.matmul(attn, v), 1, 2), (b, t, d))
    return nn.add(nn.matmul(ctx, params[f"{prefix}.wo"]), params[f"{prefix}.ob"])


def _layer_norm_affine(x: Tensor, params, prefix: str) -> Tensor:
    return nn.add(nn.mul(nn.layer_norm(x), params[f"{prefix}.gain"]), params[f"{prefix}.bias"])


def attention_encoder(
    x: Tensor,
    params,
    prefix: str,
    layers: int,
    heads: int,
    key_mask: np.ndarray | None,
    rng=None,
    train: bool = False,
    drop: float = 0.0,
) -> Tensor:
    """Post-norm transformer encoder without positional embeddings."""
    for k in range(layers):
        lp = f"{prefix}.layer{k}"
        attn = multi_head_attention(x, params, f"{lp}.attn", heads, key_mask)
        x = _layer_norm_affine(nn.add(x, nn.dropout(attn, drop, rng, train)), params, f"{lp}.ln1")
        ffn = _mlp(x, params, f"{lp}.ffn", 2)
        x = _layer_norm_affine(nn.add(x, nn.dropout(ffn, drop, rng, train)), params, f"{lp}.ln2")
    return x


# ---------------------------------------------------------------------------
# encoders


def encode_state(batch: BatchedState, params, cfg: PolicyConfig) -> tuple[Tensor, Tensor]:
    """Branch embeddings (pre-attention): workers (B, n, D), orders (B, Mp, D).

    Raw features are scaled by the fixed normalization constants, then
    each branch is embedded and passed through the shared re-weighting
    layer y = x * Omega(x).
    """
    b, n = batch.batch, batch.n_workers
    k_cap = batch.onboard.shape[2]

    w_scale = np.asarray(cfg.worker_scale)
    o_scale = np.asarray(cfg.order_scale)

    static = Tensor(batch.worker_static / w_scale)
    onboard = Tensor(batch.onboard.reshape(b * n, k_cap, ORDER_FEATURES) / o_scale)
    lengths = batch.onboard_len.reshape(b * n)

    nonseq = nn.relu(nn.linear(static, params, "enc.worker.nonseq.l0"))
    seq = bilstm_encode(onboard, lengths, params, "enc.worker.lstm", cfg.lstm_hidden)
    seq = nn.reshape(seq, (b, n, 2 * cfg.lstm_hidden))
    w_embed = nn.linear(nn.concat([nonseq, seq], axis=2), params, "enc.worker.comb.l0")

    orders = Tensor(batch.orders / o_scale)
    o_embed = _mlp(orders, params, "enc.order", 2)

    def arl(x: Tensor) -> Tensor:
        return nn.mul(x, _mlp(x, params, "enc.arl", 2))

    return arl(w_embed), arl(o_embed)


# ---------------------------------------------------------------------------
# actor


def normalized_order_keys(o_vec: Tensor, params, cfg: PolicyConfig) -> Tensor:
    """Order-side scoring branch: softplus of the g head, scaled to unit
    L2 norm, so every key vector is non-negative with length one."""
    g_raw = nn.softplus(_mlp(o_vec, params, "actor.g", 2))
    norm = nn.pow_const(nn.reduce_sum(nn.mul(g_raw, g_raw), axis=-1, keepdims=True), 0.5)
    return nn.div(g_raw, nn.clip_min(norm, 1e-150))


def pair_utilities(w_vec: Tensor, o_vec: Tensor, params, cfg: PolicyConfig) -> Tensor:
    """Factorized pair scores with positive normalization: (B, n, Mp)."""
    f_out = _mlp(w_vec, params, "actor.f", 2)
    g_unit = normalized_order_keys(o_vec, params, cfg)
    return nn.matmul(f_out, nn.swapaxes(g_unit, -1, -2))


@dataclass
class ActorOutput:
    pair_scores: Tensor  # (B, n, Mp)
    reject_scores: Tensor  # (B, n)
    probs: Tensor  # (B, n, Mp + 1), row softmax with padded orders at 0
    worker_tokens: Tensor  # (B, n, D) contextual
    order_tokens: Tensor  # (B, Mp, D) contextual


def actor_forward(
    batch: BatchedState, params, cfg: PolicyConfig, rng=None, train: bool = False
) -> ActorOutput:
    b, n, mp = batch.batch, batch.n_workers, batch.max_orders
    w_embed, o_embed = encode_state(batch, params, cfg)
    tokens = nn.concat([w_embed, o_embed], axis=1)
    key_mask = np.concatenate([np.ones((b, n), dtype=bool), batch.order_mask], axis=1)
    encoded = attention_encoder(
        tokens, params, "actor", cfg.actor_layers, cfg.actor_heads,
        key_mask, rng=rng, train=train, drop=cfg.dropout,
    )
    w_bar = nn.narrow(encoded, 1, 0, n)
    o_bar = nn.narrow(encoded, 1, n, mp)

    m_scores = pair_utilities(w_bar, o_bar, params, cfg)
    n_scores = nn.reshape(_mlp(w_bar, params, "actor.reject", 2), (b, n))

    logits = nn.concat([m_scores, nn.reshape(n_scores, (b, n, 1))], axis=2)
    col_mask = np.concatenate(
        [batch.order_mask, np.ones((b, 1), dtype=bool)], axis=1
    )[:, None, :]
    probs = nn.masked_softmax(logits, col_mask)
    return ActorOutput(m_scores, n_scores, probs, w_bar, o_bar)


def probability_matrix(out: ActorOutput, batch: BatchedState, sample: int = 0) -> ProbabilityMatrix:
    """Extract one sample's choice matrix, trimmed to its true order count,
    with unavailable rows forced one-hot at reject."""
    m_true = int(batch.order_mask[sample].sum())
    mp = batch.max_orders
    graph_probs = out.probs.data[sample]
    probs = np.concatenate(
        [graph_probs[:, :m_true], graph_probs[:, mp : mp + 1]], axis=1
    )
    available = batch.available[sample].copy()
    probs[~available] = 0.0
    probs[~available, -1] = 1.0
    return ProbabilityMatrix(probs, available)


def stage1_q_scores(batch: BatchedState, params, cfg: PolicyConfig) -> Tensor:
    """Pair Q-values from the branch encoders alone (no attention stack):
    (B, n, Mp)."""
    w_embed, o_embed = encode_state(batch, params, cfg)
    return pair_utilities(w_embed, o_embed, params, cfg)


def stage1_q_matrix(snapshot: StateSnapshot, params, cfg: PolicyConfig) -> QMatrix:
    """Rollout-side Q-matrix for one state; unavailable rows sentineled."""
    batch = batch_states([snapshot])
    with nn.no_grad():
        scores = stage1_q_scores(batch, params, cfg)
    values = scores.data[0][:, : snapshot.n_orders]
    return QMatrix.build(values, snapshot.available)


# ---------------------------------------------------------------------------
# critics


def critic_forward(
    worker_tokens,
    order_tokens,
    actions: list[AssignmentAction],
    order_mask: np.ndarray,
    params,
    cfg: PolicyConfig,
    idx: int,
    rng=None,
    train: bool = False,
) -> Tensor:
    """Score a batch of joint actions against contextual embeddings.

    ``worker_tokens``/``order_tokens`` are (B, n, D)/(B, Mp, D) arrays or
    tensors (gradients are not propagated into them; the critics treat
    actor features as input).  Actions use order-column indices.
    """
    if idx not in (1, 2):
        raise ValueError("critic index must be 1 or 2")
    w_tok = worker_tokens.data if isinstance(worker_tokens, Tensor) else worker_tokens
    o_tok = order_tokens.data if isinstance(order_tokens, Tensor) else order_tokens
    b, n, d = w_tok.shape

    chosen = np.zeros((b, n, d))
    null_mask = np.ones((b, n, 1))
    for s, action in enumerate(actions):
        for w, o in action.pairs:
            if not (0 <= o < o_tok.shape[1]) or not order_mask[s, o]:
                raise ValueError(f"action references padded order column {o}")
            chosen[s, w] = o_tok[s, o]
            null_mask[s, w] = 0.0

    order_part = nn.add(
        Tensor(chosen), nn.mul(Tensor(null_mask), params["critic.null_order"])
    )
    tokens = nn.concat([Tensor(w_tok), order_part], axis=2)
    encoded = attention_encoder(
        tokens, params, f"critic{idx}", cfg.critic_layers, cfg.critic_heads,
        key_mask=None, rng=rng, train=train, drop=cfg.dropout,
    )
    query = params[f"critic{idx}.pool.query"]
    scores = nn.mul(nn.matmul(encoded, nn.reshape(query, (-1, 1))), 1.0 / np.sqrt(cfg.critic_dim))
    weights = nn.masked_softmax(nn.reshape(scores, (b, n)), None)
    pooled = nn.reduce_sum(nn.mul(encoded, nn.reshape(weights, (b, n, 1))), axis=1)
    return nn.reshape(nn.linear(pooled, params, f"critic{idx}.head.l0"), (b,))


# ---------------------------------------------------------------------------
# persistence


_ARCH_KEYS = (
    "embed_dim", "actor_layers", "actor_heads", "critic_dim", "critic_layers",
    "critic_heads", "qk_dim", "head_hidden", "lstm_hidden", "ffn_mult", "capacity",
)


def save_policy(path, params: dict[str, Tensor], cfg: PolicyConfig, extra_meta: dict | None = None) -> None:
    """Persist parameters with the architecture recorded in the header so
    loads can validate shapes up front."""
    meta = {key: getattr(cfg, key) for key in _ARCH_KEYS}
    meta["order_scale"] = list(cfg.order_scale)
    meta["worker_scale"] = list(cfg.worker_scale)
    if extra_meta:
        meta.update(extra_meta)
    nn.save_params(path, params, meta)


def load_policy(path, cfg: PolicyConfig) -> tuple[dict[str, Tensor], dict]:
    """Load parameters, rejecting checkpoints built for another architecture."""
    params, meta = nn.load_params(path)
    for key in _ARCH_KEYS:
        if key in meta and meta[key] != getattr(cfg, key):
            raise ValueError(
                f"checkpoint architecture mismatch: {key}={meta[key]}, expected {getattr(cfg, key)}"
            )
    return params, meta


# ---------------------------------------------------------------------------
# complexity probe


@dataclass(frozen=True)
class ComplexityReport:
    n_workers: int
    n_orders: int
    factorized_evals: int
    pairwise_evals: int
    factorized_seconds: float
    pairwise_seconds: float

    @property
    def eval_ratio(self) -> float:
        return self.pairwise_evals / max(self.factorized_evals, 1)


def qk_complexity_probe(n: int, m: int, trials: int = 3, rng=None) -> ComplexityReport:
    """Measure filling an n x m utility matrix via the factorized heads
    (n + m head evaluations) against a reference pairwise scorer of
    matched width (n * m evaluations)."""
    rng = rng or np.random.default_rng(0)
    cfg = PolicyConfig()
    d = cfg.embed_dim
    params = init_policy_params(rng, cfg)
    pair_net = _mlp_params(rng, "pairwise", [2 * d, cfg.head_hidden, 1])
    w_vec = Tensor(rng.normal(size=(1, n, d)))
    o_vec = Tensor(rng.normal(size=(1, m, d)))

    with nn.no_grad():
        t0 = time.perf_counter()
        for _ in range(trials):
            fact = pair_utilities(w_vec, o_vec, params, cfg)
        t_fact = (time.perf_counter() - t0) / trials

        pairs = np.concatenate(
            [
                np.repeat(w_vec.data[0], m, axis=0),
                np.tile(o_vec.data[0], (n, 1)),
            ],
            axis=1,
        )
        t0 = time.perf_counter()
        for _ in range(trials):
            ref = _mlp(Tensor(pairs), pair_net, "pairwise", 2)
        t_pair = (time.perf_counter() - t0) / trials

    assert fact.data.shape == (1, n, m)
    assert ref.data.reshape(n, m).shape == (n, m)
    return ComplexityReport(
        n_workers=n,
        n_orders=m,
        factorized_evals=n + m,
        pairwise_evals=n * m,
        factorized_seconds=t_fact,
        pairwise_seconds=t_pair,
    )
