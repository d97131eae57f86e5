"""Minimal reverse-mode automatic differentiation on 64-bit numpy arrays.

A ``Tensor`` wraps an ndarray and records the primitive that produced
it; calling ``backward()`` on a scalar output replays the implicit tape
in reverse topological order.  Everything is float64: desk-scale model
sizes make precision cheap and keep finite-difference checks strict.

Gradient tracking can be suspended with ``no_grad()`` for rollout and
target computations, in which case primitives return plain constant
tensors and no graph is built.
"""

from __future__ import annotations

import json
import math
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from .errors import DeterminismError, NumericError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Suspend graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """An ndarray plus the bookkeeping needed for the reverse pass."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        if self.data.dtype != np.float64:
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def backward(self, output_grad=None) -> None:
        """Reverse pass from this node.  Scalar outputs seed with 1; other
        shapes require an explicit output gradient."""
        if output_grad is None:
            if self.data.size != 1:
                raise ValueError("backward on a non-scalar needs an output gradient")
            output_grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ValueError("backward called on a tensor outside the recorded graph")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = _accumulate(self.grad, np.asarray(output_grad, dtype=np.float64))
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def _accumulate(current, extra):
    return extra if current is None else current + extra


def _ensure(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Build an output node, recording the graph only when needed."""
    if not _GRAD_ENABLED or not any(p.requires_grad for p in parents):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    out._parents = parents
    out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic primitives


def add(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.grad = _accumulate(a.grad, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.grad = _accumulate(b.grad, _unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.grad = _accumulate(a.grad, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.grad = _accumulate(b.grad, _unbroadcast(-g, b.data.shape))

    return _node(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.grad = _accumulate(a.grad, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.grad = _accumulate(b.grad, _unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a.grad = _accumulate(a.grad, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.grad = _accumulate(
                b.grad, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
            )

    return _node(out_data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2) if b.data.ndim > 1 else np.outer(g, b.data)
            a.grad = _accumulate(a.grad, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g if a.data.ndim > 1 else np.outer(a.data, g)
            b.grad = _accumulate(b.grad, _unbroadcast(gb, b.data.shape))

    return _node(out_data, (a, b), backward)


def pow_const(a, exponent: float) -> Tensor:
    a = _ensure(a)
    out_data = a.data**exponent

    def backward(g):
        if a.requires_grad:
            a.grad = _accumulate(a.grad, g * exponent * a.data ** (exponent - 1.0))

    return _node(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def exp(a) -> Tensor:
    a = _ensure(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a.grad = _accumulate(a.grad, g * out_data)

    return _node(out_data, (a,), backward)


def log(a) -> Tensor:
    a = _ensure(a)
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a.grad = _accumulate(a.grad, g / a.data)

    return _node(out_data, (a,), backward)


def tanh(a) -> Tensor:
    a = _ensure(a)
    out_data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a.grad = _accumulate(a.grad, g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _ensure(a)
    out_data = expit(a.data)

    def backward(g):
        if a.requires_grad:
            a.grad = _accumulate(a.grad, g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), backward)


def relu(a) -> Tensor:
    a = _ensure(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a.grad = _accumulate(a.grad, g * (a.data > 0.0))

    return _node(out_data, (a,), backward)


def softplus(a) -> Tensor:
    a = _ensure(a)
    out_data = np.logaddexp(0.0, a.data)

    def backward(g):
        if a.requires_grad:
            a.grad = _accumulate(a.grad, g * expit(a.data))

    return _node(out_data, (a,), backward)


def clip_min(a, floor: float) -> Tensor:
    """max(a, floor); clipped positions get zero gradient."""
    a = _ensure(a)
    out_data = np.maximum(a.data, floor)

    def backward(g):
        if a.requires_grad:
            a.grad = _accumulate(a.grad, g * (a.data > floor))

    return _node(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# shape and reduction primitives


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _ensure(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.grad = _accumulate(a.grad, np.broadcast_to(g, a.data.shape).copy())

    return _node(out_data, (a,), backward)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _ensure(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    scale = a.data.size / out_data.size

    def backward(g):
        if not a.requires_grad:
            return
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.grad = _accumulate(a.grad, np.broadcast_to(g, a.data.shape) / scale)

    return _node(out_data, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _ensure(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a.grad = _accumulate(a.grad, g.reshape(a.data.shape))

    return _node(out_data, (a,), backward)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _ensure(a)
    out_data = np.swapaxes(a.data, ax1, ax2)

    def backward(g):
        if a.requires_grad:
            a.grad = _accumulate(a.grad, np.swapaxes(g, ax1, ax2))

    return _node(out_data, (a,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_ensure(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        parts = np.split(g, splits, axis=axis)
        for t, part in zip(tensors, parts):
            if t.requires_grad:
                t.grad = _accumulate(t.grad, part)

    return _node(out_data, tuple(tensors), backward)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = _ensure(a)
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out_data = a.data[index]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[index] = g
            a.grad = _accumulate(a.grad, full)

    return _node(out_data, (a,), backward)


def take_pairs(a, rows, cols) -> Tensor:
    """Gather a[rows[k], cols[k]] into a vector (2-D input)."""
    a = _ensure(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out_data = a.data[rows, cols]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, (rows, cols), g)
            a.grad = _accumulate(a.grad, full)

    return _node(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# structured primitives


def masked_softmax(a, mask=None, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` restricted to positions where ``mask`` is
    True; masked positions produce exactly 0 (and zero gradient).  Rows
    with no valid position come out all-zero."""
    a = _ensure(a)
    x = a.data
    if mask is None:
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)
    else:
        mask_arr = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        guarded = np.where(mask_arr, x, -np.inf)
        row_max = guarded.max(axis=axis, keepdims=True)
        row_max = np.where(np.isfinite(row_max), row_max, 0.0)
        e = np.exp(x - row_max) * mask_arr
        denom = e.sum(axis=axis, keepdims=True)
        out_data = e / np.where(denom == 0.0, 1.0, denom)

    def backward(g):
        if a.requires_grad:
            # same Jacobian as plain softmax; zero rows stay zero
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a.grad = _accumulate(a.grad, out_data * (g - dot))

    return _node(out_data, (a,), backward)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (pre-affine;
    compose gain and bias outside)."""
    a = _ensure(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out_data = centered * inv

    def backward(g):
        if a.requires_grad:
            g_mean = g.mean(axis=-1, keepdims=True)
            proj = (g * out_data).mean(axis=-1, keepdims=True)
            a.grad = _accumulate(a.grad, inv * (g - g_mean - out_data * proj))

    return _node(out_data, (a,), backward)


def dropout(a, rate: float, rng, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate is 0."""
    if not training or rate == 0.0:
        return _ensure(a)
    a = _ensure(a)
    keep = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    out_data = a.data * keep

    def backward(g):
        if a.requires_grad:
            a.grad = _accumulate(a.grad, g * keep)

    return _node(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# parameter helpers


def uniform_init(rng, shape, fan_in: int) -> np.ndarray:
    """Uniform fan-in scaled initialization: +/- sqrt(1 / fan_in)."""
    bound = math.sqrt(1.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, shape)


def linear_params(rng, prefix: str, n_in: int, n_out: int) -> dict[str, Tensor]:
    return {
        f"{prefix}.w": Tensor(uniform_init(rng, (n_in, n_out), n_in), requires_grad=True),
        f"{prefix}.b": Tensor(uniform_init(rng, (n_out,), n_in), requires_grad=True),
    }


def linear(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    return add(matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def grads_of(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients after a backward pass; parameters the loss never touched
    get explicit zeros."""
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }


def clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {name: Tensor(p.data.copy(), requires_grad=p.requires_grad) for name, p in params.items()}


def soft_update(params: dict[str, Tensor], target: dict[str, Tensor], tau: float) -> None:
    """In-place convex combination: target <- tau * online + (1 - tau) * target."""
    if params.keys() != target.keys():
        raise ValueError("parameter sets do not match")
    for name, p in params.items():
        t = target[name]
        if t.data.shape != p.data.shape:
            raise ValueError(f"shape mismatch for {name}")
        t.data = tau * p.data + (1.0 - tau) * t.data


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction and a per-episode exponential lr decay."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        lr_decay: float = 0.99,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.lr_decay = lr_decay
        self.steps = 0
        self._m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        grads = grads_of(self.params)
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in {name}")
        self.steps += 1
        correct1 = 1.0 - self.beta1**self.steps
        correct2 = 1.0 - self.beta2**self.steps
        for name, p in self.params.items():
            g = grads[name]
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / correct1) / (np.sqrt(v / correct2) + self.eps)

    def zero_grad(self) -> None:
        zero_grads(self.params)

    def decay_lr(self) -> None:
        self.lr *= self.lr_decay


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    loss_fn,
    params: dict[str, Tensor],
    h: float = 1e-5,
    rng=None,
    max_per_param: int | None = None,
) -> float:
    """Max relative error between backward() gradients and central finite
    differences of ``loss_fn`` (which must rebuild its graph per call and
    be deterministic, so dropout off).

    Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-6).
    ``max_per_param`` samples that many coordinates per parameter (with
    ``rng``) instead of sweeping all of them.
    """
    probe_a = float(loss_fn().data)
    probe_b = float(loss_fn().data)
    if probe_a != probe_b:
        raise DeterminismError("loss function is not deterministic (dropout enabled?)")

    zero_grads(params)
    loss = loss_fn()
    loss.backward()
    analytic = {name: g.copy() for name, g in grads_of(params).items()}
    zero_grads(params)

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        count = flat.size
        if max_per_param is not None and count > max_per_param:
            if rng is None:
                raise ValueError("sampling coordinates requires an rng")
            coords = rng.choice(count, size=max_per_param, replace=False)
        else:
            coords = range(count)
        ana_flat = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            down = float(loss_fn().data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            rel = abs(ana_flat[i] - numeric) / max(abs(ana_flat[i]), abs(numeric), 1e-6)
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# checkpoint container


CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Single-file container: one JSON header line (names, shapes, dtype,
    format version, free-form meta) followed by raw little-endian float64
    array bytes in header order.  Round-trips bit-exactly."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "dtype": "<f8",
        "meta": meta or {},
        "arrays": [
            {"name": name, "shape": list(np.asarray(a).shape)} for name, a in arrays.items()
        ],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version: {header.get('format_version')}")
        if header.get("dtype") != "<f8":
            raise ValueError("checkpoint must hold little-endian float64 arrays")
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"truncated checkpoint while reading {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return arrays, header["meta"]


def save_params(path, params: dict[str, Tensor], meta: dict | None = None) -> None:
    save_checkpoint(path, {name: p.data for name, p in params.items()}, meta)


def load_params(path) -> tuple[dict[str, Tensor], dict]:
    arrays, meta = load_checkpoint(path)
    return {name: Tensor(a, requires_grad=True) for name, a in arrays.items()}, meta
