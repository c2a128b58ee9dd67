"""Dense tensors with a reverse-mode gradient tape.

Every op computes its forward value with numpy in the precision of its
inputs (float32 or float64). When a :class:`Tape` is active and at least one
input requires a gradient, the op appends a backward closure to the tape.
``Tape.backward`` walks the record in strict reverse order and accumulates
gradients additively per tensor.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

ROPE_BASE = 10000.0

_PRECISIONS = {"f32": np.float32, "f64": np.float64}


class NonFiniteError(ArithmeticError):
    """Raised when an op produces NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, precision: Optional[str] = None, name: str = ""):
        if precision is not None:
            arr = np.asarray(data, dtype=_PRECISIONS[precision])
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def precision(self) -> str:
        return "f64" if self.data.dtype == np.float64 else "f32"

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, precision={self.precision}, requires_grad={self.requires_grad})"


Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of executed ops; use as a context manager."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Backward]] = []
        self.grads: dict[int, np.ndarray] = {}
        self._keep: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    @classmethod
    def active(cls) -> Optional["Tape"]:
        return cls._stack[-1] if cls._stack else None

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Backward) -> None:
        self.records.append((out, inputs, backward))

    def backward(self, out: Tensor, grad: Optional[np.ndarray] = None) -> dict[int, np.ndarray]:
        if grad is None:
            if out.data.size != 1:
                raise ValueError("backward from a non-scalar needs an explicit upstream gradient")
            grad = np.ones_like(out.data)
        grads = {id(out): np.asarray(grad, dtype=out.data.dtype)}
        self._keep = {id(out): out}
        for node, inputs, fn in reversed(self.records):
            g = grads.get(id(node))
            if g is None:
                continue
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                self._keep[key] = t
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        self.grads = grads
        return grads

    def grad(self, t: Tensor) -> np.ndarray:
        g = self.grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward: Backward) -> Tensor:
    _check(data, op)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = Tape.active()
    if needs and tape is not None:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    # Materialize broadcasts and make operands contiguous so every matrix in
    # the batch takes the same kernel path whatever the batch shape is.
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    ad = np.ascontiguousarray(np.broadcast_to(a.data, batch + a.shape[-2:]))
    bd = np.ascontiguousarray(np.broadcast_to(b.data, batch + b.shape[-2:]))
    out = np.matmul(ad, bd)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.ascontiguousarray(np.swapaxes(bd, -1, -2))), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.ascontiguousarray(np.swapaxes(ad, -1, -2)), g), b.shape)
        return ga, gb

    return _emit("matmul", out, (a, b), backward)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w.T`` for a weight stored as (out_features, in_features)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ValueError(f"linear shape mismatch: {x.shape} vs weight {w.shape}")
    # 2-D dot keeps each output column independent of how many rows w has,
    # so a sliced weight reproduces the matching columns of the full one
    x2 = x.data.reshape(-1, x.shape[-1])
    out = np.dot(x2, w.data.T).reshape(x.shape[:-1] + (w.shape[0],))

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gx = g @ w.data
        if w.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x.data.reshape(-1, x.shape[-1])
            gw = g2.T @ x2
        return gx, gw

    return _emit("linear", out, (x, w), backward)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}") from e

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _emit("add", out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}") from e

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _emit("mul", out, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = x.data.dtype.type(c)
    out = x.data * c
    return _emit("scale", out, (x,), lambda g: (g * c,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    half = v.dtype.type(0.5)
    return half + half * np.tanh(half * v)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _emit("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def silu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    out = x.data * s

    def backward(g):
        return (g * (s * (1 + x.data * (1 - s))),)

    return _emit("silu", out, (x,), backward)


def rmsnorm(x: Tensor, w: Tensor, eps: float) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * w`` over the last axis."""
    if eps <= 0:
        raise ValueError("rmsnorm eps must be positive")
    x, w = as_tensor(x), as_tensor(w)
    if w.shape != (x.shape[-1],):
        raise ValueError(f"rmsnorm weight shape {w.shape} does not match {x.shape}")
    d = x.shape[-1]
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True) + x.data.dtype.type(eps)
    r = 1.0 / np.sqrt(ms)
    xhat = x.data * r
    out = xhat * w.data

    def backward(g):
        gx = gw = None
        if w.requires_grad:
            gw = (g * xhat).reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * w.data
            gx = r * (gh - xhat * np.mean(gh * xhat, axis=-1, keepdims=True))
        return gx, gw

    return _emit("rmsnorm", out, (x, w), backward)


def _rope_tables(positions: np.ndarray, dim: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    half = dim // 2
    inv = 1.0 / (base ** (np.arange(half, dtype=np.float64) * 2.0 / dim))
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def _rotate(v: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    half = v.shape[-1] // 2
    v1, v2 = v[..., :half], v[..., half:]
    return np.concatenate([v1 * cos - v2 * sin, v1 * sin + v2 * cos], axis=-1)


def rope_rotate(x: Tensor, positions, base: float = ROPE_BASE) -> Tensor:
    """Rotary embedding on ``x[..., T, d_h]``; pairs are (i, i + d_h/2)."""
    x = as_tensor(x)
    dim = x.shape[-1]
    positions = np.asarray(positions)
    if dim % 2 or positions.shape != (x.shape[-2],):
        raise ValueError(f"rope shape mismatch: {x.shape} with {positions.shape} positions")
    cos, sin = _rope_tables(positions, dim, base, x.data.dtype)
    out = _rotate(x.data, cos, sin)
    return _emit("rope_rotate", out, (x,), lambda g: (_rotate(g, cos, -sin),))


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: tuple) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: tuple) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", out, (x,), lambda g: (np.transpose(g, inv),))


def take(x: Tensor, index) -> Tensor:
    """Basic or fancy indexing with a scatter-add backward."""
    x = as_tensor(x)
    out = np.array(x.data[index])

    def backward(g):
        gx = np.zeros_like(x.data)
        if isinstance(index, slice):
            gx[index] += g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _emit("take", out, (x,), backward)


def scatter(x: Tensor, index, size: int, fill: float = 0.0) -> Tensor:
    """Vector of length ``size`` holding ``x`` at ``index`` and ``fill`` elsewhere."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if x.shape != index.shape or x.data.ndim != 1:
        raise ValueError(f"scatter shape mismatch: {x.shape} vs index {index.shape}")
    out = np.full(size, fill, dtype=x.data.dtype)
    out[index] = x.data
    return _emit("scatter", out, (x,), lambda g: (g[index],))


def embedding(w: Tensor, ids) -> Tensor:
    w = as_tensor(w)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= w.shape[0]):
        raise ValueError("token id out of range")
    out = w.data[ids]

    def backward(g):
        gw = np.zeros_like(w.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, w.shape[1]))
        return (gw,)

    return _emit("embedding", out, (w,), backward)


# ---------------------------------------------------------------------------
# attention and loss
# ---------------------------------------------------------------------------


def causal_softmax(scores: Tensor) -> Tensor:
    """Softmax over the last axis of ``scores[..., T, T]`` with future keys masked."""
    scores = as_tensor(scores)
    t = scores.shape[-1]
    if scores.shape[-2] != t:
        raise ValueError("causal_softmax expects square trailing dims")
    future = np.triu(np.ones((t, t), dtype=bool), k=1)
    z = np.where(future, -np.inf, scores.data)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    prob = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (prob * (g - np.sum(g * prob, axis=-1, keepdims=True)),)

    return _emit("causal_softmax", prob, (scores,), backward)


def softmax_ce(logits: Tensor, targets) -> Tensor:
    """Mean token negative log-likelihood of ``targets`` under ``logits[T, V]``."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ValueError(f"softmax_ce shape mismatch: {logits.shape} vs {targets.shape}")
    n, v = logits.shape
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ValueError("target index out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(n), targets]
    loss = np.asarray(nll.mean(), dtype=logits.data.dtype)

    def backward(g):
        prob = np.exp(z - lse[:, None])
        prob[np.arange(n), targets] -= 1
        return (prob * (g / n),)

    return _emit("softmax_ce", loss, (logits,), backward)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard``; backward passes the gradient to ``soft`` unchanged."""
    soft = as_tensor(soft)
    hard = np.asarray(hard, dtype=soft.data.dtype)
    if hard.shape != soft.shape:
        raise ValueError(f"straight_through shape mismatch: {hard.shape} vs {soft.shape}")
    return _emit("straight_through", hard.copy(), (soft,), lambda g: (g,))


__all__ = [
    "ROPE_BASE",
    "NonFiniteError",
    "Tensor",
    "Tape",
    "add",
    "as_tensor",
    "causal_softmax",
    "embedding",
    "linear",
    "matmul",
    "mul",
    "reshape",
    "rmsnorm",
    "rope_rotate",
    "scatter",
    "scale",
    "sigmoid",
    "silu",
    "softmax_ce",
    "straight_through",
    "take",
    "transpose",
]
