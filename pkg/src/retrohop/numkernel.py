"""Minimal dense numeric engine.

A recorded-tape reverse-mode gradient over a fixed operation vocabulary
(affine, activations, layer normalization, dropout, softmax, elementwise
arithmetic, reductions), AdamW, and a finite-difference gradient
checker.  Parameters are stored in 32-bit precision; all computation
runs in 64-bit after promotion, which doubles as the "64-bit
accumulation" policy for reductions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_SELU_ALPHA = 1.6732632423543772
_SELU_SCALE = 1.0507009873554805


class NonDeterministic(RuntimeError):
    """Two same-seed loss evaluations differed during grad_check."""


# ---------------------------------------------------------------------------
# storage


class Tensor2:
    """Row-major real matrix, float32 storage."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[0] <= 0 or arr.shape[1] <= 0:
            raise ValueError(f"Tensor2 requires a 2-D positive shape, got {arr.shape}")
        self.data = arr

    @property
    def shape(self):
        return self.data.shape

    def check_finite(self):
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError("non-finite values in tensor")


@dataclass
class ParamTensor:
    """Trainable matrix plus gradient and AdamW state."""

    value: Tensor2
    grad: np.ndarray = field(default=None)
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)
    step: int = 0

    def __post_init__(self):
        shape = self.value.shape
        if self.grad is None:
            self.grad = np.zeros(shape, dtype=np.float32)
        if self.m is None:
            self.m = np.zeros(shape, dtype=np.float32)
        if self.v is None:
            self.v = np.zeros(shape, dtype=np.float32)

    def zero_grad(self):
        self.grad[:] = 0.0


def param(array: np.ndarray) -> ParamTensor:
    return ParamTensor(value=Tensor2(array))


# ---------------------------------------------------------------------------
# tape


class Var:
    """Node on the gradient tape; data is float64."""

    __slots__ = ("data", "grad", "parents", "backward_fn")

    def __init__(self, data, parents=(), backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    def backward(self):
        order: list[Var] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        for node in order:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node.backward_fn is not None:
                node.backward_fn(node.grad)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def matmul(a: Var, b: Var) -> Var:
    out = Var(a.data @ b.data, parents=(a, b))

    def bw(g):
        a.grad += g @ b.data.T
        b.grad += a.data.T @ g

    out.backward_fn = bw
    return out


def add(a: Var, b: Var) -> Var:
    out = Var(a.data + b.data, parents=(a, b))

    def bw(g):
        a.grad += _unbroadcast(g, a.data.shape)
        b.grad += _unbroadcast(g, b.data.shape)

    out.backward_fn = bw
    return out


def sub(a: Var, b: Var) -> Var:
    return add(a, scale(b, -1.0))


def mul(a: Var, b: Var) -> Var:
    out = Var(a.data * b.data, parents=(a, b))

    def bw(g):
        a.grad += _unbroadcast(g * b.data, a.data.shape)
        b.grad += _unbroadcast(g * a.data, b.data.shape)

    out.backward_fn = bw
    return out


def scale(a: Var, c: float) -> Var:
    out = Var(a.data * c, parents=(a,))

    def bw(g):
        a.grad += g * c

    out.backward_fn = bw
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def log(a: Var) -> Var:
    out = Var(np.log(a.data), parents=(a,))

    def bw(g):
        a.grad += g / a.data

    out.backward_fn = bw
    return out


def vsum(a: Var, axis=None, keepdims=False) -> Var:
    out = Var(a.data.sum(axis=axis, keepdims=keepdims), parents=(a,))

    def bw(g):
        if axis is None:
            a.grad += g * np.ones_like(a.data)
        else:
            a.grad += np.expand_dims(g, axis) if not keepdims else g

    out.backward_fn = bw
    return out


def vmean(a: Var, axis=None) -> Var:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(vsum(a, axis=axis), 1.0 / n)


def concat_rows(parts: list[Var]) -> Var:
    out = Var(np.concatenate([p.data for p in parts], axis=0), parents=tuple(parts))
    sizes = [p.data.shape[0] for p in parts]

    def bw(g):
        off = 0
        for p, s in zip(parts, sizes):
            p.grad += g[off : off + s]
            off += s

    out.backward_fn = bw
    return out


def slice_rows(a: Var, start: int, stop: int) -> Var:
    out = Var(a.data[start:stop], parents=(a,))

    def bw(g):
        a.grad[start:stop] += g

    out.backward_fn = bw
    return out


# activations -----------------------------------------------------------------


def _act_forward(name: str, x: np.ndarray) -> np.ndarray:
    if name in ("none", "identity", None):
        return x
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    if name == "selu":
        return _SELU_SCALE * np.where(x > 0, x, _SELU_ALPHA * (np.exp(x) - 1.0))
    if name == "gelu":
        # tanh approximation; the derivative below matches it exactly
        return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x**3)))
    raise ValueError(f"unknown activation {name!r}")


def _act_deriv(name: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if name in ("none", "identity", None):
        return np.ones_like(x)
    if name == "relu":
        return (x > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - y * y
    if name == "selu":
        return _SELU_SCALE * np.where(x > 0, 1.0, _SELU_ALPHA * np.exp(x))
    if name == "gelu":
        c = 0.7978845608028654
        inner = c * (x + 0.044715 * x**3)
        t = np.tanh(inner)
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3 * 0.044715 * x**2)
    raise ValueError(f"unknown activation {name!r}")


ACTIVATIONS = ("none", "relu", "selu", "tanh", "gelu")


def activation(a: Var, name: str) -> Var:
    y = _act_forward(name, a.data)
    out = Var(y, parents=(a,))

    def bw(g):
        a.grad += g * _act_deriv(name, a.data, y)

    out.backward_fn = bw
    return out


# layer normalization ---------------------------------------------------------


def layernorm_rows(a: Var, gain: Var | None = None, bias: Var | None = None, eps: float = 1e-5) -> Var:
    """Normalize each row to zero mean, unit variance, then affine."""
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    parents = [a]
    y = xhat
    if gain is not None:
        y = y * gain.data
        parents.append(gain)
    if bias is not None:
        y = y + bias.data
        parents.append(bias)
    out = Var(y, parents=tuple(parents))
    n = a.data.shape[-1]

    def bw(g):
        gx = g * (gain.data if gain is not None else 1.0)
        dx = (
            gx - gx.mean(axis=-1, keepdims=True)
            - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        ) * inv
        a.grad += dx
        if gain is not None:
            gain.grad += _unbroadcast(g * xhat, gain.data.shape)
        if bias is not None:
            bias.grad += _unbroadcast(g, bias.data.shape)

    out.backward_fn = bw
    return out


def layernorm(x: np.ndarray, gain=1.0, bias=0.0, eps: float = 1e-5) -> np.ndarray:
    """Plain 1-D layer normalization (no tape)."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        raise ValueError("layernorm needs length >= 2")
    xhat = (x - x.mean()) / math.sqrt(x.var() + eps)
    return xhat * gain + bias


# dropout ---------------------------------------------------------------------


def dropout_mask(p: float, shape, key: tuple[int, ...]) -> np.ndarray:
    """Inverted-dropout mask from a counter-based generator.

    ``key`` is e.g. (seed, epoch, batch, layer); the same key always
    yields the same mask, which keeps training runs reproducible.
    """
    if p <= 0.0:
        return np.ones(shape, dtype=np.float64)
    # fold the key tuple into Philox's 128-bit key, stably
    acc = 0
    for k in key:
        acc = (acc * 1_000_003 + int(k)) % (1 << 128)
    words = np.array([acc & ((1 << 64) - 1), acc >> 64], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=words))
    keep = rng.random(shape) >= p
    return keep.astype(np.float64) / (1.0 - p)


def dropout(a: Var, p: float, key: tuple[int, ...] | None) -> Var:
    if p <= 0.0 or key is None:
        return a
    mask = dropout_mask(p, a.data.shape, key)
    out = Var(a.data * mask, parents=(a,))

    def bw(g):
        a.grad += g * mask

    out.backward_fn = bw
    return out


# softmax ---------------------------------------------------------------------


def softmax(scores: np.ndarray, beta: float = 1.0) -> np.ndarray:
    """Stable softmax of a vector (or per-column of a matrix on axis 0)."""
    z = beta * np.asarray(scores, dtype=np.float64)
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def softmax_cols(a: Var, beta: float = 1.0) -> Var:
    """Column-wise softmax over axis 0 (rows are classes)."""
    p = softmax(a.data, beta)
    out = Var(p, parents=(a,))

    def bw(g):
        dot = (g * p).sum(axis=0, keepdims=True)
        a.grad += beta * p * (g - dot)

    out.backward_fn = bw
    return out


def logsumexp_cols(a: Var, beta: float = 1.0) -> Var:
    """beta^-1 * log sum exp(beta * column) for each column."""
    z = beta * a.data
    m = z.max(axis=0, keepdims=True)
    lse = (m + np.log(np.exp(z - m).sum(axis=0, keepdims=True))) / beta
    out = Var(lse, parents=(a,))
    p = softmax(a.data, beta)

    def bw(g):
        a.grad += g * p

    out.backward_fn = bw
    return out


def sigmoid(a: Var) -> Var:
    s = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-a.data)),
                 np.exp(a.data) / (1.0 + np.exp(a.data)))
    out = Var(s, parents=(a,))

    def bw(g):
        a.grad += g * s * (1.0 - s)

    out.backward_fn = bw
    return out


def bce_with_logits(logits: Var, targets: np.ndarray) -> Var:
    """Mean binary cross-entropy over all entries, fused for stability."""
    x, y = logits.data, np.asarray(targets, dtype=np.float64)
    loss = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    out = Var(loss.mean(), parents=(logits,))
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))

    def bw(g):
        logits.grad += g * (s - y) / x.size

    out.backward_fn = bw
    return out


# ---------------------------------------------------------------------------
# optimizer


def adamw_step(
    params: list[ParamTensor],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 1e-2,
):
    """One decoupled-weight-decay Adam update on every parameter."""
    b1, b2 = betas
    for p in params:
        p.step += 1
        g = p.grad
        p.m[:] = b1 * p.m + (1 - b1) * g
        p.v[:] = b2 * p.v + (1 - b2) * g * g
        mhat = p.m / (1 - b1**p.step)
        vhat = p.v / (1 - b2**p.step)
        val = p.value.data.astype(np.float64)
        val *= 1.0 - lr * weight_decay
        val -= lr * mhat.astype(np.float64) / (np.sqrt(vhat.astype(np.float64)) + eps)
        p.value.data[:] = val.astype(np.float32)


# ---------------------------------------------------------------------------
# verification


def grad_check(
    loss_closure,
    params: dict[str, ParamTensor],
    h: float = 1e-3,
    max_coords_per_param: int = 12,
    seed: int = 0,
) -> float:
    """Max relative error of analytic vs central-finite-difference grads.

    ``loss_closure()`` must evaluate the loss deterministically, fill
    every parameter's ``grad``, and return the scalar loss.  Coordinates
    are subsampled per parameter; differences are taken on the actual
    (32-bit-rounded) perturbed values promoted to 64-bit.
    """
    l1 = loss_closure()
    analytic = {name: p.grad.copy() for name, p in params.items()}
    l2 = loss_closure()
    if l1 != l2:
        raise NonDeterministic(f"loss not reproducible: {l1} vs {l2}")

    rng = np.random.Generator(np.random.Philox(key=seed))
    worst = 0.0
    for name, p in params.items():
        flat = p.value.data.reshape(-1)
        n = flat.size
        coords = rng.choice(n, size=min(n, max_coords_per_param), replace=False)
        for c in coords:
            orig = flat[c]
            hi = np.float32(orig + h)
            lo = np.float32(orig - h)
            flat[c] = hi
            f_hi = loss_closure()
            flat[c] = lo
            f_lo = loss_closure()
            flat[c] = orig
            denom = float(hi) - float(lo)
            fd = (f_hi - f_lo) / denom
            an = float(analytic[name].reshape(-1)[c])
            scale_ = max(abs(fd), abs(an), 1e-8)
            worst = max(worst, abs(fd - an) / scale_)
    # restore gradients from the unperturbed evaluation
    loss_closure()
    return worst
