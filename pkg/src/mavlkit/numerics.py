"""Float64 tensors with explicit per-op backward rules recorded on a tape.

Every primitive computes its forward value with numpy and, when a
:class:`GradTape` is active and an input requires gradients, appends a node
holding the saved inputs and a backward closure. ``GradTape.backward`` replays
the nodes in exact reverse order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class ConfigError(ValueError):
    """Invalid architecture or hyperparameter configuration."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up where finite values are required."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


@dataclass
class TapeOp:
    name: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradTape:
    """Ordered record of primitive ops executed while the tape is active."""

    ops: list[TapeOp] = field(default_factory=list)
    visited: list[int] = field(default_factory=list)

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every recorded tensor."""
        for op in self.ops:
            op.out.grad = None
            for t in op.inputs:
                t.grad = None
        if grad is None:
            if loss.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        loss.grad = np.asarray(grad, dtype=np.float64)
        self.visited = []
        for i in range(len(self.ops) - 1, -1, -1):
            op = self.ops[i]
            g = op.out.grad
            if g is None:
                continue
            self.visited.append(i)
            for t, gi in zip(op.inputs, op.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                t.grad = gi if t.grad is None else t.grad + gi


_TAPES: list[GradTape] = []


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(name: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].ops.append(TapeOp(name, out, inputs, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _record("div", out, (a, b), backward)


def tabs(x: Tensor) -> Tensor:
    return _record("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    return _record("maximum", np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, a.shape),
                              _unbroadcast(g * ~pick_a, b.shape)))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _record("minimum", np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, a.shape),
                              _unbroadcast(g * ~pick_a, b.shape)))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _record("relu", x.data * pos, (x,), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU; smooth everywhere, which keeps finite differences honest."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _record("gelu", out, (x,), backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on raw logits (targets are constants)."""
    z = logits.data
    y = np.asarray(targets, dtype=np.float64)
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return _record("bce_with_logits", out, (logits,), lambda g: (g * (_sigmoid(z) - y),))


# ---------------------------------------------------------------- structural


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _record("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in ts)
    axis = axis % ts[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record("concat", np.concatenate([t.data for t in ts], axis=axis), ts,
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _record("getitem", np.array(out, copy=True), (x,), backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", out, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / float(n))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape[-1]} vs {b.shape[-2]}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", a.data @ b.data, (a, b), backward)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """y[..., j] = sum_k x[..., k] W[k, j] + b[j]."""
    if W.ndim != 2:
        raise ShapeError(f"linear weight must be rank 2, got shape {W.shape}")
    d_in, d_out = W.shape
    if x.shape[-1] != d_in:
        raise ShapeError(f"linear: x has d_in={x.shape[-1]} but W has d_in={d_in}")
    if b is not None and b.shape != (d_out,):
        raise ShapeError(f"linear: b has shape {b.shape}, expected ({d_out},) for d_out={d_out}")
    out = x.data @ W.data
    if b is not None:
        out = out + b.data
    inputs = (x, W) if b is None else (x, W, b)

    def backward(g):
        g2 = g.reshape(-1, d_out)
        gx = g @ W.data.T
        gW = x.data.reshape(-1, d_in).T @ g2
        return (gx, gW) if b is None else (gx, gW, g2.sum(axis=0))

    return _record("linear", out, inputs, backward)


def softmax(v: Tensor, axis: int = -1) -> Tensor:
    if v.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    z = v.data - v.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _record("softmax", s, (v,),
                   lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: feature dim {d} but gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record("layer_norm", out, (x, gamma, beta), backward)


# ---------------------------------------------------------------- attention blocks


def multi_head_attention(q_in: Tensor, k_in: Tensor, v_in: Tensor, p: dict, prefix: str,
                         heads: int, key_mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over the second-to-last axis.

    ``key_mask`` is boolean, broadcastable to ``[..., S_k]``, True where a key is padding.
    """
    d = q_in.shape[-1]
    if d % heads:
        raise ConfigError(f"model width {d} is not divisible by {heads} heads")
    dh = d // heads
    q = linear(q_in, p[prefix + "wq"], p[prefix + "bq"])
    k = linear(k_in, p[prefix + "wk"], p[prefix + "bk"])
    v = linear(v_in, p[prefix + "wv"], p[prefix + "bv"])
    lead = q.shape[:-2]
    sq, sk = q.shape[-2], k.shape[-2]
    nl = len(lead)
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)
    qh = transpose(reshape(q, lead + (sq, heads, dh)), perm)
    kh = transpose(reshape(k, lead + (sk, heads, dh)), tuple(range(nl)) + (nl + 1, nl + 2, nl))
    vh = transpose(reshape(v, lead + (sk, heads, dh)), perm)
    scores = matmul(qh, kh) * (1.0 / math.sqrt(dh))
    if key_mask is not None:
        bias = np.where(key_mask, -1e9, 0.0)
        scores = scores + bias.reshape(bias.shape[:-1] + (1, 1, bias.shape[-1]))
    attn = softmax(scores, axis=-1)
    ctx = transpose(matmul(attn, vh), perm)
    return linear(reshape(ctx, lead + (sq, d)), p[prefix + "wo"], p[prefix + "bo"])


def feed_forward(x: Tensor, p: dict, prefix: str) -> Tensor:
    h = gelu(linear(x, p[prefix + "w1"], p[prefix + "b1"]))
    return linear(h, p[prefix + "w2"], p[prefix + "b2"])


def self_attention_block(tokens: Tensor, p: dict, prefix: str = "", heads: int = 4,
                         pos: Tensor | None = None,
                         key_mask: np.ndarray | None = None) -> Tensor:
    """Pre-norm residual block: x + MHSA(LN(x)), then + MLP(LN(.)).

    ``pos``, when given, is added to the normalized tokens feeding queries and keys.
    """
    h = layer_norm(tokens, p[prefix + "ln1.g"], p[prefix + "ln1.b"])
    qk = h if pos is None else h + pos
    x = tokens + multi_head_attention(qk, qk, h, p, prefix + "attn.", heads, key_mask)
    h = layer_norm(x, p[prefix + "ln2.g"], p[prefix + "ln2.b"])
    return x + feed_forward(h, p, prefix + "mlp.")


# ---------------------------------------------------------------- parameter init


def xavier(rng: np.random.Generator, d_in: int, d_out: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * math.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_in, d_out))


def attention_params(rng: np.random.Generator, d: int, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for n in "qkvo":
        out[f"{prefix}w{n}"] = xavier(rng, d, d)
        out[f"{prefix}b{n}"] = np.zeros(d)
    return out


def block_params(rng: np.random.Generator, d: int, hidden: int, prefix: str = "") -> dict[str, np.ndarray]:
    """Weights for :func:`self_attention_block` under ``prefix``."""
    p = {f"{prefix}ln1.g": np.ones(d), f"{prefix}ln1.b": np.zeros(d)}
    p.update(attention_params(rng, d, prefix + "attn."))
    p[f"{prefix}ln2.g"] = np.ones(d)
    p[f"{prefix}ln2.b"] = np.zeros(d)
    p[f"{prefix}mlp.w1"] = xavier(rng, d, hidden)
    p[f"{prefix}mlp.b1"] = np.zeros(hidden)
    p[f"{prefix}mlp.w2"] = xavier(rng, hidden, d)
    p[f"{prefix}mlp.b2"] = np.zeros(d)
    return p


# ---------------------------------------------------------------- gradient check


def grad_check(op: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0,
               step: float = 1e-5) -> float:
    """Max over all input entries of |analytic - central FD| / max(1, |analytic|).

    Non-scalar outputs are reduced with a fixed random cotangent drawn from ``seed``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError("grad_check inputs must be finite")
    rng = np.random.default_rng(seed)
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with GradTape() as tape:
        out = op(*ts)
        if not np.all(np.isfinite(out.data)):
            raise NonFiniteError("op produced a non-finite output")
        cot = rng.standard_normal(out.shape) if out.data.size != 1 else np.ones(out.shape)
        loss = tsum(out * cot)
    tape.backward(loss)

    def scalar(vals) -> float:
        val = op(*[Tensor(v) for v in vals]).data
        s = float((val * cot).sum())
        if not math.isfinite(s):
            raise NonFiniteError("non-finite value during finite differencing")
        return s

    worst = 0.0
    for i, a in enumerate(arrays):
        analytic = ts[i].grad if ts[i].grad is not None else np.zeros_like(a)
        flat = a.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = scalar(arrays)
            flat[j] = orig - step
            down = scalar(arrays)
            flat[j] = orig
            numeric = (up - down) / (2 * step)
            an = analytic.reshape(-1)[j]
            worst = max(worst, abs(an - numeric) / max(1.0, abs(an)))
    return worst


def grad_check_params(loss_fn: Callable[[], Tensor], params: dict, n_coords: int = 32,
                      seed: int = 0, step: float = 1e-5) -> float:
    """Finite-difference check of a scalar loss on ``n_coords`` random parameter entries.

    ``params`` maps names to Tensors that ``loss_fn`` reads; entries are perturbed in place.
    """
    with GradTape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    grads = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
             for k, t in params.items()}
    rng = np.random.default_rng(seed)
    names = sorted(params)
    worst = 0.0
    for _ in range(n_coords):
        k = names[int(rng.integers(len(names)))]
        flat = params[k].data.reshape(-1)
        j = int(rng.integers(flat.size))
        orig = flat[j]
        flat[j] = orig + step
        up = float(loss_fn().data)
        flat[j] = orig - step
        down = float(loss_fn().data)
        flat[j] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise NonFiniteError("non-finite loss during finite differencing")
        an = grads[k].reshape(-1)[j]
        worst = max(worst, abs(an - (up - down) / (2 * step)) / max(1.0, abs(an)))
    return worst
