"""Reverse-mode automatic differentiation on numpy arrays.

Tensors are float32 by default; tests that need tight finite-difference
agreement switch the whole engine to float64 via `set_default_dtype` or the
`using_dtype` context manager. Ops record onto a thread-local tape in
execution order (already a topological order), and `backward` walks it in
reverse exactly once, then clears it.

Broadcasting is deliberately restricted: a binary op accepts operands of
identical shape, or one operand whose shape is a trailing suffix of the
other's (broadcast along leading batch dims only). Anything else is a
ShapeError; reshape explicitly instead.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: non-conforming shapes {' vs '.join(str(tuple(s)) for s in shapes)}")
        self.op = op
        self.shapes = shapes


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.dtype = np.float32
        self.recording = True


def default_dtype():
    return _state.dtype


def set_default_dtype(dtype) -> None:
    """Switch the engine between float32 (training) and float64 (grad checks)."""
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state.dtype = dtype


class using_dtype:
    """Context manager version of set_default_dtype."""

    def __init__(self, dtype):
        self.dtype = dtype

    def __enter__(self):
        self.prev = _state.dtype
        set_default_dtype(self.dtype)
        return self

    def __exit__(self, *exc):
        _state.dtype = self.prev
        return False


class _Node:
    __slots__ = ("out", "parents", "vjps")

    def __init__(self, out: "Tensor", parents: tuple, vjps: tuple):
        self.out = out
        self.parents = parents
        self.vjps = vjps


class Tape:
    """Ordered record of differentiable ops, confined to one thread."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def record(self, out: "Tensor", parents: Sequence["Tensor"], vjps: Sequence[Callable]):
        if not _state.recording:
            return
        kept = [(p, v) for p, v in zip(parents, vjps) if p.requires_grad]
        if kept:
            out.requires_grad = True
            self.nodes.append(_Node(out, tuple(p for p, _ in kept), tuple(v for _, v in kept)))

    def clear(self):
        self.nodes.clear()


_state = _State()


def tape() -> Tape:
    return _state.tape


class Tensor:
    """N-dimensional differentiable array (row-major numpy storage)."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        dt = dtype or _state.dtype
        arr = np.asarray(data, dtype=dt)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _suffix_broadcastable(sa: tuple, sb: tuple) -> bool:
    """True if sb equals the trailing dims of sa (or vice versa)."""
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    return big[len(big) - len(small):] == small


def _check_elementwise(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape and not _suffix_broadcastable(a.shape, b.shape):
        raise ShapeError(op, a.shape, b.shape)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient broadcast along leading dims back to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra)))


def _make(data: np.ndarray, parents: Sequence[Tensor], vjps: Sequence[Callable]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    _state.tape.record(out, parents, vjps)
    return out


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_elementwise("add", a, b)
    return _make(a.data + b.data, (a, b),
                 (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)))


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_elementwise("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 (lambda g: _unbroadcast(g, a.shape), lambda g: -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_elementwise("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 (lambda g: _unbroadcast(g * b.data, a.shape),
                  lambda g: _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_elementwise("div", a, b)
    return _make(a.data / b.data, (a, b),
                 (lambda g: _unbroadcast(g / b.data, a.shape),
                  lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), (lambda g: -g,))


def pow_(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    return _make(out, (a,), (lambda g: g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), (lambda g: g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), (lambda g: g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), (lambda g: g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), (lambda g: g * (1.0 - out * out),))


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    return _make(a.data * sig, (a,),
                 (lambda g: g * (sig * (1.0 + a.data * (1.0 - sig))),))


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation GELU."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)

    return _make(0.5 * x * (1.0 + t), (a,), (vjp,))


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size and -1 not in shape:
        raise ShapeError("reshape", a.shape, shape)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), (lambda g: g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), (lambda g: g.transpose(inv),))


def swap_last(a: Tensor) -> Tensor:
    """Swap the trailing two axes (matrix transpose for stacks of matrices)."""
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * data.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return _make(data, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))))


def slice_(a: Tensor, key) -> Tensor:
    out = a.data[key]
    shape = a.shape

    def vjp(g):
        buf = np.zeros(shape, dtype=g.dtype)
        buf[key] = g
        return buf

    return _make(np.ascontiguousarray(out), (a,), (vjp,))


def gather(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Index-select along `axis`; backward scatter-adds into the source."""
    idx = np.asarray(indices)
    out = np.take(a.data, idx, axis=axis)
    shape = a.shape

    def vjp(g):
        buf = np.zeros(shape, dtype=g.dtype)
        np.add.at(buf, (slice(None),) * axis + (idx,), g)
        return buf

    return _make(out, (a,), (vjp,))


def scatter_add(base: Tensor, indices, values: Tensor, axis: int = 0) -> Tensor:
    """base with values added at `indices` along `axis` (out-of-place)."""
    idx = np.asarray(indices)
    expect = base.shape[:axis] + idx.shape + base.shape[axis + 1:]
    if values.shape != expect:
        raise ShapeError("scatter_add", values.shape, expect)
    out = base.data.copy()
    np.add.at(out, (slice(None),) * axis + (idx,), values.data)
    key = (slice(None),) * axis + (idx,)
    return _make(out, (base, values), (lambda g: g, lambda g: g[key]))


# ---------------------------------------------------------------------------
# reductions and matmul
# ---------------------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy() if g.shape != shape else g

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), (vjp,))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    n = a.size if axis is None else shape[axis]

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g / n, shape).copy()

    return _make(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), (vjp,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dims broadcast per numpy.matmul (rank >= 2)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = np.matmul(a.data, b.data)

    def vjp_a(g):
        return _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)

    def vjp_b(g):
        return _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)

    return _make(out, (a, b), (vjp_a, vjp_b))


# ---------------------------------------------------------------------------
# fused neural-net ops
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return _make(out, (a,), (vjp,))


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)

    def vjp(g):
        return np.expand_dims(g, axis) * (e / s)

    return _make(out, (a,), (vjp,))


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """RMS-normalize the last axis, then scale by `gain` (suffix-broadcast)."""
    if gain.shape != x.shape[-len(gain.shape):]:
        raise ShapeError("rmsnorm", x.shape, gain.shape)
    n = x.shape[-1]
    s = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    z = x.data * s

    def vjp_x(g):
        dz = g * gain.data
        return s * (dz - x.data * (s * s / n) * (x.data * dz).sum(axis=-1, keepdims=True))

    def vjp_gain(g):
        return _unbroadcast(g * z, gain.shape)

    return _make(z * gain.data, (x, gain), (vjp_x, vjp_gain))


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """LayerNorm over the last axis with affine parameters."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError("layernorm", x.shape, gain.shape)
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def vjp_x(g):
        dxhat = g * gain.data
        return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))

    def vjp_gain(g):
        return (g * xhat).reshape(-1, n).sum(axis=0)

    def vjp_bias(g):
        return g.reshape(-1, n).sum(axis=0)

    return _make(xhat * gain.data + bias.data, (x, gain, bias), (vjp_x, vjp_gain, vjp_bias))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood over rows; logits (N, V), targets (N,).

    Raises on target ids outside [0, V).
    """
    t = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or t.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, t.shape)
    v = logits.shape[1]
    if t.size and (t.min() < 0 or t.max() >= v):
        raise ValueError(f"cross_entropy: target id out of range [0, {v})")
    n = logits.shape[0]
    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    z = e.sum(axis=1, keepdims=True)
    logp = logits.data - m - np.log(z)
    loss = -logp[np.arange(n), t].mean()

    def vjp(g):
        p = e / z
        p[np.arange(n), t] -= 1.0
        return g * p / n

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), (vjp,))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if a.shape != b.shape:
        raise ShapeError("mse", a.shape, b.shape)
    d = a.data - b.data
    n = a.size

    def vjp_a(g):
        return g * 2.0 * d / n

    def vjp_b(g):
        return g * (-2.0) * d / n

    return _make(np.asarray((d * d).mean(), dtype=a.dtype), (a, b), (vjp_a, vjp_b))


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Cosine of the angle between `a` and `b` along `axis`.

    Raises on a zero-norm operand (degenerate cosine).
    """
    if a.shape != b.shape:
        raise ShapeError("cosine_similarity", a.shape, b.shape)
    na = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=axis, keepdims=True))
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("cosine_similarity: zero-norm input")
    dot = (a.data * b.data).sum(axis=axis, keepdims=True)
    c = dot / (na * nb)

    def vjp_a(g):
        g = np.expand_dims(g, axis) if g.ndim < a.ndim else g
        return g * (b.data / (na * nb) - c * a.data / (na * na))

    def vjp_b(g):
        g = np.expand_dims(g, axis) if g.ndim < a.ndim else g
        return g * (a.data / (na * nb) - c * b.data / (nb * nb))

    return _make(np.squeeze(c, axis=axis), (a, b), (vjp_a, vjp_b))


def rotate_half(a: Tensor) -> Tensor:
    """[x1, x2] -> [-x2, x1] on the last axis (rotary-embedding helper)."""
    h = a.shape[-1] // 2
    out = np.concatenate([-a.data[..., h:], a.data[..., :h]], axis=-1)

    def vjp(g):
        return np.concatenate([g[..., h:], -g[..., :h]], axis=-1)

    return _make(out, (a,), (vjp,))


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, mask_bias=None) -> Tensor:
    """softmax(q kᵀ / sqrt(d) + mask_bias) v over the trailing two axes.

    `mask_bias` is an additive constant array (0 where attended, large
    negative where blocked).
    """
    d = q.shape[-1]
    scores = mul(matmul(q, swap_last(k)), 1.0 / math.sqrt(d))
    if mask_bias is not None:
        scores = add(scores, Tensor(np.asarray(mask_bias, dtype=scores.dtype)))
    return matmul(softmax(scores, axis=-1), v)


def stop_gradient(a: Tensor) -> Tensor:
    """Forward identity; contributes zero gradient to everything upstream."""
    return Tensor(a.data, requires_grad=False, dtype=a.dtype)


class no_grad:
    """Suspend tape recording (inference/eval forwards)."""

    def __enter__(self):
        self.prev = _state.recording
        _state.recording = False
        return self

    def __exit__(self, *exc):
        _state.recording = self.prev
        return False


# ---------------------------------------------------------------------------
# backward and parameter updates
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss through the recorded tape, then clear it."""
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    tp = _state.tape
    if not tp.nodes:
        raise RuntimeError("backward: tape is empty")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tp.nodes):
        g = node.out.grad
        if g is None:
            continue
        for t, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            if t.grad is None:
                t.grad = np.array(contrib, dtype=t.dtype, copy=True)
            else:
                t.grad += contrib
    tp.clear()


def ema_update(target: Iterable[Tensor], online: Iterable[Tensor], momentum: float) -> None:
    """target <- m * target + (1 - m) * online, element-wise, off-tape."""
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"ema_update: momentum {momentum} outside [0, 1)")
    target = list(target)
    online = list(online)
    if len(target) != len(online):
        raise ShapeError("ema_update", (len(target),), (len(online),))
    for t, o in zip(target, online):
        if t.shape != o.shape:
            raise ShapeError("ema_update", t.shape, o.shape)
        t.data *= momentum
        t.data += (1.0 - momentum) * o.data
