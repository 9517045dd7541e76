"""Tape-based reverse-mode differentiation over numpy arrays.

Tensors hold float32 data (float64 is accepted so gradient checks can run
with a precise forward pass).  While a :class:`Tape` is active, every op whose
inputs require gradients, directly or through earlier recorded ops, appends a
node holding a backward closure.  :func:`backpropagate` replays the nodes in
reverse order.

Broadcasting is deliberately absent.  Element-wise binary ops need equal
shapes; the two broadcast patterns the networks need are spelled out as
:func:`add_bias` and :func:`add_channels`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not satisfy an op's shape rule."""


class DomainError(ValueError):
    """Operand values fall outside an op's domain."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        # float32 storage; float64 only on explicit request (finite-difference oracles)
        if dtype is None:
            dtype = np.float32
        elif np.dtype(dtype) not in (np.float32, np.float64):
            raise TypeError(f"tensor dtype must be float32 or float64, got {np.dtype(dtype)}")
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable ops.  Use as a context manager."""

    nodes: list[Node] = field(default_factory=list)
    _produced: set[int] = field(default_factory=set, repr=False)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._produced

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._produced.add(id(node.output))

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] = ()) -> None:
        backpropagate(self, loss, wrt)


_ACTIVE: list[Tape] = []


def _emit(op: str, inputs: tuple[Tensor, ...], data: np.ndarray, backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _ACTIVE:
        tape = _ACTIVE[-1]
        if any(tape.tracks(t) for t in inputs):
            tape.record(Node(op, inputs, out, backward))
    return out


def backpropagate(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf with ``requires_grad``.

    Gradients add onto any existing ``grad``.  Tensors listed in ``wrt`` that
    the loss does not depend on receive an all-zero gradient instead of
    staying ``None``.
    """
    if loss.size != 1:
        raise ShapeError(f"backpropagate needs a scalar loss, got shape {loss.shape}")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None:
                continue
            key = id(inp)
            if key in tape._produced:
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
            elif inp.requires_grad:
                gi = gi.astype(inp.data.dtype, copy=False)
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
    # a leaf loss (no recorded op) is its own gradient source
    if id(loss) in pending and loss.requires_grad and id(loss) not in tape._produced:
        loss.grad = pending[id(loss)] if loss.grad is None else loss.grad + pending[id(loss)]
    for t in wrt:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ, {a.shape} vs {b.shape}")


def _need_ndim(op: str, t: Tensor, ndim: int, what: str) -> None:
    if t.data.ndim != ndim:
        raise ShapeError(f"{op}: {what} must be {ndim}-D, got shape {t.shape}")


# ---------------------------------------------------------------------------
# element-wise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    x, y = a.data, b.data
    return _emit("mul", (a, b), x * y, lambda g: (g * y, g * x))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    s = x.data.dtype.type(slope)
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * s)
    return _emit("leaky_relu", (x,), out, lambda g: (np.where(pos, g, g * s),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form cannot overflow
    half = v.dtype.type(0.5)
    return half + half * np.tanh(half * v)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _emit("sigmoid", (x,), s, lambda g: (g * s * (1 - s),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    v = x.data
    return _emit("silu", (x,), v * s, lambda g: (g * (s + v * s * (1 - s)),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", (x,), y, lambda g: (g * (1 - y * y),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    out = np.clip(x.data, lo, hi)
    return _emit("clip", (x,), out, lambda g: (np.where(inside, g, 0).astype(g.dtype),))


# ---------------------------------------------------------------------------
# shape and broadcast helpers


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from None
    return _emit("reshape", (x,), out, lambda g: (g.reshape(src),))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel vector ``b`` (C,) along axis 1 of ``x``."""
    _need_ndim("add_bias", b, 1, "bias")
    if x.data.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: input {x.shape} has no channel axis of size {b.shape[0]}")
    view = (1, -1) + (1,) * (x.data.ndim - 2)
    axes = (0,) + tuple(range(2, x.data.ndim))
    return _emit("add_bias", (x, b), x.data + b.data.reshape(view), lambda g: (g, g.sum(axis=axes)))


def add_channels(x: Tensor, v: Tensor) -> Tensor:
    """Add a per-sample, per-channel vector ``v`` (N, C) to a feature map (N, C, H, W)."""
    _need_ndim("add_channels", x, 4, "feature map")
    _need_ndim("add_channels", v, 2, "vector")
    if x.shape[:2] != v.shape:
        raise ShapeError(f"add_channels: map {x.shape} does not match vector {v.shape} on (N, C)")
    out = x.data + v.data[:, :, None, None]
    return _emit("add_channels", (x, v), out, lambda g: (g, g.sum(axis=(2, 3))))


def concat(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate feature maps along the channel axis."""
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat: no inputs")
    base = xs[0].shape
    for t in xs:
        if t.data.ndim != len(base) or t.shape[:1] != base[:1] or t.shape[2:] != base[2:]:
            raise ShapeError(f"concat: shape {t.shape} incompatible with {base} outside axis 1")
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]
    out = np.concatenate([t.data for t in xs], axis=1)
    return _emit("concat", xs, out, lambda g: tuple(np.split(g, splits, axis=1)))


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by 2 in H and W."""
    _need_ndim("upsample2x", x, 4, "input")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _emit("upsample2x", (x,), out, lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def avgpool2(x: Tensor) -> Tensor:
    _need_ndim("avgpool2", x, 4, "input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2: spatial dims must be even, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def back(g):
        q = g * g.dtype.type(0.25)
        return (np.repeat(np.repeat(q, 2, axis=2), 2, axis=3),)

    return _emit("avgpool2", (x,), out, back)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _need_ndim("matmul", a, 2, "left operand")
    _need_ndim("matmul", b, 2, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    return _emit("matmul", (a, b), x @ y, lambda g: (g @ y.T, x.T @ g))


def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C*kh*kw, ho*wo), one row per (channel, tap)."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + ho, j:j + wo]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _tapwise(xp: np.ndarray, w: np.ndarray, ho: int, wo: int) -> np.ndarray:
    """Correlation as one matmul over all taps followed by shifted sums.

    Moves less memory than im2col when the conv does not widen the channels.
    """
    n, c, hp, wp = xp.shape
    o, _, kh, kw = w.shape
    taps = w.transpose(2, 3, 0, 1).reshape(kh * kw * o, c)
    y = (taps @ xp.reshape(n, c, hp * wp)).reshape(n, kh, kw, o, hp, wp)
    out = y[:, 0, 0, :, :ho, :wo].copy()
    for i in range(kh):
        for j in range(kw):
            if i or j:
                out += y[:, i, j, :, i:i + ho, j:j + wo]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, pad: int | None = None) -> Tensor:
    """Stride-1 2-D cross-correlation with symmetric zero padding.

    ``pad`` defaults to ``(k - 1) // 2`` which keeps H and W for odd kernels.
    """
    _need_ndim("conv2d", x, 4, "input")
    _need_ndim("conv2d", w, 4, "kernel")
    n, c, h, wd = x.shape
    o, ck, kh, kw = w.shape
    if c != ck:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ck}")
    if pad is None:
        pad = (min(kh, kw) - 1) // 2
    if not 0 <= pad <= min(kh, kw) - 1:
        raise ShapeError(f"conv2d: padding {pad} out of range for a {kh}x{kw} kernel")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeError(f"conv2d: {kh}x{kw} kernel larger than padded input {h}x{wd}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {b.shape}, expected ({o},)")
    ho, wo = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    wmat = w.data.reshape(o, -1)
    cols = None
    if o <= c and kh * kw > 1:
        out = _tapwise(xp, w.data, ho, wo)
    else:
        cols = _im2col(xp, kh, kw, ho, wo)
        out = (wmat @ cols).reshape(n, o, ho, wo)
    if b is not None:
        out += b.data[None, :, None, None]

    def back(g):
        nonlocal cols
        if cols is None:
            cols = _im2col(xp, kh, kw, ho, wo)
        gm = g.reshape(n, o, ho * wo)
        gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        dcols = (wmat.T @ gm).reshape(n, c, kh, kw, ho, wo)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, i, j]
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        grads = [np.ascontiguousarray(gx), gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("conv2d", inputs, out, back)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Group normalisation of (N, C, H, W) with per-channel affine parameters.

    Group statistics accumulate in float64; the normalised map stays in the input dtype.
    """
    _need_ndim("group_norm", x, 4, "input")
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: affine shapes {gamma.shape}, {beta.shape}, expected ({c},)")
    dt = x.data.dtype
    xg = x.data.reshape(n, groups, -1)
    mean = xg.mean(axis=2, keepdims=True, dtype=np.float64)
    centered = xg - mean.astype(dt)
    var = np.mean(np.square(centered), axis=2, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = (centered * inv).reshape(n, c, h, w)
    gm, bt = gamma.data[None, :, None, None], beta.data[None, :, None, None]
    out = xhat * gm + bt

    def back(g):
        ggamma = np.einsum("nchw,nchw->c", g, xhat, dtype=np.float64).astype(dt)
        gbeta = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(dt)
        dxhat = (g * gm).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        m1 = dxhat.mean(axis=2, keepdims=True, dtype=np.float64).astype(dt)
        m2 = np.einsum("ngk,ngk->ng", dxhat, xh, dtype=np.float64)[:, :, None] / xh.shape[2]
        dx = inv * (dxhat - m1 - xh * m2.astype(dt))
        return dx.reshape(n, c, h, w), ggamma, gbeta

    return _emit("group_norm", (x, gamma, beta), out, back)


def embedding(table: Tensor, indices) -> Tensor:
    """Rows of ``table`` (V, d) selected by integer ``indices`` (n,)."""
    _need_ndim("embedding", table, 2, "table")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embedding: indices must be 1-D, got shape {idx.shape}")
    v = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise DomainError(f"embedding: index out of range for a table of {v} rows")

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _emit("embedding", (table,), table.data[idx], back)


# ---------------------------------------------------------------------------
# reductions and losses (float64 accumulation)


def sum_all(x: Tensor) -> Tensor:
    dt = x.data.dtype
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=dt)
    return _emit("sum", (x,), out, lambda g: (np.full_like(x.data, g),))


def mean_all(x: Tensor) -> Tensor:
    dt = x.data.dtype
    n = x.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=dt)
    return _emit("mean", (x,), out, lambda g: (np.full_like(x.data, g / n),))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over all elements."""
    _same_shape("mse", a, b)
    if a.size == 0:
        raise ShapeError("mse: empty operands")
    dt = a.data.dtype
    diff = a.data.astype(np.float64) - b.data
    out = np.asarray(np.mean(diff * diff), dtype=dt)

    def back(g):
        ga = (2.0 * float(g) / a.size * diff).astype(dt)
        return ga, -ga

    return _emit("mse", (a, b), out, back)


def bce(p: Tensor, target) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` in the open interval (0, 1)."""
    y = np.broadcast_to(np.asarray(target, dtype=np.float64), p.shape)
    pd = p.data.astype(np.float64)
    if p.size == 0:
        raise ShapeError("bce: empty input")
    if not np.all((pd > 0) & (pd < 1)):
        raise DomainError("bce: probabilities must lie strictly inside (0, 1)")
    out = np.asarray(-np.mean(y * np.log(pd) + (1 - y) * np.log1p(-pd)), dtype=p.data.dtype)

    def back(g):
        return ((float(g) / p.size) * ((pd - y) / (pd * (1 - pd)))).astype(p.data.dtype),

    return _emit("bce", (p,), out, back)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of (N, K) logits against integer labels."""
    _need_ndim("cross_entropy", logits, 2, "logits")
    lab = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if lab.shape != (n,):
        raise ShapeError(f"cross_entropy: {lab.shape[0] if lab.ndim else 0} labels for {n} rows")
    if n and (lab.min() < 0 or lab.max() >= k):
        raise DomainError(f"cross_entropy: label outside [0, {k})")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = np.asarray(-logp[np.arange(n), lab].mean(), dtype=logits.data.dtype)

    def back(g):
        d = np.exp(logp)
        d[np.arange(n), lab] -= 1.0
        return ((float(g) / n) * d).astype(logits.data.dtype),

    return _emit("cross_entropy", (logits,), out, back)


# ---------------------------------------------------------------------------

OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "conv2d": conv2d,
    "upsample2x": upsample2x,
    "avgpool2": avgpool2,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "concat": lambda *xs: concat(xs),
    "leaky_relu": leaky_relu,
    "silu": silu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "clip": clip,
    "group_norm": group_norm,
    "embedding": embedding,
    "add_bias": add_bias,
    "add_channels": add_channels,
    "reshape": reshape,
    "sum": sum_all,
    "mean": mean_all,
    "mse": mse,
    "bce": bce,
    "cross_entropy": cross_entropy,
}


def apply_op(op: str, inputs: Sequence[Tensor], tape: Tape | None = None, **attrs) -> Tensor:
    """Run a named op, recording it on ``tape`` (or the active tape)."""
    try:
        fn = OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}; known ops: {', '.join(sorted(OPS))}") from None
    if tape is None:
        return fn(*inputs, **attrs)
    with tape:
        return fn(*inputs, **attrs)
