"""Dense float64 tensors with tape-based reverse-mode differentiation.

Ops record onto the tape that is active in the current context (see
:class:`Tape`).  Outside any tape, ops run as plain numpy and nothing is
recorded, which is what inference and ensemble forwards use.
"""
from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64
LN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        dims = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {dims}")


class NumericFault(FloatingPointError):
    """Raised when a primitive produces NaN or Inf from its inputs."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: non-finite values in output")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_ACTIVE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("clearlab_tape", default=None)


@dataclass
class Tape:
    """Ordered record of executed primitives.

    Use as a context manager; ops executed inside record themselves here when
    any of their inputs requires a gradient.
    """

    nodes: list[Node] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, root: Tensor, leaves: Sequence[Tensor] | None = None):
        return backward(self, root, leaves)


def active_tape() -> Tape | None:
    return _ACTIVE.get()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], bw) -> Tensor:
    if not np.isfinite(out).all():
        raise NumericFault(op)
    t = Tensor(out)
    tape = _ACTIVE.get()
    if tape is not None and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        tape.nodes.append(Node(op, inputs, t, bw))
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _finish("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _finish("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _finish("mul", ad * bd, (a, b), bw)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    c = math.sqrt(2.0 / math.pi)
    x2 = xd * xd
    t = np.tanh(c * xd * (1.0 + 0.044715 * x2))

    def bw(g):
        dt = (1.0 - t * t) * c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _finish("gelu", 0.5 * xd * (1.0 + t), (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if ad.ndim > 2 and bd.ndim == 2:
                # fold batch dims: one GEMM instead of a batched one + sum
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _finish("matmul", ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` for 2-D ``w``; leading dims of ``x`` are folded into one GEMM."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape[-1] != w.shape[1]:
        raise ShapeError("linear", x.shape, w.shape, b.shape)
    xd, wd = x.data, w.data
    lead = xd.shape[:-1]
    out = (xd.reshape(-1, wd.shape[0]) @ wd).reshape(*lead, wd.shape[1])
    try:
        out = out + b.data
    except ValueError:
        raise ShapeError("linear", x.shape, w.shape, b.shape) from None

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = xd.reshape(-1, wd.shape[0]).T @ g2 if w.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return gx, gw, gb

    return _finish("linear", out, (x, w, b), bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, shape) from None
    return _finish("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError("transpose", x.shape, axes)
    inv = tuple(np.argsort(axes))
    return _finish("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", src, shape) from None
    return _finish("broadcast_to", np.ascontiguousarray(out), (x,),
                   lambda g: (_unbroadcast(g, src),))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    ref = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(ref) or any(
            i != axis % len(ref) and r != o for i, (r, o) in enumerate(zip(ref, other))
        ):
            raise ShapeError("concat", *(t.shape for t in xs))
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _finish("concat", np.concatenate([x.data for x in xs], axis=axis), xs, bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", table.shape, (int(ids.min()), int(ids.max())))
    n, d = table.shape

    def bw(g):
        flat = g.reshape(-1, d)
        gt = np.zeros((n, d))
        np.add.at(gt, ids.reshape(-1), flat)
        return (gt,)

    return _finish("embedding", table.data[ids], (table,), bw)


# ---------------------------------------------------------------------------
# reductions and normalisation


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _finish("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    count = x.size if axis is None else int(np.prod([src[a] for a in np.atleast_1d(axis)]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src).copy(),)

    return _finish("mean", np.mean(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _finish("softmax", y, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then scale and shift.

    ``gamma``/``beta`` broadcast against ``x`` so per-sample biases work.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape[-1] != d or beta.shape[-1] != d:
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        gx = ggam = gbet = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            ggam = _unbroadcast(g * xhat, gamma.shape)
        if beta.requires_grad:
            gbet = _unbroadcast(g, beta.shape)
        return gx, ggam, gbet

    return _finish("layer_norm", xhat * gd + beta.data, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# losses; both return one loss per row


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-row cross-entropy of ``softmax(logits)`` against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError("cross_entropy", logits.shape, (int(labels.min()), int(labels.max())))
    logp = log_softmax_np(logits.data)
    rows = np.arange(labels.size)

    def bw(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * g[:, None],)

    return _finish("cross_entropy", -logp[rows, labels], (logits,), bw)


def soft_cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Per-row ``-sum(target * log softmax(logits))``; the target is a constant."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=DTYPE)
    if target.shape != logits.shape or logits.data.ndim != 2:
        raise ShapeError("soft_cross_entropy", logits.shape, target.shape)
    if (target < 0).any() or np.abs(target.sum(axis=1) - 1.0).max(initial=0.0) > 1e-6:
        raise ValueError("soft_cross_entropy: target rows must be distributions summing to 1")
    logp = log_softmax_np(logits.data)

    def bw(g):
        return ((np.exp(logp) - target) * g[:, None],)

    return _finish("soft_cross_entropy", -(target * logp).sum(axis=1), (logits,), bw)


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, root: Tensor, leaves: Sequence[Tensor] | None = None):
    """Propagate d(root)/d(.) through ``tape`` in reverse order.

    Gradients accumulate into ``.grad`` of every leaf that requires one.  If
    ``leaves`` is given, their gradients are returned in that order, with
    zeros for leaves the graph never touched.
    """
    if root.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    produced = {id(n.output) for n in tape.nodes}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in produced:
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
            else:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
    if leaves is None:
        return None
    return [l.grad if l.grad is not None else np.zeros_like(l.data) for l in leaves]


def numerical_gradient(f: Callable[[], float], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` with respect to ``x.data``."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| scaled by the larger of the two gradients' max magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)
