"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable op builds a node holding its parents and a closure that
maps the output gradient to input gradients. ``backward`` walks the recorded
graph in reverse topological order. Activation gates (``gelu``, ``relu``) also
register a guided variant which is used when ``mode="guided"``.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "no_grad",
    "backward",
    "guided_backward",
    "grad",
    "finite_diff_check",
    "FiniteDiffReport",
]

_node_ids = itertools.count()
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's algebra."""

    def __init__(self, op: str, *shapes):
        dims = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {dims}")
        self.op = op
        self.shapes = shapes


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _lift(value, like: "Tensor") -> "Tensor":
    if isinstance(value, Tensor):
        return value
    # constants follow the dtype of the tensor they combine with
    return Tensor(value, dtype=like.data.dtype)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    """Dense float array that optionally participates in gradient recording.

    Data is stored as float32 unless ``dtype`` is given explicitly (float64 is
    used by the gradient checkers).
    """

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._guided: Callable | None = None

    @classmethod
    def _from_op(cls, data, parents, backward_fn, op, guided_fn=None) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.node_id = next(_node_ids)
        out.op = op
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward_fn if track else None
        out._guided = guided_fn if track else None
        return out

    # array-like conveniences
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """A trainable leaf tensor. ``requires_grad`` may be switched off to freeze."""

    def __init__(self, data, requires_grad: bool = True, dtype=None):
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a, b) -> Tensor:
    b = _lift(b, a)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape) from None
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub"
    )


def mul(a, b) -> Tensor:
    b = _lift(b, a)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._from_op(out, (a, b), back, "mul")


def div(a, b) -> Tensor:
    b = _lift(b, a)
    try:
        out = a.data / b.data
    except ValueError:
        raise ShapeError("div", a.shape, b.shape) from None
    ad, bd = a.data, b.data

    def back(g):
        return (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        )

    return Tensor._from_op(out, (a, b), back, "div")


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._from_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def maximum(a: Tensor, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)`` against a constant floor."""
    keep = a.data >= floor
    out = np.where(keep, a.data, np.asarray(floor, dtype=a.dtype))
    return Tensor._from_op(out, (a,), lambda g: (g * keep,), "maximum")


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif bd.ndim == 2:
            # shared weight: fold the batch dims into one GEMM
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), back, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(
        a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose"
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, shape) from None
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(src),), "reshape")


def slice_(a: Tensor, index) -> Tensor:
    out = a.data[index]
    src, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(src, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(out, (a,), back, "slice")


def gather(a: Tensor, index: np.ndarray) -> Tensor:
    """Per-sample row gather: ``out[n, k] = a[n, index[n, k]]`` for ``a`` of shape (N, M, ...)."""
    index = np.asarray(index)
    if index.ndim != 2 or index.shape[0] != a.shape[0]:
        raise ShapeError("gather", a.shape, index.shape)
    if index.size and (index.min() < 0 or index.max() >= a.shape[1]):
        raise IndexError(f"gather: index out of range for axis of size {a.shape[1]}")
    rows = np.arange(a.shape[0])[:, None]
    out = a.data[rows, index]
    src, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(src, dtype=dtype)
        np.add.at(full, (rows, index), g)
        return (full,)

    return Tensor._from_op(out, (a,), back, "gather")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tensors, back, "concat")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return Tensor._from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    n = a.data.size if axis is None else np.prod([src[i] for i in np.atleast_1d(axis)])

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, src).copy(),)

    return Tensor._from_op(a.data.mean(axis=axis, keepdims=keepdims), (a,), back, "mean")


# ---------------------------------------------------------------------------
# normalisation and activations


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(out, (a,), back, "softmax")


def logsumexp(a: Tensor) -> Tensor:
    """``log(sum(exp(a)))`` over the last axis; entries equal to -inf are ignored."""
    m = a.data.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(a.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (np.log(s) + m)[..., 0]
    weights = e / s

    def back(g):
        return (g[..., None] * weights,)

    return Tensor._from_op(out, (a,), back, "logsumexp")


def layernorm(a: Tensor, eps: float = 1e-7) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine part)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return Tensor._from_op(xhat, (a,), back, "layernorm")


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale rows of the last axis to unit Euclidean norm."""
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = a.data / denom
    saturated = norm < eps

    def back(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        return (np.where(saturated, g / denom, (g - out * proj) / denom),)

    return Tensor._from_op(out, (a,), back, "l2_normalize")


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _gate(a: Tensor, out: np.ndarray, deriv: np.ndarray, op: str) -> Tensor:
    def back(g):
        return (g * deriv,)

    def guided(g):
        # pass only positive evidence through positive activations
        return (np.where((out > 0) & (g > 0), g * deriv, 0.0).astype(g.dtype),)

    return Tensor._from_op(out, (a,), back, op, guided_fn=guided)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = (x * cdf).astype(x.dtype)
    deriv = (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)).astype(x.dtype)
    return _gate(a, out, deriv, "gelu")


def relu(a: Tensor) -> Tensor:
    x = a.data
    return _gate(a, np.maximum(x, 0), (x > 0).astype(x.dtype), "relu")


# ---------------------------------------------------------------------------
# losses (reductions accumulated in float64)


def mse(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    if a.shape != b.shape:
        raise ShapeError("mse", a.shape, b.shape)
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=a.dtype)

    def back(g):
        ga = (2.0 * g * diff / n).astype(a.dtype)
        return ga, (-ga).astype(b.dtype)

    return Tensor._from_op(out, (a, b), back, "mse")


def cross_entropy_logits(logits: Tensor, target, reduction: str = "mean") -> Tensor:
    """Softmax cross entropy for integer class targets; ``logits`` is (N, C)."""
    target = np.asarray(target, dtype=np.int64)
    if logits.ndim != 2 or target.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy_logits", logits.shape, target.shape)
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(target))
    per_item = lse - z[rows, target]
    n = len(target) if reduction == "mean" else 1
    out = np.asarray(per_item.sum() / n, dtype=logits.dtype)
    probs = np.exp(z - lse[:, None])
    probs[rows, target] -= 1.0

    def back(g):
        return ((g * probs / n).astype(logits.dtype),)

    return Tensor._from_op(out, (logits,), back, "cross_entropy_logits")


# ---------------------------------------------------------------------------
# gradient propagation


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.node_id not in seen:
                stack.append((parent, False))
    return order


def _propagate(loss: Tensor, mode: str) -> tuple[dict[int, np.ndarray], list[Tensor]]:
    if mode not in ("standard", "guided"):
        raise ValueError(f"unknown backward mode {mode!r}")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological_order(loss)
    grads = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.get(node.node_id)
        if g is None or not node._parents:
            continue
        fn = node._guided if mode == "guided" and node._guided is not None else node._backward
        for parent, pg in zip(node._parents, fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg
    return grads, order


def backward(loss: Tensor, mode: str = "standard") -> dict[int, np.ndarray]:
    """Back-propagate a scalar loss.

    Gradients of leaf tensors with ``requires_grad`` are accumulated into their
    ``.grad`` attribute. Returns the full map ``node_id -> gradient`` covering
    every recorded node the loss depends on.
    """
    grads, order = _propagate(loss, mode)
    for node in order:
        if not node._parents and node.requires_grad and node.node_id in grads:
            g = grads[node.node_id]
            node.grad = g.copy() if node.grad is None else node.grad + g
    return grads


def guided_backward(loss: Tensor) -> dict[int, np.ndarray]:
    return backward(loss, mode="guided")


def grad(loss: Tensor, wrt: Iterable[Tensor], mode: str = "standard") -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``wrt`` without touching any ``.grad`` field."""
    grads, _ = _propagate(loss, mode)
    return [
        grads.get(t.node_id, np.zeros_like(t.data)) for t in wrt
    ]


@dataclass
class FiniteDiffReport:
    max_rel_err: float
    passed: bool
    failures: list = field(default_factory=list)


def finite_diff_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-3,
    tol: float = 1e-3,
    floor: float = 1e-6,
) -> FiniteDiffReport:
    """Compare analytic gradients of scalar ``f(*inputs)`` to central differences.

    Inputs are promoted to float64 in place for the duration of the check and
    restored afterwards. The relative error of each entry is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    saved = [(t.data, t.requires_grad) for t in inputs]
    try:
        for t in inputs:
            t.data = t.data.astype(np.float64)
            t.requires_grad = True
        analytic = grad(f(*inputs), inputs)
        worst, failures = 0.0, []
        for k, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            a_flat = np.asarray(analytic[k], dtype=np.float64).reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                with no_grad():
                    up = float(f(*inputs).data)
                flat[i] = orig - h
                with no_grad():
                    down = float(f(*inputs).data)
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                err = abs(a_flat[i] - numeric) / max(abs(a_flat[i]), abs(numeric), floor)
                worst = max(worst, err)
                if err >= tol:
                    failures.append((k, i, float(a_flat[i]), numeric))
        return FiniteDiffReport(max_rel_err=worst, passed=not failures, failures=failures)
    finally:
        for t, (data, flag) in zip(inputs, saved):
            t.data = data
            t.requires_grad = flag
