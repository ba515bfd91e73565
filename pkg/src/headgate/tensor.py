"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every array in this package is a row-major float64 ``Tensor``. Operations
record their inputs and a vector-Jacobian closure on the result node, so a
single backward sweep from a scalar recovers gradients for any subset of
leaves.

Reproducibility contract (gradients are bit-identical across runs):

* each tensor gets a monotonically increasing creation id; parents are
  always created before children, so sorting reachable nodes by creation id
  is a valid topological order;
* backward visits nodes in strictly decreasing creation order and adds each
  node's contributions into its parents in positional-argument order;
* no dict-iteration order ever feeds a floating-point reduction.

Broadcasting follows numpy but is only exercised with the shapes the encoder
needs (elementwise ops, stacked matmul with 2-D weights). There is no GPU
path, no mixed precision, and no sparse storage.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Literal, Optional, Sequence

import numpy as np

from .errors import ShapeError

_NODE_COUNTER = itertools.count()
_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 ndarray plus an optional gradient slot and tape hooks."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_nid")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None
        self._nid = next(_NODE_COUNTER)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _reject_item(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; constants are wrapped as non-grad tensors
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __pow__(self, exponent):
        return pow_const(self, float(exponent))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Optional[Sequence[int]] = None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)


def _reject_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _node(data: np.ndarray, parents: tuple, vjp: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def custom_op(out_data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Build a tape node with a hand-written vector-Jacobian product.

    Used for estimators whose forward and backward deliberately disagree
    (straight-through sampling); vjp(upstream) must return one array or None
    per parent, in order.
    """
    return _node(np.asarray(out_data, dtype=np.float64), tuple(parents), vjp)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _node(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def pow_const(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent

    def vjp(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _node(out, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g / (2.0 * out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(out, (a, b), vjp)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(range(a.ndim))[::-1]
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swap_last2(a: Tensor) -> Tensor:
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.shape).copy(),)

    return _node(out, (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        pieces = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _node(out, tuple(tensors), vjp)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def vjp(g):
        full = np.zeros(a.shape)
        full[sl] = g
        return (full,)

    return _node(a.data[sl], (a,), vjp)


def index_axis(a: Tensor, axis: int, index: int) -> Tensor:
    """Pick one slice along ``axis`` and squeeze it out."""
    sl = [slice(None)] * a.ndim
    sl[axis] = index
    sl = tuple(sl)

    def vjp(g):
        full = np.zeros(a.shape)
        full[sl] = g
        return (full,)

    return _node(a.data[sl], (a,), vjp)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along axis 0; duplicate indices accumulate in backward."""
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), vjp)


# ---------------------------------------------------------------------------
# fused blocks (single tape nodes with hand-derived backward rules)


def layer_norm_lastdim(a: Tensor, eps: float = 1e-5) -> Tensor:
    """(x - mean) / sqrt(var + eps) along the last axis, as one node."""
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = centered * inv

    def vjp(g):
        n = a.shape[-1]
        g_mean = g.mean(axis=-1, keepdims=True)
        proj = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - g_mean - out * proj),)

    return _node(out, (a,), vjp)


_GELU_C = 0.7978845608028654  # sqrt(2 / pi)


def gelu(a: Tensor) -> Tensor:
    """Smooth tanh-form GELU as one node."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def vjp(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        local = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner
        return (g * local,)

    return _node(out, (a,), vjp)


# ---------------------------------------------------------------------------
# stabilized reductions


def softmax_lastdim(a: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by max subtraction."""
    if a.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last axis")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        # Jacobian of softmax: diag(p) - p p^T applied to g
        return ((g - (g * p).sum(axis=-1, keepdims=True)) * p,)

    return _node(p, (a,), vjp)


def logsumexp_lastdim(a: Tensor) -> Tensor:
    """log(sum(exp(x))) along the last axis, max-stabilized; drops that axis."""
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s)).squeeze(-1)
    p = e / s

    def vjp(g):
        return (np.expand_dims(g, -1) * p,)

    return _node(out, (a,), vjp)


def take_lastdim_index(a: Tensor, idx: np.ndarray) -> Tensor:
    """For a [N, C] tensor, pick a[i, idx[i]] for each row i."""
    if a.ndim != 2:
        raise ShapeError(f"take_lastdim_index expects 2-D input, got {a.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def vjp(g):
        full = np.zeros(a.shape)
        np.add.at(full, (rows, idx), g)
        return (full,)

    return _node(a.data[rows, idx], (a,), vjp)


# ---------------------------------------------------------------------------
# parameters and backward


GroupName = Literal["halora", "gate", "frozen"]


@dataclass
class Parameter:
    """A named, grouped leaf tensor.

    Group "frozen" parameters never require gradients and are never moved by
    the optimizer; "halora" and "gate" form the two trainable groups that the
    routed objective updates separately.
    """

    name: str
    value: Tensor
    group: GroupName = "frozen"

    def __post_init__(self):
        if self.group == "frozen":
            self.value.requires_grad = False
        else:
            self.value.requires_grad = True


def _reachable_nodes(output: Tensor) -> list:
    """All grad-requiring tensors reachable from output, ascending creation id."""
    seen = {}
    stack = [output]
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen[id(node)] = node
        stack.extend(node._parents)
    return sorted(seen.values(), key=lambda t: t._nid)


def backward(output: Tensor, seed: Optional[np.ndarray] = None) -> dict:
    """Reverse sweep from ``output``; returns {id(tensor): gradient} for leaves.

    Interior-node gradients are freed as soon as they are consumed. The sweep
    order is decreasing creation id (see module docstring), which makes the
    accumulated float sums reproducible bit for bit.
    """
    grads: dict = {id(output): np.ones(output.shape) if seed is None else np.asarray(seed, dtype=np.float64)}
    if not output.requires_grad:
        return {}
    for node in reversed(_reachable_nodes(output)):
        g = grads.pop(id(node), None) if node._vjp is not None else grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        contributions = node._vjp(g)
        for parent, pg in zip(node._parents, contributions):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    return grads


def reverse_grad(scalar_output: Tensor, params: Iterable[Parameter]) -> dict:
    """Gradient of a scalar w.r.t. each requested parameter.

    Parameters the output does not depend on get an all-zero gradient of the
    right shape; nothing outside the requested set is touched. Also refreshes
    each requested parameter's ``.grad`` slot with a private copy.
    """
    params = list(params)
    if scalar_output.size != 1:
        raise ShapeError(f"reverse_grad needs a scalar output, got shape {scalar_output.shape}")
    leaf_grads = backward(scalar_output)
    out = {}
    for p in params:
        g = leaf_grads.get(id(p.value))
        g = np.zeros(p.value.shape) if g is None else np.array(g, copy=True)
        p.value.grad = g
        out[p.name] = g
    return out
