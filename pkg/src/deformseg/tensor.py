"""Dense tensor with reverse-mode automatic differentiation.

A Tensor wraps a numpy array plus optional gradient linkage.  Every
operation that consumes tensors with ``requires_grad`` records a backward
closure; :func:`backward` runs the closures in reverse topological order
and accumulates ``grad`` on every reachable tensor that asked for it
(sum over all paths).  Tensors are treated as immutable after creation;
only the optimizer writes ``data`` in place, between graph builds.

The canonical 4-D layout everywhere in this package is
(batch, channel, height, width), row-major.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import NumericalError

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True
_DEBUG_CHECKS = False


def set_default_dtype(dtype):
    """Set the global compute dtype (float32 for training, float64 for checks)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported compute dtype {dt}")
    _DEFAULT_DTYPE = dt


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def using_dtype(dtype):
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def set_debug_checks(enabled: bool):
    """When enabled, every op output is checked for NaN/Inf."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation passes)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=_DEFAULT_DTYPE if dtype is None else dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite_check(arr, op):
    if _DEBUG_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values produced by op '{op}'")


def _node(data, parents, backward_fn, op):
    """Create an op output; prune the graph when grads are off or unneeded."""
    _finite_check(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out.op = op
    out.requires_grad = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor):
    """Reverse-mode sweep from a scalar loss; grads land on requires_grad tensors."""
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise NumericalError("backward called on a non-finite loss")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor with requires_grad")

    # Iterative DFS: topological order plus cycle detection via an on-stack set.
    topo = []
    visited = set()
    on_stack = set()
    stack = [(loss, iter(loss._parents))]
    visited.add(id(loss))
    on_stack.add(id(loss))
    while stack:
        node, it = stack[-1]
        child = next(it, None)
        if child is None:
            stack.pop()
            on_stack.discard(id(node))
            topo.append(node)
            continue
        cid = id(child)
        if cid in on_stack:
            raise ValueError("cycle detected in computation graph")
        if cid not in visited and child.requires_grad:
            visited.add(cid)
            on_stack.add(cid)
            stack.append((child, iter(child._parents)))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- elementwise arithmetic ---------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _node(data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(data, (a, b), bw, "div")


def power(a, p):
    """Elementwise a**p for a constant exponent p."""
    a = as_tensor(a)
    p = float(p)
    data = a.data ** p

    def bw(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _node(data, (a,), bw, "power")


def log(a):
    a = as_tensor(a)
    data = np.log(a.data)

    def bw(g):
        _accum(a, g / a.data)

    return _node(data, (a,), bw, "log")


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)

    def bw(g):
        _accum(a, g * data)

    return _node(data, (a,), bw, "exp")


def absolute(a):
    """|a|; subgradient 0 at exactly 0."""
    a = as_tensor(a)
    data = np.abs(a.data)

    def bw(g):
        _accum(a, g * np.sign(a.data))

    return _node(data, (a,), bw, "abs")


def clamp(a, lo, hi):
    """Clip to [lo, hi]; gradient is zero outside the open interval."""
    a = as_tensor(a)
    data = np.clip(a.data, lo, hi)

    def bw(g):
        inside = (a.data > lo) & (a.data < hi)
        _accum(a, g * inside)

    return _node(data, (a,), bw, "clamp")


def relu(a):
    a = as_tensor(a)
    data = np.maximum(a.data, 0)

    def bw(g):
        _accum(a, g * (a.data > 0))

    return _node(data, (a,), bw, "relu")


def sigmoid(a):
    a = as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        _accum(a, g * data * (1.0 - data))

    return _node(data, (a,), bw, "sigmoid")


def softmax(a, axis=1):
    """Numerically stable softmax; default axis is the channel axis."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, data * (g - dot))

    return _node(data, (a,), bw, "softmax")


# -- reductions -----------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _node(data, (a,), bw, "sum")


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- shape manipulation ----------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def bw(g):
        _accum(a, g.reshape(a.shape))

    return _node(data, (a,), bw, "reshape")


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    data = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        _accum(a, g.transpose(inverse))

    return _node(data, (a,), bw, "transpose")


def concat(tensors, axis=1):
    """Concatenate along an axis (channel axis by default)."""
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _node(data, tuple(tensors), bw, "concat")


def narrow(a, axis, start, length):
    """Contiguous slice along one axis; inverse of concat."""
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = a.data[idx]

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        _accum(a, full)

    return _node(data, (a,), bw, "narrow")


def take(a, indices):
    """Gather elements of a 1-D tensor by a fixed integer index array."""
    a = as_tensor(a)
    if a.ndim != 1:
        raise ValueError("take expects a 1-D tensor")
    indices = np.asarray(indices, dtype=np.int64)
    data = a.data[indices]

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, indices, g)
        _accum(a, full)

    return _node(data, (a,), bw, "take")


def matmul(a, b):
    """2-D matrix product for fully-connected layers."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    data = a.data @ b.data

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _node(data, (a, b), bw, "matmul")


def one_hot(labels, num_classes, ignore_value=None, dtype=None):
    """Constant one-hot encoding of an integer label map.

    labels (..., H, W) -> tensor (..., C, H, W) with the class axis inserted
    before the last two; ignored pixels encode as the all-zero vector.
    """
    labels = np.asarray(labels)
    if ignore_value is not None:
        valid = labels != ignore_value
    else:
        valid = np.ones(labels.shape, dtype=bool)
    clipped = np.where(valid, labels, 0)
    if clipped.min(initial=0) < 0 or clipped.max(initial=0) >= num_classes:
        raise ValueError("label id outside [0, num_classes)")
    dt = _DEFAULT_DTYPE if dtype is None else np.dtype(dtype)
    eye = np.eye(num_classes, dtype=dt)
    oh = eye[clipped] * valid[..., None]
    oh = np.moveaxis(oh, -1, -3)
    return Tensor(oh, dtype=dt)
