"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record their parents and a backward closure; calling
:meth:`Tensor.backward` on a scalar walks that graph in reverse topological
order. Recording is skipped inside :func:`no_grad`.
"""
from contextlib import contextmanager

import numpy as np

from . import kernels
from .errors import ConfigError, UsageError

_grad_enabled = True


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float32)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if self.data.size != 1:
            raise UsageError(f"backward needs a scalar output, got shape {self.shape}")
        order = _topo_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = np.zeros_like(node.data)
                    node.grad += g.astype(node.data.dtype, copy=False)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)))


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def astype(a, dtype):
    old = a.dtype
    return _make(a.data.astype(dtype), (a,), lambda g: (g.astype(old),))


def relu(a):
    mask = a.data > 0
    return _make(np.where(mask, a.data, a.data.dtype.type(0)), (a,), lambda g: (g * mask,))


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = out.astype(a.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * out * (1 - out),))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def absolute(a):
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


def floor_at(a, value):
    """``max(a, value)`` elementwise; gradient passes only where ``a > value``."""
    mask = a.data > value
    out = np.where(mask, a.data, a.data.dtype.type(value))
    return _make(out, (a,), lambda g: (g * mask,))


def log_softmax(a, axis=-1):
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _make(out, (a,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def softmax(a, axis=-1):
    """Row-stochastic softmax with max-subtraction. Works on Tensors or arrays."""
    if not isinstance(a, Tensor):
        x = np.asarray(a)
        if x.shape[axis] < 2:
            raise UsageError("softmax needs at least two classes")
        e = np.exp(x - x.max(axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True)
    if a.shape[axis] < 2:
        raise UsageError("softmax needs at least two classes")
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), back)


def pick(a, index):
    """Rows of a 2-D tensor gathered at ``index`` (one column per row)."""
    rows = np.arange(a.shape[0])
    shape, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[rows, index] = g
        return (full,)

    return _make(a.data[rows, index], (a,), back)


def conv2d(x, weight, bias=None, padding=0, stride=1):
    """2-D cross-correlation on NCHW input with OIHW weights, lowered to a matmul."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ConfigError(f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ConfigError(f"conv2d kernel {kh}x{kw} larger than padded input {h}x{w}")
    cols = kernels.im2col(np.ascontiguousarray(x.data), kh, kw, padding, stride)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (gm.T @ cols).reshape(weight.shape)
        dx = None
        if x.requires_grad:
            dx = kernels.col2im(np.ascontiguousarray(gm @ wmat), n, c, h, w, kh, kw, padding, stride)
        if bias is None:
            return dx, dw
        return dx, dw, gm.sum(axis=0)

    return _make(out, parents, back)


def fake_quant(x, scale, zero_point, qmin, qmax, axis=None, surrogate=False):
    """Simulated quantization with a straight-through gradient.

    ``scale``/``zero_point`` are scalars (per-tensor) or vectors laid along
    ``axis`` (per-channel). The backward pass lets the gradient through where
    the rounded code is inside ``[qmin, qmax]`` and blocks it elsewhere.
    With ``surrogate`` the forward value is replaced by the clamp the
    estimator assumes, which is what finite differences can check.
    """
    data = x.data
    dtype = data.dtype
    if axis is None:
        rows = data.reshape(1, -1)
    else:
        rows = np.moveaxis(data, axis, 0).reshape(data.shape[axis], -1)
    rows = np.ascontiguousarray(rows)
    nrows = rows.shape[0]
    s = np.ascontiguousarray(np.broadcast_to(np.asarray(scale, dtype=dtype), (nrows,)))
    zp = np.ascontiguousarray(np.broadcast_to(np.asarray(zero_point, dtype=dtype), (nrows,)))
    y, mask = kernels.fake_quant_rows(rows, s, zp, qmin, qmax)
    if surrogate:
        lo = (qmin - 0.5 - zp[:, None]) * s[:, None]
        hi = (qmax + 0.5 - zp[:, None]) * s[:, None]
        y = np.clip(rows, lo, hi).astype(dtype, copy=False)

    def restore(a):
        if axis is None:
            return a.reshape(data.shape)
        moved = np.moveaxis(data, axis, 0).shape
        return np.moveaxis(a.reshape(moved), 0, axis)

    y = np.ascontiguousarray(restore(y))
    mask = restore(mask).astype(bool)
    return _make(y, (x,), lambda g: (g * mask,))
