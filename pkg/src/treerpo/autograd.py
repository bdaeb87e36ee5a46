"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations the policy and the losses need are provided: matmul,
broadcasting arithmetic, reductions, embedding lookup, row gathers,
log-softmax, tanh/gelu, minimum and clipping.  Everything runs in float64.

A graph is recorded while ops execute; ``backward`` walks it in reverse
topological order.  Inside ``no_grad()`` no graph is recorded, which is the
mode used during rollout.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

_GRAD_ENABLED = True


class NumericError(FloatingPointError):
    """A non-finite value appeared in a recorded computation."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad, shape):
    # sum out broadcast dimensions so grad matches the operand shape
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, parents=(), backward=None, name=None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.name = name
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        if _GRAD_ENABLED and self.requires_grad:
            self._parents = parents
            self._backward = backward
        else:
            self._parents = ()
            self._backward = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape})"

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar output")
        self.grad = np.ones_like(self.data)
        for node in reversed(_topo(self)):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return tsum(self, axis=axis, keepdims=keepdims) * (1.0 / n)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None):
    return Tensor(data, name=name, requires_grad=True)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor(a.data + b.data, (a, b), backward)


def neg(a):
    def backward(g):
        a._accumulate(-g)

    return Tensor(-a.data, (a,), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor(a.data * b.data, (a, b), backward)


def reciprocal(a):
    out = 1.0 / a.data

    def backward(g):
        a._accumulate(-g * out * out)

    return Tensor(out, (a,), backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return Tensor(a.data @ b.data, (a, b), backward)


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)

    def backward(g):
        inv = None if axes is None else np.argsort(axes)
        a._accumulate(np.transpose(g, inv))

    return Tensor(out, (a,), backward)


def reshape(a, shape):
    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return Tensor(a.data.reshape(shape), (a,), backward)


def tsum(a, axis=None, keepdims=False):
    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.shape))

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def exp(a):
    out = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out)

    return Tensor(out, (a,), backward)


def log(a):
    def backward(g):
        a._accumulate(g / a.data)

    return Tensor(np.log(a.data), (a,), backward)


def sqrt(a):
    out = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / out)

    return Tensor(out, (a,), backward)


def tanh(a):
    out = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - out * out))

    return Tensor(out, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))

    return Tensor(out, (a,), backward)


def embedding(table, ids):
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table._accumulate(full)

    return Tensor(table.data[ids], (table,), backward)


def take_columns(a, cols):
    cols = np.asarray(cols, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(a.data)
        full[..., cols] += g
        a._accumulate(full)

    return Tensor(a.data[..., cols], (a,), backward)


def gather(a, rows, cols):
    """Pick ``a[rows[i], cols[i]]`` for each i (a 1-D result)."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, cols), g)
        a._accumulate(full)

    return Tensor(a.data[rows, cols], (a,), backward)


def log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        a._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return Tensor(out, (a,), backward)


def softmax(a, axis=-1):
    return exp(log_softmax(a, axis=axis))


def minimum(a, b):
    """Elementwise min; the gradient flows to the selected branch (``a`` on ties)."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(pick_a, g, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(pick_a, 0.0, g), b.shape))

    return Tensor(np.where(pick_a, a.data, b.data), (a, b), backward)


def clip(a, lo, hi):
    """Clamp with pass-through gradient on ``[lo, hi]`` and zero gradient outside."""
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        a._accumulate(np.where(inside, g, 0.0))

    return Tensor(np.clip(a.data, lo, hi), (a,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * reciprocal(sqrt(var + eps)) * gain + bias


def _topo(root):
    """Nodes reachable from ``root``, parents before children."""
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def check_finite(root):
    """Raise ``NumericError`` naming the earliest non-finite node feeding ``root``."""
    for node in _topo(root):
        if not np.all(np.isfinite(node.data)):
            raise NumericError(f"non-finite value in node {node.name or repr(node)}")
