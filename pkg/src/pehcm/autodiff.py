"""Minimal reverse-mode tape over float64 numpy arrays.

A loss graph is rebuilt for every evaluation and stays small (a few hundred
nodes per training step), so the implementation favours clarity over op
coverage: elementwise arithmetic with numpy broadcasting, 2-d matmul,
reductions, and the handful of nonlinearities the embedding losses need.
Everything is computed in double precision.
"""

import numpy as np


def _as_f64(x):
    return np.asarray(x, dtype=np.float64)


def _sum_to(grad, shape):
    """Reduce a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 ndarray plus the tape links needed for backward()."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = _as_f64(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self):
        """Accumulate gradients of a scalar into every upstream tensor."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        for node in topo:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- reductions and shape ops -------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        src = self

        def bw(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            src.grad += np.broadcast_to(gg, src.data.shape)

        return Tensor._make(out_data, (src,), bw)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self
        old = self.data.shape

        def bw(g):
            src.grad += g.reshape(old)

        return Tensor._make(self.data.reshape(shape), (src,), bw)

    @property
    def T(self):
        if self.data.ndim != 2:
            raise ValueError("T is defined for 2-d tensors only")
        src = self

        def bw(g):
            src.grad += g.T

        return Tensor._make(self.data.T.copy(), (src,), bw)

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        a, b = self, as_tensor(other)

        def bw(g):
            a.grad += _sum_to(g, a.data.shape)
            b.grad += _sum_to(g, b.data.shape)

        return Tensor._make(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __neg__(self):
        src = self

        def bw(g):
            src.grad -= g

        return Tensor._make(-self.data, (src,), bw)

    def __sub__(self, other):
        a, b = self, as_tensor(other)

        def bw(g):
            a.grad += _sum_to(g, a.data.shape)
            b.grad -= _sum_to(g, b.data.shape)

        return Tensor._make(a.data - b.data, (a, b), bw)

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        a, b = self, as_tensor(other)

        def bw(g):
            a.grad += _sum_to(g * b.data, a.data.shape)
            b.grad += _sum_to(g * a.data, b.data.shape)

        return Tensor._make(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, as_tensor(other)

        def bw(g):
            a.grad += _sum_to(g / b.data, a.data.shape)
            b.grad -= _sum_to(g * a.data / (b.data * b.data), b.data.shape)

        return Tensor._make(a.data / b.data, (a, b), bw)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __matmul__(self, other):
        a, b = self, as_tensor(other)
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise ValueError("matmul supports 2-d tensors only")

        def bw(g):
            a.grad += g @ b.data.T
            b.grad += a.data.T @ g

        return Tensor._make(a.data @ b.data, (a, b), bw)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# -- unary math --------------------------------------------------------------


def tanh(t):
    out_data = np.tanh(t.data)

    def bw(g):
        t.grad += g * (1.0 - out_data * out_data)

    return Tensor._make(out_data, (t,), bw)


def arctanh(t):
    def bw(g):
        t.grad += g / (1.0 - t.data * t.data)

    return Tensor._make(np.arctanh(t.data), (t,), bw)


def arcsinh(t):
    def bw(g):
        t.grad += g / np.sqrt(1.0 + t.data * t.data)

    return Tensor._make(np.arcsinh(t.data), (t,), bw)


def exp(t):
    out_data = np.exp(t.data)

    def bw(g):
        t.grad += g * out_data

    return Tensor._make(out_data, (t,), bw)


def log(t):
    def bw(g):
        t.grad += g / t.data

    return Tensor._make(np.log(t.data), (t,), bw)


def sqrt(t):
    out_data = np.sqrt(t.data)

    def bw(g):
        t.grad += g * (0.5 / out_data)

    return Tensor._make(out_data, (t,), bw)


def relu(t):
    mask = t.data > 0

    def bw(g):
        t.grad += g * mask

    return Tensor._make(np.where(mask, t.data, 0.0), (t,), bw)


def where(mask, a, b):
    """Select between two branches with a constant boolean mask."""
    mask = np.asarray(mask, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        a.grad += _sum_to(np.where(mask, g, 0.0), a.data.shape)
        b.grad += _sum_to(np.where(mask, 0.0, g), b.data.shape)

    return Tensor._make(np.where(mask, a.data, b.data), (a, b), bw)
