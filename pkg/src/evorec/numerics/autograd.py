"""Reverse-mode differentiation over numpy arrays.

``Var`` wraps an ndarray and remembers the op that produced it.  Calling
``backward()`` on a scalar walks the recorded graph in reverse topological
order and accumulates ``.grad`` on every node that needs one.  Coverage is
deliberately narrow: what the recommender uses and nothing more (rank <= 3).
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import kernels

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Var:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.data.shape}, dtype={self.data.dtype})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar -------------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return vmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def _topo_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_var(x, dtype=None):
    if isinstance(x, Var):
        return x
    arr = np.asarray(x)
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return Var(arr)


def _result_dtype(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.data.dtype
    return None


def _make(data, parents, backward):
    out = Var(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b):
    dt = _result_dtype(a, b)
    a, b = as_var(a, dt), as_var(b, dt)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    dt = _result_dtype(a, b)
    a, b = as_var(a, dt), as_var(b, dt)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    dt = _result_dtype(a, b)
    a, b = as_var(a, dt), as_var(b, dt)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    dt = _result_dtype(a, b)
    a, b = as_var(a, dt), as_var(b, dt)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a):
    a = as_var(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def exp(a):
    a = as_var(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_var(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a):
    a = as_var(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = as_var(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def clip(a, lo, hi):
    a = as_var(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and normalisers
# ---------------------------------------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = sorted(ax % len(shape) for ax in axes)
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def vsum(a, axis=None, keepdims=False):
    a = as_var(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _make(out, (a,), lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)),))


def vmean(a, axis=None, keepdims=False):
    a = as_var(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return vsum(a, axis=axis, keepdims=keepdims) / float(n)


def softmax(a, axis=-1):
    a = as_var(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


def log_softmax(a, axis=-1):
    a = as_var(a)
    m = a.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))
    out = a.data - lse
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra and shape plumbing
# ---------------------------------------------------------------------------


def matmul(a, b):
    dt = _result_dtype(a, b)
    a, b = as_var(a, dt), as_var(b, dt)
    A, B = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if B.ndim == 1:
                ga = np.multiply.outer(g, B) if A.ndim > 1 else g * B
            else:
                ga = g @ np.swapaxes(B, -1, -2)
            ga = _unbroadcast(ga, A.shape)
        if b.requires_grad:
            if A.ndim == 1:
                gb = np.multiply.outer(A, g)
            elif B.ndim == 1:
                gb = np.swapaxes(A, -1, -2) @ g
            else:
                gb = np.swapaxes(A, -1, -2) @ g
            gb = _unbroadcast(gb, B.shape)
        return ga, gb

    return _make(A @ B, (a, b), bw)


def reshape(a, shape):
    a = as_var(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a, ax1, ax2):
    a = as_var(a)
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def getitem(a, key):
    a = as_var(a)

    parts = key if isinstance(key, tuple) else (key,)
    fancy = any(isinstance(k, (list, np.ndarray)) for k in parts)

    def bw(g):
        out = np.zeros_like(a.data)
        if fancy:
            np.add.at(out, key, g)  # repeated indices accumulate
        else:
            out[key] += g
        return (out,)

    return _make(a.data[key], (a,), bw)


def take_rows(a, idx):
    """Gather ``a[idx]`` along axis 0; the adjoint is a row scatter-add."""
    a = as_var(a)
    idx = np.asarray(idx, dtype=np.int64)
    flat = idx.reshape(-1)

    def bw(g):
        g = np.ascontiguousarray(g).reshape((flat.size,) + a.shape[1:])
        return (kernels.index_add(a.shape[0], flat, g),)

    return _make(a.data[idx], (a,), bw)


def concat(xs, axis=0):
    dt = _result_dtype(*xs)
    xs = tuple(as_var(x, dt) for x in xs)
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis) for k in range(len(xs))
        )

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, bw)


def stack(xs, axis=0):
    dt = _result_dtype(*xs)
    xs = tuple(as_var(x, dt) for x in xs)

    def bw(g):
        return tuple(np.take(g, k, axis=axis) for k in range(len(xs)))

    return _make(np.stack([x.data for x in xs], axis=axis), xs, bw)


def spmm(dst, src, coef, x, n_out):
    """Edge-list sparse product ``out[dst] += coef * x[src]``."""
    x = as_var(x)
    n_in = x.shape[0]

    def bw(g):
        return (kernels.spmm(src, dst, coef, np.ascontiguousarray(g), n_in),)

    return _make(kernels.spmm(dst, src, coef, x.data, n_out), (x,), bw)


def dropout(a, rate, rng):
    """Inverted dropout; identity when ``rate == 0`` or ``rng is None``."""
    if rng is None or rate <= 0.0:
        return a
    a = as_var(a)
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return mul(a, keep)
