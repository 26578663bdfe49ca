"""Reverse-mode automatic differentiation on a recording tape.

Operations on :class:`Value` objects are appended to the active :class:`Tape`
when at least one input requires a gradient.  ``backward`` walks the tape in
reverse creation order, so no topological sort is needed.

Every op also accepts plain ``numpy`` arrays; if no input is a ``Value`` the
op is evaluated directly with numpy and no node is created.  Inference code
therefore runs on raw arrays at numpy speed.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np

_local = threading.local()
_ids = itertools.count()


def _tapes():
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape():
    stack = _tapes()
    return stack[-1] if stack else None


class Tape:
    """Records differentiable operations while used as a context manager."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        _tapes().remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss):
        backward(loss, self)


class Value:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "id", "name")
    __array_priority__ = 1000  # make ndarray <op> Value dispatch to Value

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=float)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = ()
        self.backward_fn = None
        self.id = next(_ids)
        self.name = name

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Value{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def detach(self):
        return Value(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # operators
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
        return neg(self)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def parameter(data, name=None) -> Value:
    return Value(np.array(data, dtype=float), requires_grad=True, name=name)


def data_of(x):
    return x.data if isinstance(x, Value) else np.asarray(x, dtype=float)


def _any_value(args):
    return any(isinstance(a, Value) for a in args)


def _node(data, parents, backward_fn):
    tape = active_tape()
    if tape is not None and any(isinstance(p, Value) and p.requires_grad for p in parents):
        out = Value(data, requires_grad=True)
        out.parents = parents
        out.backward_fn = backward_fn
        tape.nodes.append(out)
        return out
    return Value(data)


def backward(loss: Value, tape: Tape | None = None):
    """Accumulate ``d loss / d v`` into ``v.grad`` for every recorded input."""
    if not isinstance(loss, Value):
        raise TypeError("backward expects a Value")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise RuntimeError("backward called without a tape")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None or node.backward_fn is None:
            continue
        grads = node.backward_fn(g)
        for p, gp in zip(node.parents, grads):
            if gp is None or not isinstance(p, Value) or not p.requires_grad:
                continue
            p.grad = gp if p.grad is None else p.grad + gp


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    if not _any_value((a, b)):
        return np.add(a, b)
    ad, bd = data_of(a), data_of(b)
    return _node(ad + bd, (a, b), lambda g: (unbroadcast(g, ad.shape), unbroadcast(g, bd.shape)))


def sub(a, b):
    if not _any_value((a, b)):
        return np.subtract(a, b)
    ad, bd = data_of(a), data_of(b)
    return _node(ad - bd, (a, b), lambda g: (unbroadcast(g, ad.shape), unbroadcast(-g, bd.shape)))


def mul(a, b):
    if not _any_value((a, b)):
        return np.multiply(a, b)
    ad, bd = data_of(a), data_of(b)
    return _node(ad * bd, (a, b), lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def div(a, b):
    if not _any_value((a, b)):
        return np.divide(a, b)
    ad, bd = data_of(a), data_of(b)
    out = ad / bd
    return _node(out, (a, b), lambda g: (unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)))


def neg(a):
    if not isinstance(a, Value):
        return np.negative(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a, k: float):
    if not isinstance(a, Value):
        return np.power(a, k)
    ad = a.data
    return _node(ad**k, (a,), lambda g: (g * k * ad ** (k - 1),))


def square(a):
    if not isinstance(a, Value):
        return np.square(a)
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * g * ad,))


# ---------------------------------------------------------------------------
# unary functions


def _unary(fn, dfn):
    def op(a):
        if not isinstance(a, Value):
            return fn(np.asarray(a, dtype=float))
        out = fn(a.data)
        return _node(out, (a,), lambda g: (g * dfn(a.data, out),))

    op.__name__ = fn.__name__ if hasattr(fn, "__name__") else "unary"
    return op


def _sigmoid(x):
    # stable for large |x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softplus(x):
    return np.logaddexp(0.0, x)


exp = _unary(np.exp, lambda x, y: y)
log = _unary(np.log, lambda x, y: 1.0 / x)
tanh = _unary(np.tanh, lambda x, y: 1.0 - y * y)
sigmoid = _unary(_sigmoid, lambda x, y: y * (1.0 - y))
relu = _unary(lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(float))
sin = _unary(np.sin, lambda x, y: np.cos(x))
cos = _unary(np.cos, lambda x, y: -np.sin(x))
absolute = _unary(np.abs, lambda x, y: np.sign(x))
sqrt = _unary(np.sqrt, lambda x, y: 0.5 / y)
softplus = _unary(_softplus, lambda x, y: _sigmoid(x))


# ---------------------------------------------------------------------------
# shape manipulation and reductions


def reshape(a, shape):
    if not isinstance(a, Value):
        return np.reshape(a, shape)
    old = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a):
    """Swap the last two axes."""
    if not isinstance(a, Value):
        return np.swapaxes(a, -1, -2)
    return _node(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(Ellipsis), type(None))) or isinstance(i, np.integer) for i in items)


def getitem(a, idx):
    if not isinstance(a, Value):
        return np.asarray(a)[idx]
    shape = a.data.shape
    basic = _is_basic_index(idx)

    def bw(g):
        out = np.zeros(shape)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _node(a.data[idx], (a,), bw)


def concat(items, axis=-1):
    items = list(items)
    if not _any_value(items):
        return np.concatenate([np.asarray(i, dtype=float) for i in items], axis=axis)
    datas = [data_of(i) for i in items]
    sizes = [d.shape[axis] for d in datas]
    cuts = np.cumsum(sizes)[:-1]
    return _node(np.concatenate(datas, axis=axis), tuple(items), lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(items, axis=0):
    items = list(items)
    if not _any_value(items):
        return np.stack([np.asarray(i, dtype=float) for i in items], axis=axis)
    out = np.stack([data_of(i) for i in items], axis=axis)
    n = len(items)
    return _node(out, tuple(items), lambda g: tuple(np.take(g, k, axis=axis) for k in range(n)))


def vsum(a, axis=None, keepdims=False):
    if not isinstance(a, Value):
        return np.sum(a, axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False):
    size = data_of(a).size if axis is None else np.prod([data_of(a).shape[ax] for ax in np.atleast_1d(axis)])
    return vsum(a, axis, keepdims) * (1.0 / size) if isinstance(a, Value) else np.mean(a, axis=axis, keepdims=keepdims)


def diagonal(a):
    """Diagonal of the last two axes."""
    if not isinstance(a, Value):
        return np.diagonal(a, axis1=-2, axis2=-1).copy()
    d = a.data.shape[-1]

    def bw(g):
        return (g[..., :, None] * np.eye(d),)

    return _node(np.diagonal(a.data, axis1=-2, axis2=-1).copy(), (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    if not _any_value((a, b)):
        return np.matmul(a, b)
    ad, bd = data_of(a), data_of(b)
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul on Values needs operands with ndim >= 2")

    def bw(g):
        return (unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape), unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape))

    return _node(ad @ bd, (a, b), bw)


def bmv(A, v):
    """Batched matrix-vector product ``(..., i, j) x (..., j) -> (..., i)``."""
    if not _any_value((A, v)):
        return np.einsum("...ij,...j->...i", A, v)
    Ad, vd = data_of(A), data_of(v)

    def bw(g):
        return (unbroadcast(g[..., :, None] * vd[..., None, :], Ad.shape),
                unbroadcast(np.einsum("...ij,...i->...j", Ad, g), vd.shape))

    return _node(np.einsum("...ij,...j->...i", Ad, vd), (A, v), bw)


def inv(A):
    if not isinstance(A, Value):
        return np.linalg.inv(A)
    out = np.linalg.inv(A.data)

    def bw(g):
        outT = np.swapaxes(out, -1, -2)
        return (-outT @ g @ outT,)

    return _node(out, (A,), bw)


def solve(A, B):
    """``A^{-1} B`` for square ``A`` (batched); ``B`` has a trailing column axis."""
    if not _any_value((A, B)):
        return np.linalg.solve(A, B)
    Ad, Bd = data_of(A), data_of(B)
    X = np.linalg.solve(Ad, Bd)

    def bw(g):
        gB = np.linalg.solve(np.swapaxes(Ad, -1, -2), g)
        return (unbroadcast(-gB @ np.swapaxes(X, -1, -2), Ad.shape), unbroadcast(gB, Bd.shape))

    return _node(X, (A, B), bw)


def logdet_spd(A):
    """``log det A`` for symmetric positive definite ``A`` via Cholesky (batched)."""
    Ad = data_of(A)
    L = np.linalg.cholesky(Ad)
    out = 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(-1)
    if not isinstance(A, Value):
        return out

    def bw(g):
        Ainv = np.linalg.inv(Ad)
        return (g[..., None, None] * np.swapaxes(Ainv, -1, -2),)

    return _node(out, (A,), bw)


def vector_map(fn, jac, x):
    """Apply a model function ``fn: (..., m) -> (..., k)`` with Jacobian ``jac: (..., m) -> (..., k, m)``.

    The backward pass uses the analytic Jacobian evaluated at the forward input.
    """
    if not isinstance(x, Value):
        return fn(np.asarray(x, dtype=float))
    xd = x.data
    out = fn(xd)
    J = jac(xd)
    return _node(out, (x,), lambda g: (np.einsum("...k,...km->...m", g, J),))


# ---------------------------------------------------------------------------
# fused layer primitives


def linear(x, W, b=None):
    """``x @ W.T + b`` with ``W`` of shape (out, in)."""
    args = (x, W) if b is None else (x, W, b)
    xd, Wd = data_of(x), data_of(W)
    out = xd @ Wd.T
    if b is not None:
        out = out + data_of(b)
    if not _any_value(args):
        return out

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ Wd
        gW = g2.T @ xd.reshape(-1, xd.shape[-1]) if xd.ndim > 1 else np.outer(g, xd)
        grads = (unbroadcast(gx, xd.shape), gW)
        if b is not None:
            grads = grads + (g2.sum(axis=0),)
        return grads

    return _node(out, args, bw)


def gru_cell(x, h, W_ih, W_hh, b_ih, b_hh):
    """GRU update with gate order (reset, update, candidate).

    r = s(Wi_r x + bi_r + Wh_r h + bh_r)
    z = s(Wi_z x + bi_z + Wh_z h + bh_z)
    n = tanh(Wi_n x + bi_n + r * (Wh_n h + bh_n))
    h' = (1 - z) * n + z * h
    """
    args = (x, h, W_ih, W_hh, b_ih, b_hh)
    xd, hd, Wi, Wh = data_of(x), data_of(h), data_of(W_ih), data_of(W_hh)
    H = hd.shape[-1]
    gi = xd @ Wi.T + data_of(b_ih)
    gh = hd @ Wh.T + data_of(b_hh)
    r = _sigmoid(gi[..., :H] + gh[..., :H])
    z = _sigmoid(gi[..., H:2 * H] + gh[..., H:2 * H])
    ghn = gh[..., 2 * H:]
    n = np.tanh(gi[..., 2 * H:] + r * ghn)
    out = (1.0 - z) * n + z * hd
    if not _any_value(args):
        return out

    def bw(g):
        dn = g * (1.0 - z)
        dz = g * (hd - n)
        dan = dn * (1.0 - n * n)
        dar = dan * ghn * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        dgi = np.concatenate([dar, daz, dan], axis=-1)
        dgh = np.concatenate([dar, daz, dan * r], axis=-1)
        dx = dgi @ Wi
        dh = dgh @ Wh + g * z
        dgi2 = dgi.reshape(-1, 3 * H)
        dgh2 = dgh.reshape(-1, 3 * H)
        dWi = dgi2.T @ xd.reshape(-1, xd.shape[-1])
        dWh = dgh2.T @ hd.reshape(-1, H)
        return (unbroadcast(dx, xd.shape), unbroadcast(dh, hd.shape), dWi, dWh, dgi2.sum(0), dgh2.sum(0))

    return _node(out, args, bw)
