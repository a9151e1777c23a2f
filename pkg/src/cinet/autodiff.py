"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

Every op returns a new :class:`Tensor` holding references to its parents and
a closure mapping the output gradient to parent gradients. :func:`backward`
walks that graph once in reverse topological order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.special import erf

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class StaleTapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad and not _parents else None
        self._parents = _parents
        self._backward = _backward
        self._consumed = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# Per-op finiteness checks cost ~10% of a training step; losses and leaf
# gradients are always checked, so NaN/Inf cannot pass silently either way.
CHECK_EVERY_OP = False


def _finite(arr: np.ndarray, op: str, force: bool = False) -> np.ndarray:
    if (force or CHECK_EVERY_OP) and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    return arr


def _node(out, parents, backward, op):
    parents = tuple(parents)
    rg = any(p.requires_grad for p in parents)
    return Tensor(_finite(out, op), requires_grad=rg, _parents=parents if rg else (), _backward=backward if rg else None)


def unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {root.shape}")
    if root._consumed:
        raise StaleTapeError("backward already ran on this output; run a fresh forward pass")
    if not root.requires_grad:
        raise ValueError("output does not depend on any tracked tensor")
    _finite(root.data, "forward pass", force=True)
    order, seen = [], set()
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
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _finite(g, f"backward into {node.name or 'leaf'}", force=True)
            node.grad = node.grad + g if node.grad is not None else g.copy()
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    root._consumed = True


# ----------------------------------------------------------------------------
# elementwise and linear algebra


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw, "mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = sigmoid_np(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(x)) without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _node(out, (a,), lambda g: (g * sigmoid_np(-x),), "log_sigmoid")


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = x * cdf

    def bw(g):
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)

    return _node(out, (a,), bw, "gelu")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _node(out, (a,), bw, "softmax")


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m)
    tot = s.sum(axis=axis, keepdims=True)
    out = np.log(tot) + m
    soft = s / tot

    def bw(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (gg * soft,)

    return _node(out if keepdims else np.squeeze(out, axis=axis), (a,), bw, "logsumexp")


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis, keepdims), 1.0 / count)


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ValueError(f"concat shape mismatch: {[t.shape for t in ts]} along axis {axis}") from exc
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(out, ts, bw, "concat")


def gather(a, idx, axis: int = 0) -> Tensor:
    """Select slices of ``a`` along ``axis`` by an integer array of any shape."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.take(a.data, idx, axis=axis)

    def bw(g):
        ax = axis % a.ndim
        if ax != 0:
            gm = np.moveaxis(g.reshape(a.shape[:ax] + (idx.size,) + a.shape[ax + 1 :]), ax, 0)
        else:
            gm = g.reshape((idx.size,) + a.shape[1:])
        return (np.moveaxis(scatter_add(gm, idx.reshape(-1), a.shape[ax]), 0, ax),)

    return _node(out, (a,), bw, "gather")


def scatter_add(values: np.ndarray, idx: np.ndarray, size: int) -> np.ndarray:
    """Sum rows of ``values`` into ``size`` buckets given by ``idx``."""
    m = idx.size
    if m == 0:
        return np.zeros((size,) + values.shape[1:])
    onehot = sparse.csr_matrix((np.ones(m), (idx, np.arange(m))), shape=(size, m))
    return np.asarray(onehot @ values.reshape(m, -1)).reshape((size,) + values.shape[1:])


def index(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    basic = all(isinstance(i, (slice, int, type(Ellipsis))) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        acc = np.zeros_like(a.data)
        if basic:
            acc[idx] += g
        else:
            np.add.at(acc, idx, g)
        return (acc,)

    return _node(np.array(out), (a,), bw, "index")


def layer_norm(a, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then optional elementwise affine."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gx = inv * (g - g.mean(axis=-1, keepdims=True) - xhat * np.mean(g * xhat, axis=-1, keepdims=True))
        return (gx,)

    out = _node(xhat, (a,), bw, "layer_norm")
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


# ----------------------------------------------------------------------------
# parameters and optimization


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64DXSM(seed))


def kaiming_init(shape, fan_in: int, seed: int | np.random.Generator, name: str | None = None) -> Tensor:
    """He-normal weights: N(0, 2/fan_in)."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    data = rng.standard_normal(tuple(shape)) * math.sqrt(2.0 / fan_in)
    return Tensor(data, requires_grad=True, name=name)


def zeros_param(shape, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=True, name=name)


def ones_param(shape, name: str | None = None) -> Tensor:
    return Tensor(np.ones(tuple(shape)), requires_grad=True, name=name)


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected ADAM update, applied in place to ``params``."""
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ValueError(f"shape mismatch in adam_step: param {p.data.shape}, grad {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def check_gradients(fn, params, h: float = 1e-5, max_coords: int | None = None, seed: int = 0) -> float:
    """Relative error between backprop and central finite differences.

    ``fn()`` must rebuild the scalar output from ``params`` on every call.
    Returns ``||g_bp - g_fd|| / max(||g_bp|| + ||g_fd||, 1e-12)`` over the
    checked coordinates (at most ``max_coords`` per tensor, sampled).
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(fn())
    rng = np.random.default_rng(seed)
    bp, fd = [], []
    for p in params:
        flat = np.arange(p.data.size)
        if max_coords is not None and flat.size > max_coords:
            flat = np.sort(rng.choice(flat, max_coords, replace=False))
        base = p.data
        for i in flat:
            j = np.unravel_index(i, base.shape)
            up, dn = base.copy(), base.copy()
            up[j] += h
            dn[j] -= h
            p.data = up
            f_up = float(fn().data)
            p.data = dn
            f_dn = float(fn().data)
            p.data = base
            fd.append((f_up - f_dn) / (2 * h))
            bp.append(p.grad[j])
    bp, fd = np.array(bp), np.array(fd)
    return float(np.linalg.norm(bp - fd) / max(np.linalg.norm(bp) + np.linalg.norm(fd), 1e-12))
