"""Reverse-mode autodiff over dense numpy arrays.

A Tensor wraps a float32/float64 ndarray. Operations record a computation
graph while gradients are enabled; Tensor.backward() walks the graph in
reverse topological order and accumulates gradients into every tensor that
requires them. Parameters are leaf tensors with a persistently allocated
gradient buffer.

All ops are vectorized: one graph node per array operation, so graph size is
independent of batch size. The graph is single-writer; independent graphs
(e.g. batch shards) may run concurrently.
"""

from __future__ import annotations

import numpy as np

_F32 = np.float32
_F64 = np.float64
_ALLOWED_DTYPES = (_F32, _F64)

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (pure numpy forward)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


def _coerce(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _ALLOWED_DTYPES:
        arr = arr.astype(_F64)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_needs", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _coerce(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._needs = ()
        self._backward = None

    # -- basic properties ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        t = Tensor(self.data.astype(dtype))
        if _grad_enabled and self.requires_grad:
            t.requires_grad = True
            t._parents = (self,)
            t._needs = (True,)
            src_dtype = self.data.dtype
            t._backward = lambda g: (g.astype(src_dtype),)
        return t

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- autograd machinery --------------------------------------------------

    def _accumulate(self, g: np.ndarray):
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Backpropagate from a scalar. Frees the graph afterwards."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.data.shape}")
        topo = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None:
                continue
            if node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, needs, g in zip(node._parents, node._needs, grads):
                # `needs` is the parent's requires_grad frozen at graph build
                if g is not None and needs:
                    parent._accumulate(g)
        # release intermediate buffers; leaf grads survive
        for node in topo:
            computed = node._backward is not None
            node._parents = ()
            node._needs = ()
            node._backward = None
            if computed and node is not self:
                node.grad = None

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __truediv__(self, other):
        other = _as_tensor(other)
        return mul(self, pow(other, -1.0))

    def __rtruediv__(self, other):
        return mul(_as_tensor(other), pow(self, -1.0))

    def __pow__(self, p):
        return pow(self, float(p))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    @property
    def mT(self):
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """Trainable leaf tensor; grad is allocated zero at construction."""

    def __init__(self, data, dtype=None):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True)
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor):
    topo, visited, stack = [], set(), [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return topo


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _node(data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._needs = tuple(p.requires_grad for p in parents)
        out._backward = backward
    return out


# -- primitive ops -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def pow(a, p: float) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    out = ad ** p
    return _node(out, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul requires ndim >= 2 on both operands")
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _node(np.matmul(ad, bd), (a, b), backward)


def getitem(a, key) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, key, g)
        return (out,)

    return _node(a.data[key], (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    orig = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    shape = a.data.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        n = a.shape[axis]
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _node(np.maximum(ad, 0.0), (a,), lambda g: (g * (ad > 0.0),))


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x), via the error function."""
    from scipy.special import erf

    a = _as_tensor(a)
    ad = a.data
    phi = 0.5 * (1.0 + erf(ad / np.sqrt(2.0)))

    def backward(g):
        pdf = np.exp(-0.5 * ad * ad) / np.sqrt(2.0 * np.pi)
        return (g * (phi + ad * pdf),)

    return _node(ad * phi, (a,), backward)


def maximum(a, floor: float) -> Tensor:
    """Elementwise max with a constant; subgradient 0 at the floor."""
    a = _as_tensor(a)
    ad = a.data
    return _node(np.maximum(ad, floor), (a,), lambda g: (g * (ad > floor),))


def where_const(cond: np.ndarray, a, b) -> Tensor:
    """Select between two tensors with a constant boolean mask."""
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        return np.where(cond, g, 0.0), np.where(cond, 0.0, g)

    return _node(np.where(cond, a.data, b.data), (a, b), backward)


def masked_softmax(logits, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis with disallowed entries forced to exact zero.

    mask is a boolean array broadcastable to logits.shape; True marks an
    allowed entry. Every row must keep at least one allowed entry, otherwise
    the result is NaN (callers validate).
    """
    logits = _as_tensor(logits)
    z = np.where(mask, logits.data, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)  # exp(-inf) == 0 exactly for disallowed entries
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - inner),)

    return _node(p, (logits,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data
    m = z.max(axis=axis, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = gamma.data * xhat + beta.data

    def backward(g):
        dgamma = _unbroadcast(g * xhat, gamma.data.shape)
        dbeta = _unbroadcast(g, beta.data.shape)
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _node(out, (x, gamma, beta), backward)


# -- constructors ------------------------------------------------------------


def zeros(shape, dtype=_F64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=_F64) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype))
