"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation records its parents and a closure mapping the
output gradient to parent gradients. :func:`backward` walks the recorded graph
in reverse topological order, so a tensor used twice receives the sum of both
path gradients.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from itertools import count

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ContractError, DimensionError

__all__ = [
    "Tensor", "tensor", "matmul", "silu", "sigmoid", "exp", "log", "concat",
    "gather_rows", "spmm", "segment_sum", "segment_mean", "rowwise_dot",
    "dropout", "BatchNormParams", "batchnorm", "cross_entropy", "mse_loss",
    "backward", "grad_check", "no_grad", "is_grad_enabled",
]

_state = threading.local()
_ids = count()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


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


class Tensor:
    """A float64 array that can take part in the gradient tape."""

    __array_priority__ = 100
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.node_id = next(_ids) if (self.requires_grad or _parents) else None

    # -- basic protocol -------------------------------------------------
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
    def T(self):
        return self.transpose()

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- arithmetic -----------------------------------------------------
    def __add__(self, other):
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return _make(self.data + other.data, (self, other),
                     lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)))

    __radd__ = __add__

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return _make(self.data - other.data, (self, other),
                     lambda g: (_unbroadcast(g, a_shape), -_unbroadcast(g, b_shape)))

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data
        return _make(a * b, (self, other),
                     lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        return self * other ** -1.0

    def __rtruediv__(self, other):
        return _as_tensor(other) * self ** -1.0

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise TypeError("tensor exponents are not supported")
        p = float(exponent)
        x = self.data
        return _make(x ** p, (self,), lambda g: (g * p * x ** (p - 1.0),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(_as_tensor(other), self)

    # -- shape ops -------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _make(out, (self,), back)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        axes = axes or None
        inv = None if axes is None else tuple(np.argsort(axes))
        return _make(np.transpose(self.data, axes), (self,),
                     lambda g: (np.transpose(g, inv),))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _make(data, parents, back):
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=back)
    return Tensor(data)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data
    return _make(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def sigmoid(x):
    x = _as_tensor(x)
    s = _stable_sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def _stable_sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def silu(x):
    """Elementwise x * sigmoid(x)."""
    x = _as_tensor(x)
    z = x.data
    s = _stable_sigmoid(z)
    return _make(z * s, (x,), lambda g: (g * (s + z * s * (1.0 - s)),))


def exp(x):
    x = _as_tensor(x)
    e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,))


def log(x):
    x = _as_tensor(x)
    z = x.data
    return _make(np.log(z), (x,), lambda g: (g / z,))


def concat(tensors, axis=1):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def gather_rows(x, index):
    """Rows ``x[index]``; repeated indices accumulate in the backward pass."""
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]

    def back(g):
        if len(index) == 0:
            return (np.zeros_like(x.data),)
        return (_scatter_matrix(index, n) @ g.reshape(len(index), -1)).reshape(x.shape),

    return _make(x.data[index], (x,), back)


def _scatter_matrix(index, n):
    m = len(index)
    return sp.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(n, m))


def spmm(matrix, x):
    """Product of a constant scipy sparse (or dense) matrix with ``x``."""
    x = _as_tensor(x)
    if matrix.shape[1] != x.shape[0]:
        raise DimensionError(f"spmm shape mismatch: {matrix.shape} x {x.shape}")
    out = np.asarray(matrix @ x.data)
    mt = matrix.T
    return _make(out, (x,), lambda g: (np.asarray(mt @ g),))


def segment_sum(x, segment, num_segments):
    """Sum rows of ``x`` into ``num_segments`` buckets given by ``segment``."""
    x = _as_tensor(x)
    segment = np.asarray(segment, dtype=np.int64)
    if len(segment) != x.shape[0]:
        raise DimensionError(f"segment ids ({len(segment)}) do not match rows {x.shape}")
    return spmm(_scatter_matrix(segment, num_segments), x)


def segment_mean(x, segment, num_segments):
    segment = np.asarray(segment, dtype=np.int64)
    counts = np.bincount(segment, minlength=num_segments).astype(np.float64)
    scale = 1.0 / np.maximum(counts, 1.0)
    return segment_sum(x, segment, num_segments) * scale[:, None]


def rowwise_dot(a, b):
    return (a * b).sum(axis=1)


def dropout(x, p, training, rng):
    """Inverted dropout; identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask


class BatchNormParams:
    """Learned scale/shift plus momentum-updated running statistics.

    ``running_var`` holds the running estimate of ``var + eps``.
    """

    def __init__(self, dim, momentum=0.1, eps=1e-5):
        self.scale = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps

    @property
    def dim(self):
        return self.scale.shape[0]


def batchnorm(x, params, training):
    x = _as_tensor(x)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractError(f"batchnorm needs a non-empty n x d batch, got shape {x.shape}")
    if x.shape[1] != params.dim:
        raise DimensionError(f"batchnorm expects {params.dim} columns, got {x.shape[1]}")
    if training:
        mean = x.mean(axis=0)
        centered = x - mean
        var = (centered * centered).mean(axis=0)
        xhat = centered * (var + params.eps) ** -0.5
        m = params.momentum
        params.running_mean = (1.0 - m) * params.running_mean + m * mean.data
        # tracks var + eps, so the default stats give an exact identity
        params.running_var = (1.0 - m) * params.running_var + m * (var.data + params.eps)
    else:
        xhat = (x - params.running_mean) * (1.0 / np.sqrt(params.running_var))
    return xhat * params.scale + params.shift


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of integer ``labels`` under ``logits``."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    if z.ndim != 2 or z.shape[0] != len(labels):
        raise DimensionError(f"logits {z.shape} do not match {len(labels)} labels")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    n = len(labels)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def back(g):
        probs = np.exp(logp)
        probs[rows, labels] -= 1.0
        return (g * probs / n,)

    return _make(np.asarray(loss), (logits,), back)


def mse_loss(pred, target):
    pred = _as_tensor(pred)
    diff = pred - np.asarray(target, dtype=np.float64).reshape(pred.shape)
    return (diff * diff).mean()


def _topo_order(root):
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
    return order


def backward(loss):
    """Populate ``.grad`` on every tape-connected tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to the tape")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def grad_check(f, x, h=1e-5):
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``x`` is a tensor or a list of tensors; ``f(x)`` must return a scalar
    tensor. Every coordinate of every tensor in ``x`` is perturbed.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    backward(f(x))
    analytic = [t.grad.copy() for t in xs]
    worst = 0.0
    with no_grad():
        for t, ana in zip(xs, analytic):
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = f(x).item()
                flat[i] = orig - h
                down = f(x).item()
                flat[i] = orig
                num = (up - down) / (2.0 * h)
                a = ana.reshape(-1)[i]
                worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst
