"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a backward closure; ``backward`` walks the
recorded graph once in reverse topological order and accumulates gradients into
``Tensor.grad``. Gradients add across uses of a tensor, so callers zero them
explicitly between steps.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import erf

from .errors import DimensionError, InvalidHyperparameterError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference and benchmarking)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled():
    return _GRAD_ENABLED


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    """A float64 array plus an accumulated gradient of the same shape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self._grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = ""

    # ---- basic accessors -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def values(self):
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    @property
    def grad(self):
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    def zero_grad(self):
        self._grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # ---- graph construction ----------------------------------------------

    @staticmethod
    def _make(data, parents, backward, op):
        out = Tensor.__new__(Tensor)
        out.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        out._grad = None
        out.requires_grad = False
        out.name = None
        out._parents = ()
        out._backward = None
        out._op = ""
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
            out._op = op
        return out

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable ``requires_grad`` tensor."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() needs a scalar output, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        # intermediate grads live only for this pass; leaves keep accumulating
        pending = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in pending:
                    pending[id(parent)] = pending[id(parent)] + pg
                else:
                    pending[id(parent)] = pg

    # ---- arithmetic ------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        try:
            data = a.data + b.data
        except ValueError:
            raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from None
        return Tensor._make(
            data,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        try:
            data = a.data - b.data
        except ValueError:
            raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}") from None
        return Tensor._make(
            data,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
            "sub",
        )

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __neg__(self):
        return self * -1.0

    def __mul__(self, other):
        if np.isscalar(other):
            c = float(other)
            return Tensor._make(self.data * c, (self,), lambda g: (g * c,), "scalar_mul")
        other = _as_tensor(other)
        a, b = self, other
        try:
            data = a.data * b.data
        except ValueError:
            raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from None
        return Tensor._make(
            data,
            (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return self * (1.0 / float(other))
        other = _as_tensor(other)
        a, b = self, other
        data = a.data / b.data
        return Tensor._make(
            data,
            (a, b),
            lambda g: (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            ),
            "div",
        )

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        a = self

        def bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(a.data[idx], (a,), bw, "getitem")

    # ---- shape ops -------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._make(
            a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape"
        )

    def transpose(self):
        """Swap the last two axes."""
        a = self
        return Tensor._make(
            np.swapaxes(a.data, -1, -2),
            (a,),
            lambda g: (np.swapaxes(g, -1, -2),),
            "transpose",
        )

    @property
    def T(self):
        return self.transpose()

    def sum(self, axis=None, keepdims=False):
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


# ---- free functions -------------------------------------------------------


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def matmul(a, b):
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # one GEMM over flattened rows instead of a stack of tiny products
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        data = (a2 @ b.data).reshape(lead + (b.shape[-1],))

        def bw_flat(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return Tensor._make(data, (a, b), bw_flat, "matmul")
    data = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return Tensor._make(data, (a, b), bw, "matmul")


def add(a, b):
    return _as_tensor(a) + b


def sub(a, b):
    return _as_tensor(a) - b


def scalar_mul(a, c):
    return _as_tensor(a) * float(c)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a):
    """Exact gelu, x * Phi(x)."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return Tensor._make(x * cdf, (a,), bw, "gelu")


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = _as_tensor(a)
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def mean(a, axis=None, keepdims=False):
    return _as_tensor(a).mean(axis=axis, keepdims=keepdims)


def take(a, idx):
    """Rows of ``a`` selected by an integer index array (a gather along axis 0)."""
    idx = np.asarray(idx, dtype=np.int64)
    return _as_tensor(a)[idx]


def softmax(v, tau=1.0, axis=-1):
    """Temperature softmax ``exp(v/tau) / sum exp(v/tau)`` along ``axis``."""
    if not tau > 0:
        raise InvalidHyperparameterError(f"temperature must be positive, got {tau}")
    v = _as_tensor(v)
    z = v.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner) / tau,)

    return Tensor._make(out, (v,), bw, "softmax")


def softmax_with_temperature(v, tau):
    return softmax(v, tau=tau, axis=-1)


def layer_norm(a, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    a = _as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return Tensor._make(y, (a,), bw, "layer_norm")


def cross_entropy(logits, labels):
    """Mean negative log-softmax of the true class over the batch."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"cross_entropy expects [batch x C] logits and [batch] labels, "
            f"got {logits.shape} and {labels.shape}"
        )
    n, c = logits.shape
    if n == 0:
        raise DimensionError("cross_entropy on an empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - z[rows, labels]))

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return Tensor._make(np.array(loss), (logits,), bw, "cross_entropy")


def finite_diff_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x`` (perturbed in place, restored)."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    arr = x.data if isinstance(x, Tensor) else x
    flat = arr.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(_scalar(f(x)))
        flat[i] = orig - eps
        fm = float(_scalar(f(x)))
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(arr.shape)


def _scalar(v):
    if isinstance(v, Tensor):
        return v.data.reshape(-1)[0]
    return np.asarray(v).reshape(-1)[0]
