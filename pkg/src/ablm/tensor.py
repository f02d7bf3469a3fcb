"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is exactly what a small transformer encoder needs: elementwise
arithmetic with numpy-style broadcasting, matrix products (optionally
batched over leading axes), reductions, gather/embedding lookup, softmax,
layer normalization, GELU, rotary rotation, and the two loss primitives
(cross-entropy with ignore labels, binary cross-entropy on logits).

The computation record is the implicit DAG of parent links built as ops
execute; ``backward`` linearizes it in reverse topological order, so every
op's inputs are visited after the op itself. Gradients are accumulated
functionally (never in place), which makes aliasing between saved
activations and gradient buffers impossible.

All data is stored row-major as ``numpy.float64``. Every op checks its
output for NaN/Inf (see ``CHECK_FINITE``) and raises instead of letting a
non-finite value propagate through training.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

# Label value excluded from cross-entropy, shared package-wide.
IGNORE_LABEL = -100

# When True (default), every op validates that its output is finite.
CHECK_FINITE = True

_GRAD_ENABLED = True

# Constants of the tanh GELU approximation. Fixed here so that every code
# path (forward, backward, test oracles) agrees bit-for-bit.
GELU_COEFF = 0.044715
GELU_SCALE = 0.7978845608028654  # sqrt(2/pi)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation-only forwards)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense float64 array plus an optional autodiff node.

    ``grad`` is populated by ``backward`` and has the same shape as
    ``data``. Tensors created under ``no_grad`` or from constants carry no
    parents and behave as leaves.
    """

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._op = "leaf"

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, grad={'set' if self.grad is not None else 'none'})"

    # -- autodiff ------------------------------------------------------------

    def backward(self, params=None):
        """Reverse-mode accumulation from a scalar loss.

        Populates ``grad`` on every tensor reachable from this one. When
        ``params`` is given, any listed tensor left unreached gets an
        explicit zero gradient (a leaf off the loss path contributes
        nothing but must still look "computed" to the optimizer).
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.data.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is None or node.grad is None:
                continue
            grads = node._backward_fn(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

        if params is not None:
            for p in params:
                if p.requires_grad and p.grad is None:
                    p.grad = np.zeros_like(p.data)

    # -- operator sugar -------------------------------------------------------

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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


# ---------------------------------------------------------------------------
# Graph construction helpers
# ---------------------------------------------------------------------------


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _trace(out_data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
        out._op = op
    else:
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting introduced."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if squeeze:
        g = g.sum(axis=squeeze, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _trace(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _trace(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _trace(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _trace(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _trace(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out = a.data**p

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _trace(out, (a,), bw, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _trace(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _trace(out, (a,), lambda g: (g / a.data,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _trace(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_stable(a.data)
    return _trace(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    out = np.abs(a.data)
    return _trace(out, (a,), lambda g: (g * np.sign(a.data),), "abs")


def gelu(a) -> Tensor:
    """GELU, tanh approximation with the constants fixed at module level."""
    a = as_tensor(a)
    x = a.data
    inner = GELU_SCALE * (x + GELU_COEFF * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        d_inner = GELU_SCALE * (1.0 + 3.0 * GELU_COEFF * x * x)
        dydx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        return (g * dydx,)

    return _trace(out, (a,), bw, "gelu")


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.data.shape
    out = a.data.reshape(shape)
    return _trace(out, (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _trace(out, (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _trace(out, tuple(ts), bw, "concat")


def getitem(a, idx) -> Tensor:
    """Basic indexing only (ints/slices/ellipsis); gathers use index_select."""
    a = as_tensor(a)
    out = a.data[idx]

    def bw(g):
        z = np.zeros_like(a.data)
        z[idx] += g
        return (z,)

    return _trace(np.array(out, copy=True), (a,), bw, "getitem")


def index_select(a, indices, axis: int = 0) -> Tensor:
    """Gather rows along ``axis`` by an integer array; repeats allowed."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    out = np.take(a.data, indices, axis=axis)

    def bw(g):
        z = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(z, indices, g)
        else:
            zm = np.moveaxis(z, axis, 0)
            np.add.at(zm, indices, np.moveaxis(g, axis, 0))
        return (z,)

    return _trace(out, (a,), bw, "index_select")


def embedding(weight, ids) -> Tensor:
    """Row lookup ``weight[ids]`` for an integer id array of any shape."""
    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= weight.data.shape[0]):
        raise IndexError("embedding id out of range")
    flat = ids.ravel()
    out = weight.data[flat].reshape(ids.shape + (weight.data.shape[1],))

    def bw(g):
        z = np.zeros_like(weight.data)
        np.add.at(z, flat, g.reshape(-1, weight.data.shape[1]))
        return (z,)

    return _trace(out, (weight,), bw, "embedding")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    if not keepdims:
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tensor_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        return (_expand_reduced(g, a.data.shape, axis, keepdims) * np.ones(1),)

    return _trace(np.asarray(out), (a,), bw, "sum")


def tensor_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[ax] for ax in axes]))

    def bw(g):
        return (_expand_reduced(g, a.data.shape, axis, keepdims) / n,)

    return _trace(np.asarray(out), (a,), bw, "mean")


# ---------------------------------------------------------------------------
# Matrix product
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a @ b`` for operands of ndim >= 2; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    out = a.data @ b.data

    def bw(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        return ga, gb

    return _trace(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# Normalization and attention primitives
# ---------------------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if np.isnan(a.data).any():
        raise FloatingPointError("softmax received NaN input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _trace(out, (a,), bw, "softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    h = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def bw(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (dxhat - m1 - xhat * m2)
        red = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=red).reshape(gamma.data.shape)
        gbeta = g.sum(axis=red).reshape(beta.data.shape)
        return gx, ggamma, gbeta

    del h
    return _trace(out, (x, gamma, beta), bw, "layer_norm")


def rope_rotate(x, positions) -> Tensor:
    """Rotary position embedding on the last axis of ``[..., L, d_head]``.

    Coordinate pair (2k, 2k+1) is rotated by angle ``pos * theta_k`` with
    ``theta_k = 10000 ** (-2k / d_head)``. The rotation is orthogonal, so
    the backward pass is the inverse rotation applied to the gradient.
    """
    x = as_tensor(x)
    d = x.data.shape[-1]
    if d % 2 != 0:
        raise ValueError(f"rotary embedding needs an even head dimension, got {d}")
    seq_len = x.data.shape[-2]
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (seq_len,):
        raise ValueError("positions must have one entry per sequence position")

    half = d // 2
    theta = 10000.0 ** (-2.0 * np.arange(half) / d)
    ang = positions[:, None] * theta[None, :]
    cos, sin = np.cos(ang), np.sin(ang)

    xe, xo = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def bw(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    return _trace(out, (x,), bw, "rope")


def dropout(x, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when ``p == 0``."""
    x = as_tensor(x)
    if p <= 0.0:
        return x
    if p >= 1.0:
        raise ValueError("dropout rate must be < 1")
    keep = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def cross_entropy(logits, labels, ignore_index: int = IGNORE_LABEL) -> Tensor:
    """Mean negative log-softmax probability over non-ignored rows.

    ``logits`` is [N, V]; ``labels`` is an integer vector with
    ``ignore_index`` marking rows excluded from the loss. The number of
    counted rows is exposed as ``out.n_items`` (0 means the loss is a
    flagged zero, not a trained value).
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ValueError("cross_entropy expects [N, V] logits")
    n_rows, n_classes = logits.data.shape
    if labels.shape != (n_rows,):
        raise ValueError("labels must align with logits rows")
    counted = labels != ignore_index
    if counted.any():
        lab = labels[counted]
        if lab.min() < 0 or lab.max() >= n_classes:
            raise ValueError("label id outside [0, V)")
    n = int(counted.sum())
    if n == 0:
        out = _trace(np.zeros(()), (logits,), lambda g: (np.zeros_like(logits.data),), "cross_entropy")
        out.n_items = 0
        return out

    z = logits.data[counted]
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    picked = z[np.arange(n), labels[counted]]
    val = (lse - picked).sum() / n

    def bw(g):
        p = np.exp(z - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels[counted]] -= 1.0
        gz = np.zeros_like(logits.data)
        gz[counted] = p * (float(g) / n)
        return (gz,)

    out = _trace(np.asarray(val), (logits,), bw, "cross_entropy")
    out.n_items = n
    return out


def bce_with_logits(logits, targets) -> Tensor:
    """Numerically stable mean binary cross-entropy on raw logits."""
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    z = logits.data
    if y.shape != z.shape:
        raise ValueError("targets must match logits shape")
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    val = per.mean()
    n = z.size

    def bw(g):
        return ((_sigmoid_stable(z) - y) * (float(g) / n),)

    return _trace(np.asarray(val), (logits,), bw, "bce_with_logits")


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_index: tuple
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return f"grad_check {status}: max rel err {self.max_rel_err:.3e} at {self.worst_index}"


def grad_check(f, x, step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare ``backward`` gradients of scalar-valued ``f`` against central
    finite differences, coordinate by coordinate."""
    base = np.array(x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    if out.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = xt.grad.copy() if xt.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    work = base.copy()
    flat = work.ravel()
    nflat = numeric.ravel()
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(Tensor(work)).data)
            flat[i] = orig - step
            fm = float(f(Tensor(work)).data)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    rel = np.abs(analytic - numeric) / denom
    worst_flat = int(np.argmax(rel))
    worst = np.unravel_index(worst_flat, base.shape) if base.ndim else ()
    max_rel = float(rel.ravel()[worst_flat]) if rel.size else 0.0
    return GradCheckReport(max_rel, worst, max_rel <= tol, analytic, numeric)
