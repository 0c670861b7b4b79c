"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Each differentiable op returns a :class:`Tensor` carrying a :class:`Node`
that records its inputs and a backward closure. :func:`backward` sorts the
graph reachable from a scalar loss topologically and visits every node
exactly once in reverse order. Only leaf tensors with ``requires_grad``
receive a ``.grad`` array; intermediate gradients live in a local table.

Broadcasting is deliberately absent except for the bias add in
:func:`affine`.
"""
import contextlib
import math

import numpy as np

from siamxd import kernels


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class GradCheckError(RuntimeError):
    """Finite-difference checking hit a non-finite loss."""


_GRAD_ENABLED = True

# Set by the test suite; checks every forward result for NaN/Inf.
CHECK_FINITE = False


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording graph nodes."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Node:
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op, inputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """Dense float64 array that may participate in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, op, inputs, backward_fn):
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor(data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward_fn)
    return out


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# --- elementwise arithmetic -------------------------------------------------

def add(a, b):
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        return _result(a.data + float(b), "add_scalar", (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return add(b, a)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    if not isinstance(a, Tensor):
        return _result(float(a) - b.data, "rsub_scalar", (b,), lambda g: (-g,))
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a, b):
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data * c, "mul_scalar", (a,), lambda g: (g * c,))
    if not isinstance(a, Tensor):
        return mul(b, a)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


# Reductions use math.fsum: correctly rounded, hence independent of element order.

def sum(x):  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _result(np.array(math.fsum(x.data.ravel())), "sum", (x,), lambda g: (np.full(shape, float(g)),))


def mean(x):
    n = x.size
    if n == 0:
        raise ContractError("mean of an empty tensor")
    shape = x.shape
    return _result(np.array(math.fsum(x.data.ravel()) / n), "mean", (x,), lambda g: (np.full(shape, float(g) / n),))


def reshape(x, shape):
    old = x.shape
    return _result(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def take_rows(x, idx):
    """Select rows ``x[idx]``; gradient scatters back with accumulation."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _result(x.data[idx], "take_rows", (x,), bw)


# --- layers and nonlinearities ----------------------------------------------

def affine(x, W, b):
    """Fully connected layer ``x @ W + b`` for x of shape [B, I]."""
    if x.data.ndim != 2 or W.data.ndim != 2 or b.data.ndim != 1:
        raise DimensionError(f"affine expects x[B,I], W[I,O], b[O]; got {x.shape}, {W.shape}, {b.shape}")
    if x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise DimensionError(f"affine: x {x.shape} incompatible with W {W.shape} / b {b.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd + b.data

    def bw(g):
        return g @ Wd.T, xd.T @ g, g.sum(axis=0)

    return _result(out, "affine", (x, W, b), bw)


def relu(x):
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


_TINY = np.nextafter(0.0, 1.0)
_ONE_MINUS = np.nextafter(1.0, 0.0)


def sigmoid(x):
    z = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # keep strictly inside (0, 1) where float64 would round to an endpoint
    out = np.clip(out, _TINY, _ONE_MINUS)
    return _result(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def log(x, lo=1e-12, hi=None):
    """Natural log of ``x`` clamped to ``[lo, hi]``; zero gradient where clamped."""
    d = x.data
    upper = np.inf if hi is None else hi
    clamped = np.clip(d, lo, upper)
    inside = (d >= lo) & (d <= upper)
    return _result(np.log(clamped), "log", (x,), lambda g: (np.where(inside, g / clamped, 0.0),))


def minimum(x, c):
    """Elementwise ``min(x, c)`` against a constant; subgradient 0 at ties."""
    c = float(c)
    keep = x.data < c
    return _result(np.where(keep, x.data, c), "minimum", (x,), lambda g: (g * keep,))


def square(x):
    d = x.data
    return _result(d * d, "square", (x,), lambda g: (2.0 * d * g,))


def pairwise_euclidean(A, B):
    """Matrix of Euclidean distances between rows of A[M,D] and B[N,D]."""
    if A.data.ndim != 2 or B.data.ndim != 2:
        raise DimensionError(f"pairwise_euclidean expects 2-D inputs, got {A.shape} and {B.shape}")
    if A.shape[1] != B.shape[1]:
        raise DimensionError(f"pairwise_euclidean: feature dims differ, {A.shape} vs {B.shape}")
    if A.shape[0] < 1 or B.shape[0] < 1:
        raise ContractError(f"pairwise_euclidean needs nonempty inputs, got {A.shape} and {B.shape}")
    Ad, Bd = A.data, B.data
    dist = kernels.pairwise_distances(Ad, Bd)
    return _result(dist, "pairwise_euclidean", (A, B),
                   lambda g: kernels.pairwise_distances_backward(Ad, Bd, dist, g))


def conv2d(x, w):
    """Stride-1 valid cross-correlation; x[B,C,H,W], w[O,C,k,k] -> [B,O,H-k+1,W-k+1]."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D x and w, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input channels {x.shape} vs kernel {w.shape}")
    if w.shape[2] > x.shape[2] or w.shape[3] > x.shape[3]:
        raise DimensionError(f"conv2d: kernel {w.shape} larger than input {x.shape}")
    xd, wd = x.data, w.data
    out = kernels.conv2d_forward(xd, wd)
    return _result(out, "conv2d", (x, w), lambda g: kernels.conv2d_backward(xd, wd, g))


def add_channel_bias(x, b):
    """Add b[C] to every spatial position of x[B,C,H,W]."""
    if x.data.ndim != 4 or b.shape != (x.shape[1],):
        raise DimensionError(f"channel bias {b.shape} does not match {x.shape}")
    return _result(x.data + b.data[None, :, None, None], "channel_bias", (x, b),
                   lambda g: (g, g.sum(axis=(0, 2, 3))))


# --- backward pass ------------------------------------------------------------

def topological_order(root):
    """Nodes-bearing tensors reachable from ``root``, inputs before outputs."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss, params=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    ``params``, when given, have their gradients initialised to exact zeros
    first, so parameters the loss does not depend on end up with zero rather
    than ``None``.
    """
    if loss.data.shape not in ((), (1,)):
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(topological_order(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t.node.inputs, t.node.backward_fn(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# --- finite-difference checking ----------------------------------------------

def numerical_grad(f, params, eps=1e-5):
    """Central-difference gradient of scalar ``f()`` w.r.t. each param's data."""
    out = []
    for pi, p in enumerate(params):
        g = np.zeros_like(p.data)
        flat, gflat = p.data.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = float(f().data)
            flat[i] = orig - eps
            with no_grad():
                fm = float(f().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                coord = tuple(int(c) for c in np.unravel_index(i, p.shape))
                raise GradCheckError(f"non-finite loss perturbing param {p.name or pi} at {coord}")
            gflat[i] = (fp - fm) / (2.0 * eps)
        out.append(g)
    return out


def grad_check(f, params, eps=1e-5):
    """Largest relative disagreement between analytic and numeric gradients.

    The relative error of one entry is
    ``|a - n| / max(1e-12, |a| + |n|)``.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    for p in params:
        p.grad = None
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise GradCheckError(f"non-finite loss {loss.data} at the unperturbed point")
    backward(loss, params)
    analytic = [p.grad.copy() for p in params]
    numeric = numerical_grad(f, params, eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        rel = np.abs(a - n) / np.maximum(1e-12, np.abs(a) + np.abs(n))
        if rel.size:
            worst = max(worst, float(rel.max()))
    return worst
