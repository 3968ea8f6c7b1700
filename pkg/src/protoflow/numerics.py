"""Dense float64 tensors with a reverse-mode tape, plus Adam.

Operations record onto the innermost active :class:`Tape` (``with Tape() as tape``).
Outside a tape nothing is recorded, which is how evaluation runs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

NLL_CLAMP = 1e-30
counters = {"nll_clamped": 0}

_ACTIVE_TAPES: list["Tape"] = []


class DimensionError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_leaf")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._leaf = True

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Op:
    out: Tensor
    inputs: tuple
    backward: object
    kind: str


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.ops: list[_Op] = []

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.pop()
        return False

    def __len__(self):
        return len(self.ops)

    def record(self, out, inputs, backward, kind):
        self.ops.append(_Op(out, inputs, backward, kind))


def _emit(data, inputs, backward, kind):
    out = Tensor(data)
    out._leaf = False
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        if _ACTIVE_TAPES:
            _ACTIVE_TAPES[-1].record(out, inputs, backward, kind)
    return out


def backward(loss, tape):
    """Populate ``.grad`` of every leaf reachable from scalar ``loss``.

    Leaf grads accumulate across calls; intermediate grads are discarded.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.ops or not any(op.out is loss for op in tape.ops):
        if loss._leaf and loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
            return
        raise ValueError("loss was not recorded on this tape")
    pending = {id(loss): np.ones_like(loss.data)}
    for op in reversed(tape.ops):
        g = pending.pop(id(op.out), None)
        if g is None:
            continue
        for t, gi in zip(op.inputs, op.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._leaf:
                _accumulate(t, gi)
            else:
                prev = pending.get(id(t))
                pending[id(t)] = gi if prev is None else prev + gi


def _accumulate(t, g):
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return (g @ B.T if a.requires_grad else None,
                A.T @ g if b.requires_grad else None)

    return _emit(A @ B, (a, b), bw, "matmul")


def _check_broadcast(a, b):
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    if shape != a.shape and shape != b.shape:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}")
    return shape


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    _check_broadcast(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    _check_broadcast(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _emit(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    _check_broadcast(a, b)
    A, B = a.data, b.data

    def bw(g):
        return _unbroadcast(g * B, a.shape), _unbroadcast(g * A, b.shape)

    return _emit(A * B, (a, b), bw, "mul")


def scale(a, c):
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,), "scale")


def neg(a):
    return _emit(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,), "exp")


def elementwise(a, kind, b=None):
    """Dispatch by name: add, sub, mul, scale, exp, neg."""
    if kind in ("add", "sub", "mul"):
        return {"add": add, "sub": sub, "mul": mul}[kind](a, _wrap(b))
    if kind == "scale":
        return scale(a, b)
    if kind == "exp":
        return exp(a)
    if kind == "neg":
        return neg(a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def sum_all(a):
    shape = a.shape
    return _emit(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),), "sum")


def sum_squares(a):
    A = a.data
    return _emit(np.array(np.sum(A * A)), (a,), lambda g: (2.0 * g * A,), "sum_squares")


# ---------------------------------------------------------------- nonlinearities


def leaky_relu(a, slope=0.2):
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    x = a.data
    out = np.maximum(x, slope * x)

    def bw(g):
        return (np.where(x >= 0, g, slope * g),)

    return _emit(out, (a,), bw, "leaky_relu")


def elu(a):
    x = a.data
    e = np.expm1(np.minimum(x, 0.0))
    out = np.maximum(x, 0.0)
    out += e
    # e vanishes for x > 0, so e + 1 is the derivative on both branches
    return _emit(out, (a,), lambda g: (g * (e + 1.0),), "elu")


def softmax_rows(a):
    x = a.data
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got {a.shape}")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _emit(s, (a,), bw, "softmax_rows")


# ---------------------------------------------------------------- indexing / segments


def gather_rows(a, index):
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]

    def bw(g):
        _, S = _segment_matrix(index, n)
        return (np.asarray(S @ g.reshape(g.shape[0], -1)).reshape((n,) + g.shape[1:]),)

    return _emit(a.data[index], (a,), bw, "gather_rows")


def _segment_matrix(segments, num_segments):
    seg = np.asarray(segments, dtype=np.int64)
    if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
        raise IndexError(f"segment index outside [0, {num_segments})")
    ones = np.ones(seg.size)
    return seg, sp.csr_matrix((ones, (seg, np.arange(seg.size))), shape=(num_segments, seg.size))


def segment_sum(x, segments, num_segments):
    seg, S = _segment_matrix(segments, num_segments)
    return _emit(np.asarray(S @ x.data), (x,), lambda g: (g[seg],), "segment_sum")


def segment_mean(h, segments, num_segments):
    seg, S = _segment_matrix(segments, num_segments)
    counts = np.bincount(seg, minlength=num_segments).astype(np.float64)
    if np.any(counts == 0):
        empty = int(np.flatnonzero(counts == 0)[0])
        raise ValueError(f"segment {empty} is empty")
    out = np.asarray(S @ h.data) / counts[:, None]
    return _emit(out, (h,), lambda g: ((g / counts[:, None])[seg],), "segment_mean")


def segment_softmax(scores, segments, num_segments):
    """Softmax of a column of scores within each segment (e.g. incoming edges)."""
    seg = np.asarray(segments, dtype=np.int64)
    s = scores.data.reshape(-1)
    m = np.full(num_segments, -np.inf)
    np.maximum.at(m, seg, s)
    e = np.exp(s - m[seg])
    denom = np.bincount(seg, weights=e, minlength=num_segments)
    out = e / denom[seg]
    shape = scores.shape

    def bw(g):
        g = g.reshape(-1)
        dot = np.bincount(seg, weights=g * out, minlength=num_segments)
        return ((out * (g - dot[seg])).reshape(shape),)

    return _emit(out.reshape(shape), (scores,), bw, "segment_softmax")


def pairwise_distance(z, p):
    """Euclidean distances between rows of z [B×d] and rows of p [M×d]."""
    if z.data.ndim != 2 or p.data.ndim != 2 or z.shape[1] != p.shape[1]:
        raise DimensionError(f"pairwise_distance shape mismatch: {z.shape} vs {p.shape}")
    Z, P = z.data, p.data
    diff = Z[:, None, :] - P[None, :, :]
    D = np.sqrt(np.einsum("bmd,bmd->bm", diff, diff))

    def bw(g):
        # d‖z-p‖/dz undefined at 0; take the zero subgradient there
        W = np.divide(g, D, out=np.zeros_like(D), where=D > 0)
        gz = W.sum(axis=1)[:, None] * Z - W @ P if z.requires_grad else None
        gp = W.sum(axis=0)[:, None] * P - W.T @ Z if p.requires_grad else None
        return gz, gp

    return _emit(D, (z, p), bw, "pairwise_distance")


# ---------------------------------------------------------------- losses


def mse_loss(pred, target):
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        d = 2.0 * g * diff / n
        return d, -d

    return _emit(np.array(np.mean(diff * diff)), (pred, target), bw, "mse")


def nll_from_probs(probs, labels):
    P = probs.data
    labels = np.asarray(labels, dtype=np.int64)
    if P.ndim != 2 or labels.shape != (P.shape[0],):
        raise DimensionError(f"nll_from_probs: probs {probs.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= P.shape[1]):
        raise IndexError("label outside [0, C)")
    rows = np.arange(P.shape[0])
    picked = P[rows, labels]
    clamped = picked < NLL_CLAMP
    if np.any(clamped):
        counters["nll_clamped"] += int(clamped.sum())
        log.warning("nll_from_probs: clamped %d probabilities at %g", clamped.sum(), NLL_CLAMP)
        picked = np.maximum(picked, NLL_CLAMP)
    B = P.shape[0]

    def bw(g):
        out = np.zeros_like(P)
        # the clamp is flat, so clamped entries carry no gradient
        out[rows, labels] = np.where(clamped, 0.0, -g / (B * picked))
        return (out,)

    return _emit(np.array(-np.log(picked).sum() / B), (probs,), bw, "nll")


# ---------------------------------------------------------------- optimizer


def step_lr(base_lr, epoch, step_epochs=20, gamma=0.5):
    return base_lr * gamma ** (epoch // step_epochs)


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_epochs: int = 20
    gamma: float = 0.5
    t: int = 0
    epoch: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @property
    def current_lr(self):
        return step_lr(self.lr, self.epoch, self.step_epochs, self.gamma)


def adam_step(params, state):
    """One bias-corrected Adam update; clears every parameter's grad afterwards."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter {p.name or i!r} has no gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    lr = state.current_lr
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None


def numeric_grad(f, x, h=1e-6):
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_error(a, b):
    """Max-abs deviation scaled by the larger max-abs magnitude of the two arrays."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if not a.size:
        return 0.0
    scale_ = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale_)


__all__ = [
    "Tensor", "Tape", "AdamState", "DimensionError", "backward", "matmul", "add", "sub",
    "mul", "scale", "neg", "exp", "elementwise", "sum_all", "sum_squares", "leaky_relu",
    "elu", "softmax_rows", "gather_rows", "segment_sum", "segment_mean", "segment_softmax",
    "pairwise_distance", "mse_loss", "nll_from_probs", "adam_step", "step_lr",
    "numeric_grad", "rel_error", "counters",
]
