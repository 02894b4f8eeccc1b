"""Dense float64 tensors with reverse-mode autodiff on a define-by-run tape.

The tape is rebuilt on every forward pass, which keeps variable-length limb
token sequences simple: no static graph, no shape caching. Outside a
``record()`` block every op is plain numpy (the rollout fast path).

Broadcasting is deliberately narrow: same-shape, scalar, trailing row vector,
and leading-batch matmul. Anything else raises.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEBUG_CHECKS = False  # enable in tests: asserts finite outputs after each op


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class MaskError(ValueError):
    """A softmax row was entirely -inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Tape:
    """Ordered record of executed primitives; append order is topological."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []


_ACTIVE: Tape | None = None


class record:
    """Context manager activating a fresh tape (or a provided one)."""

    def __init__(self, tape: Tape | None = None):
        self.tape = tape if tape is not None else Tape()
        self._prev = None

    def __enter__(self) -> Tape:
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = self.tape
        return self.tape

    def __exit__(self, *exc):
        global _ACTIVE
        _ACTIVE = self._prev
        return False


class no_grad(record):
    def __init__(self):
        super().__init__(None)
        self.tape = None

    def __enter__(self):
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = None
        return None


def _accum(t: Tensor, g, own: bool = False):
    """Add g into t.grad. own=True transfers the buffer: the caller guarantees
    g is freshly computed (or the node's already-consumed output gradient) and
    not simultaneously handed to another tensor."""
    if t.grad is None:
        if own and isinstance(g, np.ndarray) and g.flags.writeable and g.dtype == np.float64:
            t.grad = g
        else:
            t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _out(data, track: bool, bwd=None) -> Tensor:
    if DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise ContractError("non-finite values produced by a forward op")
    rec = track and _ACTIVE is not None
    t = Tensor(data, requires_grad=rec)
    if rec and bwd is not None:
        _ACTIVE.nodes.append((t, bwd))
    return t


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate .grad for every requires_grad tensor reachable from loss."""
    if loss.data.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    tp = tape if tape is not None else _ACTIVE
    if tp is None:
        raise ContractError("backward called with no active tape")
    loss.grad = np.ones((), dtype=np.float64)
    for out, bwd in reversed(tp.nodes):
        if out.grad is not None:
            bwd(out.grad)


# ---------------------------------------------------------------------------
# Elementwise / arithmetic primitives
# ---------------------------------------------------------------------------

def _rowwise_ok(a_shape, b_shape):
    return len(b_shape) == 1 and len(a_shape) >= 1 and a_shape[-1] == b_shape[0]


def _reduce_to(g, shape):
    """Sum g down to `shape` (same shape, scalar, or trailing row vector)."""
    if g.shape == tuple(shape):
        return g
    if shape == ():
        return g.sum()
    axes = tuple(range(g.ndim - len(shape)))
    return g.sum(axis=axes) if axes else g


def add(a: Tensor, b: Tensor) -> Tensor:
    if not (a.shape == b.shape or b.shape == () or _rowwise_ok(a.shape, b.shape)):
        raise ShapeError(f"add: incompatible shapes {a.shape} vs {b.shape}")
    track = a.requires_grad or b.requires_grad

    def bwd(g):
        if b.requires_grad:
            gb = _reduce_to(g, b.shape)
            _accum(b, gb, own=gb is not g)
        if a.requires_grad:
            _accum(a, g, own=True)

    return _out(a.data + b.data, track, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if not (a.shape == b.shape or b.shape == () or _rowwise_ok(a.shape, b.shape)):
        raise ShapeError(f"sub: incompatible shapes {a.shape} vs {b.shape}")
    track = a.requires_grad or b.requires_grad

    def bwd(g):
        if b.requires_grad:
            _accum(b, -_reduce_to(g, b.shape), own=True)
        if a.requires_grad:
            _accum(a, g, own=True)

    return _out(a.data - b.data, track, bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            _accum(a, -g, own=True)

    return _out(-a.data, a.requires_grad, bwd)


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        c = float(b)

        def bwd_s(g):
            if a.requires_grad:
                _accum(a, g * c, own=True)

        return _out(a.data * c, a.requires_grad, bwd_s)
    if not (a.shape == b.shape or b.shape == () or _rowwise_ok(a.shape, b.shape)):
        raise ShapeError(f"mul: incompatible shapes {a.shape} vs {b.shape}")
    track = a.requires_grad or b.requires_grad
    ad, bd = a.data, b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * bd, own=True)
        if b.requires_grad:
            _accum(b, _reduce_to(g * ad, b.shape), own=True)

    return _out(ad * bd, track, bwd)


def add_const(a: Tensor, arr) -> Tensor:
    """a + numpy-broadcastable constant (no gradient to the constant)."""
    data = a.data + arr
    if data.shape != a.shape:
        raise ShapeError("add_const must not change the tensor shape")

    def bwd(g):
        if a.requires_grad:
            _accum(a, g, own=True)

    return _out(data, a.requires_grad, bwd)


def square(a: Tensor) -> Tensor:
    ad = a.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, 2.0 * ad * g, own=True)

    return _out(ad * ad, a.requires_grad, bwd)


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * e, own=True)

    return _out(e, a.requires_grad, bwd)


def log(a: Tensor) -> Tensor:
    ad = a.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, g / ad, own=True)

    return _out(np.log(ad), a.requires_grad, bwd)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * inside, own=True)

    return _out(np.clip(a.data, lo, hi), a.requires_grad, bwd)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"minimum: shapes differ {a.shape} vs {b.shape}")
    pick_a = a.data <= b.data
    track = a.requires_grad or b.requires_grad

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * pick_a, own=True)
        if b.requires_grad:
            _accum(b, g * ~pick_a, own=True)

    return _out(np.minimum(a.data, b.data), track, bwd)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("matmul expects >=2-D operands")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ {ad.shape} vs {bd.shape}")
    if ad.ndim > 2 and bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ {ad.shape} vs {bd.shape}")
    track = a.requires_grad or b.requires_grad

    def bwd(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
            if ga.ndim > ad.ndim:  # b carried the batch dims
                ga = ga.sum(axis=tuple(range(ga.ndim - ad.ndim)))
            _accum(a, ga, own=True)
        if b.requires_grad:
            gb = np.swapaxes(ad, -1, -2) @ g
            if gb.ndim > bd.ndim:  # a carried the batch dims
                gb = gb.sum(axis=tuple(range(gb.ndim - bd.ndim)))
            _accum(b, gb, own=True)

    return _out(ad @ bd, track, bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for x (..., K), w (K, N), b (N,). Fused to keep the tape short."""
    xd, wd = x.data, w.data
    if xd.shape[-1] != wd.shape[0]:
        raise ShapeError(f"linear: {xd.shape} @ {wd.shape}")
    track = x.requires_grad or w.requires_grad or b.requires_grad
    data = xd @ wd + b.data

    def bwd(g):
        if x.requires_grad:
            _accum(x, g @ wd.T, own=True)
        if w.requires_grad:
            gf = g.reshape(-1, g.shape[-1])
            _accum(w, xd.reshape(-1, xd.shape[-1]).T @ gf, own=True)
        if b.requires_grad:
            _accum(b, g.reshape(-1, g.shape[-1]).sum(axis=0), own=True)

    return _out(data, track, bwd)


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------

def sum_(a: Tensor, axis=None) -> Tensor:
    ad = a.data

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            _accum(a, np.broadcast_to(g, ad.shape))  # read-only view: copied
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), ad.shape))

    return _out(ad.sum(axis=axis), a.requires_grad, bwd)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.full(a.data.shape, g / n), own=True)

    return _out(a.data.mean(), a.requires_grad, bwd)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def bwd(g):
        if a.requires_grad:
            _accum(a, g.reshape(old), own=True)

    return _out(a.data.reshape(shape), a.requires_grad, bwd)


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g.transpose(inv), own=True)

    return _out(np.ascontiguousarray(a.data.transpose(axes)), a.requires_grad, bwd)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)

    def bwd(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(np.swapaxes(ga, 0, axis), idx, np.swapaxes(g, 0, axis))
            _accum(a, ga, own=True)

    return _out(np.take(a.data, idx, axis=axis), a.requires_grad, bwd)


def take_along_last(a: Tensor, indices) -> Tensor:
    """a[..., indices] per row: a (..., K), indices (...) ints -> (...)."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.shape != a.data.shape[:-1]:
        raise ShapeError(f"take_along_last: index shape {idx.shape} vs {a.shape}")
    k = a.data.shape[-1]
    flat_idx = idx.reshape(-1)
    rows = np.arange(flat_idx.size)

    def bwd(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data).reshape(-1, k)
            ga[rows, flat_idx] = g.reshape(-1)
            _accum(a, ga.reshape(a.data.shape), own=True)

    data = a.data.reshape(-1, k)[rows, flat_idx].reshape(idx.shape)
    return _out(data, a.requires_grad, bwd)


def embedding(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)

    def bwd(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            _accum(table, gt, own=True)

    return _out(table.data[idx], table.requires_grad, bwd)


# ---------------------------------------------------------------------------
# Neural primitives
# ---------------------------------------------------------------------------

def silu(a: Tensor) -> Tensor:
    ad = a.data
    sig = 1.0 / (1.0 + np.exp(-ad))
    data = ad * sig

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * (sig * (1.0 + ad * (1.0 - sig))), own=True)

    return _out(data, a.requires_grad, bwd)


def _check_rows_finite_max(x):
    m = x.max(axis=-1, keepdims=True)
    if np.isneginf(m).any():
        raise MaskError("softmax row is entirely -inf")
    return m


def softmax_rows(a: Tensor) -> Tensor:
    ad = a.data
    m = _check_rows_finite_max(ad)
    e = np.exp(ad - m)  # exp(-inf) == 0 exactly, masked entries drop out
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            _accum(a, y * (g - (g * y).sum(axis=-1, keepdims=True)), own=True)

    return _out(y, a.requires_grad, bwd)


def log_softmax_rows(a: Tensor) -> Tensor:
    ad = a.data
    m = _check_rows_finite_max(ad)
    e = np.exp(ad - m)
    s = e.sum(axis=-1, keepdims=True)
    data = ad - (m + np.log(s))
    soft = e / s

    def bwd(g):
        if a.requires_grad:
            _accum(a, g - soft * g.sum(axis=-1, keepdims=True), own=True)

    return _out(data, a.requires_grad, bwd)


LN_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    track = x.requires_grad or gain.requires_grad or bias.requires_grad

    def bwd(g):
        if gain.requires_grad:
            _accum(gain, _reduce_to(g * xhat, gain.shape), own=True)
        if bias.requires_grad:
            gb = _reduce_to(g, bias.shape)
            _accum(bias, gb, own=gb is not g)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            _accum(x, gx, own=True)

    return _out(xhat * gain.data + bias.data, track, bwd)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(params, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    state.m = [np.zeros_like(p.data) for p in params]
    state.v = [np.zeros_like(p.data) for p in params]
    return state


def adam_step(params, grads, state: AdamState) -> None:
    """Bias-corrected Adam update in place. Caller clips gradients first."""
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def global_norm_clip(grads, max_norm: float) -> float:
    """Scale all gradients in place so the joint 2-norm is <= max_norm."""
    total = 0.0
    for g in grads:
        if g is not None:
            total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads:
            if g is not None:
                g *= scale
    return norm


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def init_uniform(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_zeros(shape) -> np.ndarray:
    return np.zeros(shape, dtype=np.float64)
