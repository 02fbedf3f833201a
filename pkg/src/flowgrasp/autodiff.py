"""Reverse-mode autodiff on numpy arrays.

Eager tape: every op computes its value immediately and records a backward
closure plus parent links. `backward(loss)` walks the graph once in reverse
topological order and accumulates gradients into `.grad`.

Two precision modes: "train" (float32) and "test" (float64). Finite-difference
checking is only reliable in float64, so tests switch to test mode.
"""

import math
from contextlib import contextmanager

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NumericError(ArithmeticError):
    """A tensor left the finite range (NaN/Inf), or a check could not run."""


class PrecisionError(RuntimeError):
    """Operation requires a precision mode that is not active."""


_DTYPES = {"train": np.float32, "test": np.float64}
_state = {"mode": "train", "check_finite": False, "no_grad": False}


@contextmanager
def no_grad():
    """Skip tape construction inside the block (inference fast path)."""
    prev = _state["no_grad"]
    _state["no_grad"] = True
    try:
        yield
    finally:
        _state["no_grad"] = prev


def set_mode(mode):
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision mode {mode!r}; expected train|test")
    _state["mode"] = mode


def get_mode():
    return _state["mode"]


def get_dtype():
    return _DTYPES[_state["mode"]]


@contextmanager
def use_mode(mode):
    prev = _state["mode"]
    set_mode(mode)
    try:
        yield
    finally:
        _state["mode"] = prev


def set_check_finite(flag):
    """Enable per-op finiteness assertions (slow; for tests/debugging)."""
    _state["check_finite"] = bool(flag)


class Tensor:
    """A numpy array plus an optional gradient accumulator and tape links."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=""):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=get_dtype())
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        """Leaf view of the same values; gradients stop here."""
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self):
        self.grad = None

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad,
                      name=self.name)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, name=""):
    """Constant leaf in the active precision."""
    return Tensor(np.asarray(data, dtype=get_dtype()), name=name)


def param(data, name=""):
    """Trainable leaf in the active precision."""
    return Tensor(np.asarray(data, dtype=get_dtype()), requires_grad=True, name=name)


def _wrap(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=get_dtype()))


def _make(out_data, parents, backward_fn, name=""):
    """Tape node constructor; drops links when no parent needs gradients."""
    out = Tensor(out_data, name=name)
    if _state["check_finite"] and not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite values produced by op {name or '?'}")
    if not _state["no_grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(p, g):
    if not p.requires_grad:
        return
    p.grad = g if p.grad is None else p.grad + g


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def toposort(root):
    """Reverse-mode visitation order: every grad-requiring node exactly once,
    parents before children."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable grad-requiring leaf."""
    if loss.data.size != 1:
        raise DimensionError("backward expects a scalar loss")
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("backward on non-finite loss")
    if not loss.requires_grad:
        return
    order = toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------- primitives


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bwd, "add")


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    out_data = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), bwd, "sub")


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bwd, "mul")


def scale(x, c):
    c = float(c)
    out_data = x.data * c

    def bwd(g):
        _accum(x, g * c)

    return _make(out_data, (x,), bwd, "scale")


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul wants 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), bwd, "matmul")


def transpose(x):
    out_data = x.data.T

    def bwd(g):
        _accum(x, g.T)

    return _make(out_data, (x,), bwd, "transpose")


def reshape(x, shape):
    orig = x.data.shape
    out_data = x.data.reshape(shape)

    def bwd(g):
        _accum(x, g.reshape(orig))

    return _make(out_data, (x,), bwd, "reshape")


def concat(parts, axis=0):
    parts = [_wrap(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def bwd(g):
        offset = 0
        for p, size in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + size)
            _accum(p, g[tuple(sl)])
            offset += size

    return _make(out_data, tuple(parts), bwd, "concat")


def narrow(x, axis, start, length):
    """Contiguous slice along one axis."""
    if start < 0 or start + length > x.data.shape[axis]:
        raise DimensionError(
            f"narrow [{start}:{start + length}] out of range for axis {axis} "
            f"of shape {x.data.shape}")
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out_data = x.data[sl]

    def bwd(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        _accum(x, full)

    return _make(out_data, (x,), bwd, "narrow")


def embedding(table, ids):
    """Row lookup; backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.data.shape[0]})")
    out_data = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _accum(table, gt)

    return _make(out_data, (table,), bwd, "embedding")


def sum_all(x):
    out_data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def bwd(g):
        _accum(x, np.broadcast_to(g, x.data.shape).astype(x.data.dtype))

    return _make(out_data, (x,), bwd, "sum")


def mean_all(x):
    n = x.data.size
    out_data = np.asarray(x.data.mean(), dtype=x.data.dtype)

    def bwd(g):
        _accum(x, np.broadcast_to(g / n, x.data.shape).astype(x.data.dtype))

    return _make(out_data, (x,), bwd, "mean")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh-approximation GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out_data = 0.5 * xd * (1.0 + t)

    def bwd(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        dx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t ** 2) * d_inner
        _accum(x, g * dx)

    return _make(out_data, (x,), bwd, "gelu")


def rmsnorm(x, gain, eps=1e-5):
    """y = x / sqrt(mean(x^2, -1) + eps) * gain, gain shaped (D,)."""
    xd = x.data
    n = xd.shape[-1]
    ms = (xd * xd).mean(axis=-1, keepdims=True) + eps
    inv = 1.0 / np.sqrt(ms)
    out_data = xd * inv * gain.data

    def bwd(g):
        gy = g * gain.data
        dot = (gy * xd).sum(axis=-1, keepdims=True)
        _accum(x, gy * inv - xd * (inv ** 3) * dot / n)
        axes = tuple(range(g.ndim - 1))
        _accum(gain, (g * xd * inv).sum(axis=axes))

    return _make(out_data, (x, gain), bwd, "rmsnorm")


def softmax(x):
    """Stable softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        _accum(x, p * (g - dot))

    return _make(p, (x,), bwd, "softmax")


def softmax_ce(logits, targets, mask):
    """Weighted-mean cross entropy: mean over mask-weighted positions of
    -log softmax(logits)[target]; all-zero mask yields loss 0 and zero grad.
    """
    ld = logits.data
    if ld.ndim != 2:
        raise DimensionError(f"softmax_ce wants (n, V) logits, got {ld.shape}")
    n, v = ld.shape
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=ld.dtype)
    if targets.shape != (n,) or mask.shape != (n,):
        raise DimensionError("softmax_ce targets/mask must be length n")
    if np.any(mask < 0):
        raise ValueError("softmax_ce mask weights must be nonnegative")
    if n and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"softmax_ce target outside [0, {v})")

    z = ld - ld.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    denom = mask.sum()
    if denom <= 0:
        out_data = np.asarray(0.0, dtype=ld.dtype)

        def bwd_zero(g):
            _accum(logits, np.zeros_like(ld))

        return _make(out_data, (logits,), bwd_zero, "softmax_ce")

    picked = logp[np.arange(n), targets]
    out_data = np.asarray(-(mask * picked).sum() / denom, dtype=ld.dtype)

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(n), targets] -= 1.0
        _accum(logits, g * p * (mask / denom)[:, None])

    return _make(out_data, (logits,), bwd, "softmax_ce")


def mse(pred, target):
    """Mean of squared elementwise differences."""
    target = _wrap(target)
    if pred.data.shape != target.data.shape:
        raise DimensionError(f"mse shape mismatch: {pred.data.shape} vs {target.data.shape}")
    diff = pred.data - target.data
    n = diff.size
    out_data = np.asarray((diff * diff).sum() / n, dtype=pred.data.dtype)

    def bwd(g):
        _accum(pred, g * 2.0 * diff / n)
        _accum(target, g * (-2.0) * diff / n)

    return _make(out_data, (pred, target), bwd, "mse")


def conv3x3(x, w, b, stride=2):
    """3x3 convolution over a (H, W, C) token grid, zero padding 1.

    With stride 2 on even grids this exactly halves each side; two of these
    give the 4x-per-axis token reduction of the visual downsampler.
    """
    xd = x.data
    if xd.ndim != 3:
        raise DimensionError(f"conv3x3 wants (H, W, C) input, got {xd.shape}")
    h, wd_, c = xd.shape
    if w.data.shape[:3] != (3, 3, c):
        raise DimensionError(f"conv3x3 kernel {w.data.shape} incompatible with input {xd.shape}")
    cout = w.data.shape[3]
    ho = (h + 2 - 3) // stride + 1
    wo = (wd_ + 2 - 3) // stride + 1
    xp = np.zeros((h + 2, wd_ + 2, c), dtype=xd.dtype)
    xp[1:h + 1, 1:wd_ + 1] = xd
    out_data = np.broadcast_to(b.data, (ho, wo, cout)).copy()
    for ki in range(3):
        for kj in range(3):
            patch = xp[ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
            out_data = out_data + np.tensordot(patch, w.data[ki, kj], axes=([2], [0]))

    def bwd(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for ki in range(3):
            for kj in range(3):
                patch = xp[ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
                gw[ki, kj] = np.tensordot(patch, g, axes=([0, 1], [0, 1]))
                gxp[ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += \
                    np.tensordot(g, w.data[ki, kj], axes=([2], [1]))
        _accum(x, gxp[1:h + 1, 1:wd_ + 1])
        _accum(w, gw)
        _accum(b, g.sum(axis=(0, 1)))

    return _make(out_data, (x, w, b), bwd, "conv3x3")


def attention(q, k, v, n_heads, causal=True, prefix_k=None, prefix_v=None):
    """Scaled dot-product attention over prefix-then-self keys.

    q, k, v are (T, D); the optional prefix is a cached (L, D) key/value pair
    that precedes the self block. Causality applies within the self block
    only; every query may attend to the whole prefix. Gradients flow into the
    prefix tensors only if they require them (a detached cache is a barrier).
    """
    d = q.data.shape[-1]
    if d % n_heads != 0:
        raise DimensionError(f"width {d} not divisible by {n_heads} heads")
    if k.data.shape != q.data.shape or v.data.shape != q.data.shape:
        raise DimensionError("attention q/k/v self blocks must share shape")
    if (prefix_k is None) != (prefix_v is None):
        raise DimensionError("prefix_k and prefix_v must be given together")
    if prefix_k is not None and prefix_k.data.shape[-1] != d:
        raise DimensionError(
            f"prefix width {prefix_k.data.shape[-1]} differs from query width {d}")

    tq = q.data.shape[0]
    dh = d // n_heads
    if prefix_k is not None:
        k_all = np.concatenate([prefix_k.data, k.data], axis=0)
        v_all = np.concatenate([prefix_v.data, v.data], axis=0)
        lp = prefix_k.data.shape[0]
    else:
        k_all, v_all, lp = k.data, v.data, 0
    tk = k_all.shape[0]

    def heads(m, t):
        return m.reshape(t, n_heads, dh).transpose(1, 0, 2)

    qh = heads(q.data, tq)
    kh = heads(k_all, tk)
    vh = heads(v_all, tk)

    scores = qh @ kh.transpose(0, 2, 1) / math.sqrt(dh)
    if causal:
        cols = np.arange(tk)[None, :]
        rows = np.arange(tq)[:, None]
        allowed = (cols < lp) | ((cols - lp) <= rows)
        scores = np.where(allowed, scores, -np.inf)
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    oh = p @ vh
    out_data = oh.transpose(1, 0, 2).reshape(tq, d)

    def bwd(g):
        gh = g.reshape(tq, n_heads, dh).transpose(1, 0, 2)
        gv = p.transpose(0, 2, 1) @ gh
        gp = gh @ vh.transpose(0, 2, 1)
        dot = (gp * p).sum(axis=-1, keepdims=True)
        gs = p * (gp - dot) / math.sqrt(dh)
        gq = gs @ kh
        gk = gs.transpose(0, 2, 1) @ qh

        def unheads(m, t):
            return m.transpose(1, 0, 2).reshape(t, d)

        _accum(q, unheads(gq, tq))
        gk_full = unheads(gk, tk)
        gv_full = unheads(gv, tk)
        _accum(k, gk_full[lp:])
        _accum(v, gv_full[lp:])
        if prefix_k is not None:
            _accum(prefix_k, gk_full[:lp])
            _accum(prefix_v, gv_full[:lp])

    parents = (q, k, v) if prefix_k is None else (q, k, v, prefix_k, prefix_v)
    return _make(out_data, parents, bwd, "attention")


# ---------------------------------------------------------------- composites


def affine(x, w, b):
    """x @ w + b with b broadcast over rows."""
    return add(matmul(x, w), b)


def detach(x):
    return x.detach()
