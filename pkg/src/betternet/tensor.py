"""Dense NCHW tensors with a tape-based reverse-mode autodiff.

Ops record themselves on the active :class:`GradTape` whenever one of their
inputs needs a gradient. ``backward(loss)`` replays the tape in reverse and
leaves ``.grad`` on every leaf tensor created with ``requires_grad=True``.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with GradTape():
    ...     loss = tsum(x * x)
    >>> backward(loss)
    >>> x.grad
    array([2., 4.])
"""

from __future__ import annotations

import contextvars
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised on misuse of the gradient tape."""


_TAPE: contextvars.ContextVar = contextvars.ContextVar("betternet_tape", default=None)
_MACS: contextvars.ContextVar = contextvars.ContextVar("betternet_macs", default=None)
_DEBUG: contextvars.ContextVar = contextvars.ContextVar("betternet_debug", default=False)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_tracked")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[GradTape] = None
        self._tracked = self.requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; the functional forms below carry the logic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)


class GradTape:
    """Ordered record of differentiable ops executed inside its context.

    A tape can be replayed exactly once.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, Callable]] = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> "GradTape":
        self._token = _TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE.reset(self._token)
        self._token = None

    def record(self, out: Tensor, parents: tuple, backward_fn: Callable) -> None:
        if self.consumed:
            raise TapeError("cannot record on a tape that has already been replayed")
        out._tape = self
        out._tracked = True
        self.nodes.append((out, parents, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeError("backward called twice on the same tape")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if loss.requires_grad:
            leaves[id(loss)] = loss
        for out, parents, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            parent_grads = fn(g)
            for p, pg in zip(parents, parent_grads):
                if pg is None or not isinstance(p, Tensor) or not p._tracked:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if p.requires_grad:
                    leaves[key] = p
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        self.nodes.clear()


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` tensor feeding ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
            return
        raise TapeError("loss was not produced under an active GradTape")
    loss._tape.backward(loss)


@contextmanager
def debug_checks(enabled: bool = True):
    """Assert finite outputs from every op inside the block."""
    token = _DEBUG.set(enabled)
    try:
        yield
    finally:
        _DEBUG.reset(token)


class MacCounter:
    def __init__(self):
        self.total = 0


@contextmanager
def count_macs():
    """Accumulate multiply-accumulate counts of conv2d/dense calls in the block."""
    counter = MacCounter()
    token = _MACS.set(counter)
    try:
        yield counter
    finally:
        _MACS.reset(token)


def _add_macs(n: int) -> None:
    counter = _MACS.get()
    if counter is not None:
        counter.total += int(n)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _DEBUG.get() and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite value produced by a forward op")
    tape = _TAPE.get()
    if tape is not None and any(isinstance(p, Tensor) and p._tracked for p in parents):
        tape.record(out, parents, backward_fn)
    return out


def _need(t) -> bool:
    return isinstance(t, Tensor) and t._tracked


# ---------------------------------------------------------------- elementwise


def _broadcast_kind(a: Tensor, b: Tensor) -> None:
    """Allowed patterns: equal shapes, scalar b, or b of [N,C,1,1] / [N,1,H,W] against 4-D a."""
    if a.shape == b.shape or b.ndim == 0 or b.size == 1 and b.ndim == 0:
        return
    if a.ndim == 4 and b.ndim == 4:
        n, c, h, w = a.shape
        if b.shape in ((n, c, 1, 1), (n, 1, h, w)):
            return
    raise ShapeError(f"unsupported broadcast between {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(dtype=np.float64), dtype=g.dtype)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True, dtype=np.float64).astype(g.dtype)


def _binary_operands(a, b):
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a = _as_tensor(a, b)
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim < b.ndim or (a.shape != b.shape and a.ndim == b.ndim and a.size < b.size):
        a, b, swapped = b, a, True
    else:
        swapped = False
    _broadcast_kind(a, b)
    return a, b, swapped


def add(a, b) -> Tensor:
    a, b, _ = _binary_operands(a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (g if _need(a) else None, _unbroadcast(g, sb) if _need(b) else None)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    return add(a, mul(b, -1.0))


def mul(a, b) -> Tensor:
    a, b, _ = _binary_operands(a, b)
    ad, bd = a.data, b.data
    sb = b.shape

    def bw(g):
        ga = g * bd if _need(a) else None
        gb = _unbroadcast(g * ad, sb) if _need(b) else None
        return ga, gb

    return _make(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    if a.shape != b.shape and b.ndim != 0:
        raise ShapeError(f"div needs equal shapes or a scalar divisor, got {a.shape} / {b.shape}")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = g / bd if _need(a) else None
        gb = _unbroadcast(-g * ad / (bd * bd), b.shape) if _need(b) else None
        return ga, gb

    return _make(out, (a, b), bw)


def log(x: Tensor) -> Tensor:
    xd = x.data

    def bw(g):
        return (g / xd,)

    return _make(np.log(xd), (x,), bw)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is zero where clipping was active."""
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)

    def bw(g):
        return (g * inside,)

    return _make(np.clip(xd, lo, hi), (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0).astype(x.data.dtype), (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)

    def bw(g):
        return (g * s * (1.0 - s),)

    return _make(s, (x,), bw)


def activate(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- reductions / shape


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(x.data.dtype)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (x,), bw)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def tmax(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient goes to the first maximal element."""
    axes = _norm_axes(axis, x.ndim)
    keep = tuple(a for a in range(x.ndim) if a not in axes)
    moved = np.transpose(x.data, keep + axes)
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(lead + (-1,))
    idx = flat.argmax(axis=-1)
    vals = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out = vals
    if keepdims:
        out = np.expand_dims(vals, axes)
    inv = np.argsort(keep + axes)
    shape = x.shape

    def bw(g):
        gflat = np.zeros(flat.shape, dtype=x.data.dtype)
        np.put_along_axis(gflat, idx[..., None], np.reshape(g, lead)[..., None], axis=-1)
        return (np.transpose(gflat.reshape(moved.shape), inv).reshape(shape),)

    return _make(np.ascontiguousarray(out), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def bw(g):
        return (g.reshape(old),)

    return _make(x.data.reshape(shape), (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    _require_rank(x, 4, "global_avg_pool")
    return tmean(x, axis=(2, 3), keepdims=True)


def global_max_pool(x: Tensor) -> Tensor:
    _require_rank(x, 4, "global_max_pool")
    return tmax(x, axis=(2, 3), keepdims=True)


def max_pool2d(x: Tensor, k: int = 2, s: int = 2, crop: bool = False) -> Tensor:
    _require_rank(x, 4, "max_pool2d")
    if k != 2 or s != 2:
        raise ValueError("only k=2, s=2 max pooling is supported")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        if not crop:
            raise ShapeError(f"max_pool2d needs even spatial dims, got {x.shape}; pass crop=True to drop the edge")
        x = crop_spatial(x, h - h % 2, w - w % 2)
        n, c, h, w = x.shape
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape, dtype=x.data.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        return (gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _make(out, (x,), bw)


def crop_spatial(x: Tensor, h: int, w: int) -> Tensor:
    full = x.shape

    def bw(g):
        out = np.zeros(full, dtype=g.dtype)
        out[:, :, :h, :w] = g
        return (out,)

    return _make(x.data[:, :, :h, :w].copy(), (x,), bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _require_rank(a, 4, "concat_channels")
    _require_rank(b, 4, "concat_channels")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: N,H,W must match, got {a.shape} and {b.shape}")
    ca = a.shape[1]

    def bw(g):
        return (g[:, :ca] if _need(a) else None, g[:, ca:] if _need(b) else None)

    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), bw)


def split_channels(x: Tensor, at: int) -> tuple[Tensor, Tensor]:
    """Inverse of concat_channels: channels [0, at) and [at, C)."""
    _require_rank(x, 4, "split_channels")
    c = x.shape[1]
    if not 0 <= at <= c:
        raise ShapeError(f"split point {at} outside 0..{c}")

    def bw_lo(g):
        out = np.zeros(x.shape, dtype=g.dtype)
        out[:, :at] = g
        return (out,)

    def bw_hi(g):
        out = np.zeros(x.shape, dtype=g.dtype)
        out[:, at:] = g
        return (out,)

    return _make(x.data[:, :at].copy(), (x,), bw_lo), _make(x.data[:, at:].copy(), (x,), bw_hi)


def _require_rank(x: Tensor, rank: int, op: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{op} expects a {rank}-D tensor, got shape {x.shape}")


# ---------------------------------------------------------------- resampling


def upsample_nearest2x(x: Tensor) -> Tensor:
    _require_rank(x, 4, "upsample_nearest2x")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), bw)


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel (align_corners=False) interpolation weights, shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        m[i, i0] += 1.0 - t
        m[i, i1] += t
    return m


def upsample_bilinear2x(x: Tensor) -> Tensor:
    _require_rank(x, 4, "upsample_bilinear2x")
    n, c, h, w = x.shape
    mh = _bilinear_matrix(h, 2 * h).astype(x.data.dtype)
    mw = _bilinear_matrix(w, 2 * w).astype(x.data.dtype)
    out = np.einsum("ih,nchw,jw->ncij", mh, x.data, mw, optimize=True)

    def bw(g):
        return (np.einsum("ih,ncij,jw->nchw", mh, g, mw, optimize=True),)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------- linear layers


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding via im2col."""
    _require_rank(x, 4, "conv2d")
    _require_rank(w, 4, "conv2d weight")
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} (x shape {x.shape}) != weight channels {cin_w} (w shape {w.shape})")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {x.shape} with padding {padding}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {b.shape} != ({cout},)")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    _add_macs(n * cout * ho * wo * cin * kh * kw)

    xd = x.data
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = xd.transpose(1, 0, 2, 3).reshape(cin, n * h * wd)
    else:
        # channel-major copy once, so every patch gather below is a plain strided slice
        xp = np.zeros((cin, n, h + 2 * padding, wd + 2 * padding), dtype=xd.dtype)
        xp[:, :, padding : padding + h, padding : padding + wd] = xd.transpose(1, 0, 2, 3)
        cols6 = np.empty((cin, kh, kw, n, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                cols6[:, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
        cols = cols6.reshape(cin * kh * kw, n * ho * wo)
    w2 = w.data.reshape(cout, -1)
    out = (w2 @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gx = gw = gb = None
        if _need(w):
            gw = (g2 @ cols.T).reshape(w.shape)
        if b is not None and _need(b):
            gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype)
        if _need(x):
            dcols = w2.T @ g2
            if pointwise:
                gx = dcols.reshape(cin, n, h, wd).transpose(1, 0, 2, 3)
            else:
                dc = dcols.reshape(cin, kh, kw, n, ho, wo)
                gxp = np.zeros((cin, n, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dc[:, i, j]
                gx = gxp[:, :, padding : padding + h, padding : padding + wd].transpose(1, 0, 2, 3)
        return gx, gw, gb

    return _make(out, (x, w, b), bw)


def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    _require_rank(x, 2, "dense")
    if w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: inner dimensions differ, x {x.shape} vs w {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"dense bias shape {b.shape} != ({w.shape[1]},)")
    _add_macs(x.shape[0] * w.shape[0] * w.shape[1])
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = g @ wd.T if _need(x) else None
        gw = xd.T @ g if _need(w) else None
        gb = g.sum(axis=0) if b is not None and _need(b) else None
        return gx, gw, gb

    return _make(out, (x, w, b), bw)


# ---------------------------------------------------------------- normalisation / regularisation


class RunningStats:
    """Per-channel running mean/variance buffers owned by one batch-norm layer."""

    def __init__(self, channels: int, dtype=np.float64):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation over (N, H, W).

    In ``train`` mode the batch statistics normalise the input and the running
    buffers move by ``running = (1 - momentum) * running + momentum * batch``
    (unbiased variance). ``infer`` mode uses the running buffers.
    """
    if eps <= 0:
        raise ValueError("batch_norm eps must be positive")
    _require_rank(x, 4, "batch_norm")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have length {c}, got {gamma.shape}, {beta.shape}")
    xd = x.data
    gd = gamma.data.reshape(1, c, 1, 1)
    if mode == "train":
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mean = xd.mean(axis=(0, 2, 3), dtype=np.float64)
        xc = xd - mean.reshape(1, c, 1, 1).astype(xd.dtype)
        var = (xc * xc).mean(axis=(0, 2, 3), dtype=np.float64)
        inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
        xhat = xc * inv.reshape(1, c, 1, 1)
        unbiased = var * m / (m - 1) if m > 1 else var
        running.mean[:] = (1.0 - momentum) * running.mean + momentum * mean
        running.var[:] = (1.0 - momentum) * running.var + momentum * unbiased
        out = gd * xhat + beta.data.reshape(1, c, 1, 1)

        def bw(g):
            ggamma = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype) if _need(gamma) else None
            gbeta = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype) if _need(beta) else None
            gx = None
            if _need(x):
                gh = g * gd
                mean_gh = gh.mean(axis=(0, 2, 3), dtype=np.float64).reshape(1, c, 1, 1)
                mean_ghx = (gh * xhat).mean(axis=(0, 2, 3), dtype=np.float64).reshape(1, c, 1, 1)
                gx = (inv.reshape(1, c, 1, 1) * (gh - mean_gh - xhat * mean_ghx)).astype(g.dtype)
            return gx, ggamma, gbeta

        return _make(out, (x, gamma, beta), bw)
    if mode == "infer":
        inv = (1.0 / np.sqrt(running.var + eps)).astype(xd.dtype)
        xhat = (xd - running.mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        out = gd * xhat + beta.data.reshape(1, c, 1, 1)

        def bw(g):
            gx = g * gd * inv.reshape(1, c, 1, 1) if _need(x) else None
            ggamma = (g * xhat).sum(axis=(0, 2, 3)) if _need(gamma) else None
            gbeta = g.sum(axis=(0, 2, 3)) if _need(beta) else None
            return gx, ggamma, gbeta

        return _make(out, (x, gamma, beta), bw)
    raise ValueError(f"unknown batch_norm mode {mode!r}")


def dropout(x: Tensor, rate: float, mode: str = "train", rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) in train mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x
    if mode != "train":
        raise ValueError(f"unknown dropout mode {mode!r}")
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)

    def bw(g):
        return (g * keep,)

    return _make(x.data * keep, (x,), bw)


# ---------------------------------------------------------------- verification


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    exclude: Optional[np.ndarray] = None,
    indices: Optional[Sequence[int]] = None,
) -> float:
    """Max relative error between backward gradients and central differences.

    ``f`` maps a tensor to a scalar tensor. ``exclude`` masks coordinates
    (e.g. points sitting on a relu kink); ``indices`` limits the comparison to
    a subset of flat coordinates for large inputs.
    """
    if h <= 0:
        raise ValueError("grad_check step h must be positive")
    base = np.array(x.data, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    with GradTape():
        out = f(probe)
    backward(out)
    analytic = probe.grad.reshape(-1) if probe.grad is not None else np.zeros(base.size)

    flat = base.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    skip = exclude.reshape(-1) if exclude is not None else None
    worst = 0.0
    for i in coords:
        if skip is not None and skip[i]:
            continue
        plus = flat.copy()
        plus[i] += h
        minus = flat.copy()
        minus[i] -= h
        fp = f(Tensor(plus.reshape(base.shape))).item()
        fm = f(Tensor(minus.reshape(base.shape))).item()
        numeric = (fp - fm) / (2.0 * h)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
