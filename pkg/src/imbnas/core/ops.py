"""Differentiable operators for the cell search space.

Every function takes and returns :class:`Tensor` objects and records its own
backward closure. Images are N x C x H x W throughout.
"""

from __future__ import annotations

import contextlib
from typing import Mapping, MutableMapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

OP_KINDS = (
    "none",
    "skip",
    "conv1x1",
    "conv3x3",
    "avgpool3x3",
    "relu",
    "batchnorm",
    "linear",
    "global_avg_pool",
)


class ShapeError(ValueError):
    """Operator input shapes are incompatible."""


def _shape_error(op: str, a, b) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


# MAC accounting used as an independent per-layer oracle for FLOP formulas.
_mac_counter: list[int] | None = None


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates executed by conv2d/linear inside the block."""
    global _mac_counter
    prev = _mac_counter
    box = [0]
    _mac_counter = box
    try:
        yield box
    finally:
        _mac_counter = prev


def _add_macs(n: int) -> None:
    if _mac_counter is not None:
        _mac_counter[0] += int(n)


# ----------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_error("add", a.shape, b.shape)
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g))


def add_n(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ValueError("add_n needs at least one tensor")
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise _shape_error("add_n", shape, x.shape)
    if len(xs) == 1:
        return xs[0]
    out = xs[0].data.copy()
    for x in xs[1:]:
        out += x.data
    return Tensor._from_op(out, tuple(xs), lambda g: (g,) * len(xs))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_error("mul", a.shape, b.shape)
    av, bv = a.data, b.data
    return Tensor._from_op(av * bv, (a, b), lambda g: (g * bv, g * av))


def sum_all(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    return Tensor._from_op(
        np.asarray(a.data.sum(), dtype=dtype), (a,), lambda g: (np.full(shape, g, dtype=dtype),)
    )


def square(a: Tensor) -> Tensor:
    av = a.data
    return Tensor._from_op(av * av, (a,), lambda g: (2 * g * av,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,))


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# ----------------------------------------------------------------- convolution


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation; ``w`` is (out, in, kh, kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise _shape_error("conv2d", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[0],):
        raise _shape_error("conv2d(bias)", w.shape, b.shape)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(wd, kw, stride, pad)
    if ho <= 0 or wo <= 0:
        raise _shape_error("conv2d", x.shape, w.shape)

    xd = x.data
    wm = w.data.reshape(o, -1)
    # Channel-major im2col: cols is (c*kh*kw, n*ho*wo), so both the forward
    # product and the col2im scatter in backward touch contiguous blocks.
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        cols = np.ascontiguousarray(xd.transpose(1, 0, 2, 3)).reshape(c, -1)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, -1)
    out = wm @ cols
    if b is not None:
        out += b.data[:, None]
    _add_macs(out.size * wm.shape[1])
    y = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    def backward_fn(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        gw = (gm @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = gm.sum(axis=1) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            gcols = wm.T @ gm
            if kh == 1 and kw == 1 and stride == 1 and pad == 0:
                gx = np.ascontiguousarray(gcols.reshape(c, n, h, wd).transpose(1, 0, 2, 3))
            else:
                gcols = gcols.reshape(c, kh, kw, n, ho, wo)
                gxp = np.zeros((c, n, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
                gxp = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
                gx = np.ascontiguousarray(gxp.transpose(1, 0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._from_op(y, parents, backward_fn)


def _box3(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    """Sum over 3x3 windows of an already 1-padded array."""
    out = xp[:, :, 0:h, 0:w].copy()
    for i in range(3):
        for j in range(3):
            if i or j:
                out += xp[:, :, i : i + h, j : j + w]
    return out


def avg_pool3x3(x: Tensor) -> Tensor:
    """3x3 average pool, stride 1, pad 1, padding excluded from the divisor."""
    if x.data.ndim != 4:
        raise ShapeError(f"avgpool3x3: expected a 4-d input, got shape {x.shape}")
    n, c, h, w = x.shape
    ones = np.pad(np.ones((1, 1, h, w), dtype=x.dtype), ((0, 0), (0, 0), (1, 1), (1, 1)))
    count = _box3(ones, h, w)
    pad = ((0, 0), (0, 0), (1, 1), (1, 1))
    y = _box3(np.pad(x.data, pad), h, w) / count

    def backward_fn(g):
        return (_box3(np.pad(g / count, pad), h, w),)

    return Tensor._from_op(y, (x,), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected a 4-d input, got shape {x.shape}")
    n, c, h, w = x.shape
    scale = 1.0 / (h * w)

    def backward_fn(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], (n, c, h, w)).copy(),)

    return Tensor._from_op(x.data.mean(axis=(2, 3)), (x,), backward_fn)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` shaped (out, in)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise _shape_error("linear", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[0],):
        raise _shape_error("linear(bias)", w.shape, b.shape)
    xd, wd = x.data, w.data
    y = xd @ wd.T
    if b is not None:
        y = y + b.data
    _add_macs(y.size * wd.shape[1])

    def backward_fn(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._from_op(y, parents, backward_fn)


# ------------------------------------------------------------------ batchnorm


class BNStats:
    """Running mean/variance for one batchnorm site."""

    __slots__ = ("mean", "var")

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def copy(self) -> "BNStats":
        s = BNStats.__new__(BNStats)
        s.mean = self.mean.copy()
        s.var = self.var.copy()
        return s


def batch_norm(
    x: Tensor,
    gamma: Tensor | None,
    beta: Tensor | None,
    stats: BNStats | None,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
    collect: MutableMapping | None = None,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W) or (N,) axes.

    In training mode batch statistics normalize the input and, when ``stats``
    is given, update it with an exponential moving average. ``collect`` (a
    dict with ``"mean"``/``"var"`` lists) records raw batch statistics instead,
    which is how BN recalibration gathers exact averages.
    """
    xd = x.data
    if xd.ndim not in (2, 4):
        raise ShapeError(f"batchnorm: expected a 2-d or 4-d input, got shape {x.shape}")
    ch = xd.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t is not None and t.shape != (ch,):
            raise _shape_error(f"batchnorm({name})", x.shape, t.shape)
    axes = (0, 2, 3) if xd.ndim == 4 else (0,)
    bshape = (1, ch, 1, 1) if xd.ndim == 4 else (1, ch)
    m = xd.size // ch

    if training:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if collect is not None:
            collect.setdefault("mean", []).append(mean.copy())
            collect.setdefault("var", []).append(var * (m / max(m - 1, 1)))
        elif stats is not None:
            stats.mean *= 1 - momentum
            stats.mean += momentum * mean
            stats.var *= 1 - momentum
            stats.var += momentum * var * (m / max(m - 1, 1))
    else:
        if stats is None:
            raise ValueError("batchnorm in eval mode needs running statistics")
        mean, var = stats.mean.astype(xd.dtype), stats.var.astype(xd.dtype)

    invstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean.reshape(bshape)) * invstd.reshape(bshape)
    y = xhat
    if gamma is not None:
        y = y * gamma.data.reshape(bshape)
    if beta is not None:
        y = y + beta.data.reshape(bshape)

    def backward_fn(g):
        gxhat = g * gamma.data.reshape(bshape) if gamma is not None else g
        gx = None
        if x.requires_grad:
            if training:
                s1 = gxhat.sum(axis=axes).reshape(bshape)
                s2 = (gxhat * xhat).sum(axis=axes).reshape(bshape)
                gx = (invstd.reshape(bshape) / m) * (m * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * invstd.reshape(bshape)
        out = [gx]
        if gamma is not None:
            out.append((g * xhat).sum(axis=axes))
        if beta is not None:
            out.append(g.sum(axis=axes))
        return tuple(out)

    parents = tuple(t for t in (x, gamma, beta) if t is not None)
    return Tensor._from_op(y.astype(xd.dtype, copy=False), parents, backward_fn)


# ----------------------------------------------------------------- dispatcher


def forward_op(
    kind: str,
    x: Tensor,
    params: Mapping[str, Tensor] | None = None,
    *,
    training: bool = True,
    stats: BNStats | None = None,
    stride: int = 1,
) -> Tensor:
    """Apply one primitive operator by name.

    ``params`` holds the slice this operator needs: ``weight``/``bias`` for
    convolutions and ``linear``, ``gamma``/``beta`` for ``batchnorm``.
    """
    params = params or {}
    if kind == "none":
        return zeros_like(x)
    if kind == "skip":
        return x
    if kind in ("conv1x1", "conv3x3"):
        w = params["weight"]
        k = 1 if kind == "conv1x1" else 3
        if w.data.ndim != 4 or w.shape[2:] != (k, k) or x.data.ndim != 4 or x.shape[1] != w.shape[1]:
            raise _shape_error(kind, x.shape, w.shape)
        return conv2d(x, w, params.get("bias"), stride=stride, pad=k // 2)
    if kind == "avgpool3x3":
        return avg_pool3x3(x)
    if kind == "relu":
        return relu(x)
    if kind == "batchnorm":
        return batch_norm(x, params.get("gamma"), params.get("beta"), stats, training)
    if kind == "linear":
        return linear(x, params["weight"], params.get("bias"))
    if kind == "global_avg_pool":
        return global_avg_pool(x)
    raise ValueError(f"unknown op kind {kind!r}; expected one of {OP_KINDS}")
