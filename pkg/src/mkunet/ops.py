"""Differentiable layer primitives: convolution, batch norm, activations,
pooling, bilinear resizing, channel shuffle and channel statistics.

All spatial convolutions use the cross-correlation convention with zero
padding.  Depthwise and 1x1 convolutions take vectorized fast paths; the
general grouped path is a correct im2col fallback.
"""

from __future__ import annotations

import functools
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DEFAULT_DTYPE, ShapeError, Tensor4

# ---------------------------------------------------------------------------
# convolution


def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor4, weight: Tensor4, bias: Tensor4 | None = None, *,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor4:
    """2-D cross-correlation with zero padding.

    weight: (c_out, c_in/groups, k, k); bias: (1, c_out, 1, 1) or None.
    """
    n, c_in, h, w = x.data.shape
    c_out, cpg, kh, kw = weight.data.shape
    if kh != kw:
        raise ShapeError(f"square kernels only, got {kh}x{kw}")
    k = kh
    if stride < 1 or padding < 0:
        raise ShapeError(f"bad stride/padding ({stride}, {padding})")
    if c_in % groups or c_out % groups:
        raise ShapeError(f"groups={groups} must divide c_in={c_in} and c_out={c_out}")
    if cpg != c_in // groups:
        raise ShapeError(f"weight expects {cpg * groups} input channels, got {c_in}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"kernel {k} exceeds padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.data.shape != (1, c_out, 1, 1):
        raise ShapeError(f"bias shape {bias.data.shape} != (1, {c_out}, 1, 1)")

    if k == 1 and groups == 1 and stride == 1 and padding == 0:
        return _conv_pointwise(x, weight, bias)
    if groups == c_in == c_out and stride == 1:
        return _conv_depthwise(x, weight, bias, padding)
    return _conv_general(x, weight, bias, stride, padding, groups)


def _finish_conv(x, weight, bias, out, vjp_wx):
    if bias is None:
        return Tensor4._from_op(out, (x, weight), vjp_wx)
    out = out + bias.data  # (1,c,1,1) broadcast

    def vjp(g):
        dx, dw = vjp_wx(g)
        db = g.sum(axis=(0, 2, 3)).reshape(bias.data.shape)
        return (dx, dw, db)

    return Tensor4._from_op(out, (x, weight, bias), vjp)


def _conv_pointwise(x, weight, bias):
    n, c_in, h, w = x.data.shape
    c_out = weight.data.shape[0]
    w2 = weight.data.reshape(c_out, c_in)
    out = np.tensordot(w2, x.data, axes=([1], [1])).transpose(1, 0, 2, 3)
    xd = x.data

    def vjp_wx(g):
        dx = np.tensordot(w2, g, axes=([0], [1])).transpose(1, 0, 2, 3)
        dw = np.tensordot(g, xd, axes=([0, 2, 3], [0, 2, 3])).reshape(weight.data.shape)
        return dx, dw

    return _finish_conv(x, weight, bias, np.ascontiguousarray(out), vjp_wx)


def _conv_depthwise(x, weight, bias, padding):
    n, c, h, w = x.data.shape
    k = weight.data.shape[2]
    p = padding
    oh, ow = h + 2 * p - k + 1, w + 2 * p - k + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    wd = weight.data
    out = np.zeros((n, c, oh, ow), dtype=x.data.dtype)
    for di in range(k):
        for dj in range(k):
            out += wd[:, 0, di, dj].reshape(1, c, 1, 1) * xp[:, :, di:di + oh, dj:dj + ow]

    def vjp_wx(g):
        dw = np.empty_like(wd)
        dxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                patch = xp[:, :, di:di + oh, dj:dj + ow]
                dw[:, 0, di, dj] = np.einsum("nchw,nchw->c", patch, g, optimize=True)
                dxp[:, :, di:di + oh, dj:dj + ow] += wd[:, 0, di, dj].reshape(1, c, 1, 1) * g
        dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
        return dx, dw

    return _finish_conv(x, weight, bias, out, vjp_wx)


def _conv_general(x, weight, bias, stride, padding, groups):
    n, c_in, h, w = x.data.shape
    c_out, cpg, k, _ = weight.data.shape
    p, s = padding, stride
    oh, ow = _conv_out_size(h, k, s, p), _conv_out_size(w, k, s, p)
    opg = c_out // groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    out = np.empty((n, c_out, oh, ow), dtype=x.data.dtype)
    for g_idx in range(groups):
        ci, co = g_idx * cpg, g_idx * opg
        out[:, co:co + opg] = np.einsum(
            "nchwij,ocij->nohw", windows[:, ci:ci + cpg], weight.data[co:co + opg],
            optimize=True)
    xd, wd = x.data, weight.data

    def vjp_wx(gout):
        xpb = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
        win = sliding_window_view(xpb, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        dw = np.empty_like(wd)
        dxp = np.zeros_like(xpb)
        for g_idx in range(groups):
            ci, co = g_idx * cpg, g_idx * opg
            gg = gout[:, co:co + opg]
            dw[co:co + opg] = np.einsum("nchwij,nohw->ocij", win[:, ci:ci + cpg], gg,
                                        optimize=True)
            for di in range(k):
                for dj in range(k):
                    t = np.einsum("nohw,oc->nchw", gg, wd[co:co + opg, :, di, dj],
                                  optimize=True)
                    dxp[:, ci:ci + cpg, di:di + oh * s:s, dj:dj + ow * s:s] += t
        dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
        return dx, dw

    return _finish_conv(x, weight, bias, out, vjp_wx)


class Conv2d:
    """Convolution layer owning its weight (Kaiming-uniform) and optional bias."""

    def __init__(self, c_in: int, c_out: int, k: int, *, stride: int = 1,
                 padding: int = 0, groups: int = 1, bias: bool = False,
                 rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        if c_in % groups or c_out % groups:
            raise ShapeError(f"groups={groups} must divide c_in={c_in} and c_out={c_out}")
        rng = rng or np.random.default_rng(0)
        fan_in = (c_in // groups) * k * k
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(c_out, c_in // groups, k, k))
        self.weight = Tensor4(w.astype(dtype), requires_grad=True)
        self.bias = (Tensor4(np.zeros((1, c_out, 1, 1), dtype=dtype), requires_grad=True)
                     if bias else None)
        self.stride, self.padding, self.groups = stride, padding, groups

    def forward(self, x: Tensor4) -> Tensor4:
        return conv2d(x, self.weight, self.bias, stride=self.stride,
                      padding=self.padding, groups=self.groups)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


# ---------------------------------------------------------------------------
# batch normalization


class BatchNorm2d:
    """Per-channel batch normalization with running statistics.

    Train mode normalizes with biased batch moments over (n, h, w) and
    updates running stats as r <- (1-momentum)*r + momentum*batch_stat;
    eval mode applies the deterministic affine map from running stats.
    """

    def __init__(self, channels: int, *, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=DEFAULT_DTYPE):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor4(np.ones((1, channels, 1, 1), dtype=dtype), requires_grad=True)
        self.beta = Tensor4(np.zeros((1, channels, 1, 1), dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros((1, channels, 1, 1), dtype=dtype)
        self.running_var = np.ones((1, channels, 1, 1), dtype=dtype)

    def forward(self, x: Tensor4, mode: str = "train") -> Tensor4:
        return batch_norm(x, self, mode)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def named_buffers(self, prefix: str):
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var

    def set_buffers(self, mean: np.ndarray, var: np.ndarray) -> None:
        self.running_mean = mean.reshape(self.running_mean.shape).astype(
            self.running_mean.dtype).copy()
        self.running_var = var.reshape(self.running_var.shape).astype(
            self.running_var.dtype).copy()


def batch_norm(x: Tensor4, bn: BatchNorm2d, mode: str = "train") -> Tensor4:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    n, c, h, w = x.data.shape
    if c != bn.channels:
        raise ShapeError(f"batch norm expects {bn.channels} channels, got {c}")
    gamma, beta = bn.gamma, bn.beta

    if mode == "train":
        m = n * h * w
        if m == 1:
            raise ShapeError("train-mode batch norm needs n*h*w > 1 (variance undefined)")
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)  # biased
        inv = 1.0 / np.sqrt(var + bn.eps)
        xhat = xc * inv
        out = gamma.data * xhat + beta.data
        mom = bn.momentum
        bn.running_mean = ((1.0 - mom) * bn.running_mean + mom * mu).astype(
            bn.running_mean.dtype)
        bn.running_var = ((1.0 - mom) * bn.running_var + mom * var).astype(
            bn.running_var.dtype)
        gd = gamma.data

        def vjp(g):
            dxhat = g * gd
            mean_dxhat = dxhat.mean(axis=(0, 2, 3), keepdims=True)
            mean_dxhat_xhat = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            dx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
            dgamma = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dbeta = g.sum(axis=(0, 2, 3), keepdims=True)
            return (dx, dgamma, dbeta)

        return Tensor4._from_op(out, (x, gamma, beta), vjp)

    inv = 1.0 / np.sqrt(bn.running_var + bn.eps)
    xhat = (x.data - bn.running_mean) * inv
    out = gamma.data * xhat + beta.data
    gd = gamma.data

    def vjp(g):
        dx = g * gd * inv
        dgamma = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dbeta = g.sum(axis=(0, 2, 3), keepdims=True)
        return (dx, dgamma, dbeta)

    return Tensor4._from_op(out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor4) -> Tensor4:
    xd = x.data

    def vjp(g):
        return (g * (xd > 0),)

    return Tensor4._from_op(np.maximum(xd, 0), (x,), vjp)


def relu6(x: Tensor4) -> Tensor4:
    xd = x.data

    def vjp(g):
        # zero subgradient at both kinks (x=0 and x=6)
        return (g * ((xd > 0) & (xd < 6)),)

    return Tensor4._from_op(np.clip(xd, 0, 6), (x,), vjp)


def _sigmoid_stable(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor4) -> Tensor4:
    s = _sigmoid_stable(x.data)

    def vjp(g):
        return (g * s * (1.0 - s),)

    return Tensor4._from_op(s, (x,), vjp)


def activation(x: Tensor4, kind: str) -> Tensor4:
    table = {"relu": relu, "relu6": relu6, "sigmoid": sigmoid}
    if kind not in table:
        raise ValueError(f"unknown activation {kind!r}")
    return table[kind](x)


# ---------------------------------------------------------------------------
# pooling


def max_pool_2x2(x: Tensor4) -> Tensor4:
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max pool needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h2, w2, 4)
    idx = windows.argmax(axis=-1)  # ties: first element in row-major window order
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        dwin = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (dx,)

    return Tensor4._from_op(np.ascontiguousarray(out), (x,), vjp)


def global_pool(x: Tensor4, kind: str = "avg") -> Tensor4:
    n, c, h, w = x.data.shape
    if kind == "avg":
        out = x.data.mean(axis=(2, 3), keepdims=True)

        def vjp(g):
            return (np.broadcast_to(g / (h * w), x.data.shape).copy(),)

        return Tensor4._from_op(out, (x,), vjp)
    if kind == "max":
        flat = x.data.reshape(n, c, h * w)
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1).reshape(n, c, 1, 1)

        def vjp(g):
            dflat = np.zeros((n, c, h * w), dtype=g.dtype)
            np.put_along_axis(dflat, idx[..., None], g.reshape(n, c, 1), axis=-1)
            return (dflat.reshape(n, c, h, w),)

        return Tensor4._from_op(out, (x,), vjp)
    raise ValueError(f"unknown pool kind {kind!r}")


# ---------------------------------------------------------------------------
# bilinear resize (half-pixel centers, separable)


@functools.lru_cache(maxsize=256)
def _interp_matrix(in_size: int, out_size: int, dtype_name: str) -> np.ndarray:
    m = np.zeros((out_size, in_size), dtype=np.dtype(dtype_name))
    if in_size == 1:
        m[:, 0] = 1.0
        return m
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    i0 = np.floor(src).astype(int)
    i0 = np.minimum(i0, in_size - 1)
    frac = src - i0
    i1 = np.minimum(i0 + 1, in_size - 1)
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), (1.0 - frac).astype(m.dtype))
    np.add.at(m, (rows, i1), frac.astype(m.dtype))
    return m


def resize_bilinear_array(data: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Forward-only bilinear resize of an (n,c,h,w) array."""
    a = _interp_matrix(data.shape[2], out_h, data.dtype.name)
    b = _interp_matrix(data.shape[3], out_w, data.dtype.name)
    return np.einsum("nchw,oh,pw->ncop", data, a, b, optimize=True)


def bilinear_resize(x: Tensor4, out_h: int, out_w: int) -> Tensor4:
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bad target size {out_h}x{out_w}")
    a = _interp_matrix(x.data.shape[2], out_h, x.data.dtype.name)
    b = _interp_matrix(x.data.shape[3], out_w, x.data.dtype.name)
    out = np.einsum("nchw,oh,pw->ncop", x.data, a, b, optimize=True)

    def vjp(g):
        return (np.einsum("ncop,oh,pw->nchw", g, a, b, optimize=True),)

    return Tensor4._from_op(out, (x,), vjp)


# ---------------------------------------------------------------------------
# channel rearrangement and statistics


def channel_shuffle(x: Tensor4, groups: int) -> Tensor4:
    n, c, h, w = x.data.shape
    if c % groups:
        raise ShapeError(f"groups={groups} must divide channels={c}")
    cpg = c // groups
    out = x.data.reshape(n, groups, cpg, h, w).transpose(0, 2, 1, 3, 4).reshape(n, c, h, w)

    def vjp(g):
        dx = g.reshape(n, cpg, groups, h, w).transpose(0, 2, 1, 3, 4).reshape(n, c, h, w)
        return (dx,)

    return Tensor4._from_op(np.ascontiguousarray(out), (x,), vjp)


def channel_stats(x: Tensor4, kind: str) -> Tensor4:
    n, c, h, w = x.data.shape
    if kind == "mean":
        out = x.data.mean(axis=1, keepdims=True)

        def vjp(g):
            return (np.broadcast_to(g / c, x.data.shape).copy(),)

        return Tensor4._from_op(out, (x,), vjp)
    if kind == "max":
        idx = x.data.argmax(axis=1)  # first index on ties
        out = np.take_along_axis(x.data, idx[:, None], axis=1)

        def vjp(g):
            dx = np.zeros_like(x.data, dtype=g.dtype)
            np.put_along_axis(dx, idx[:, None], g, axis=1)
            return (dx,)

        return Tensor4._from_op(out, (x,), vjp)
    raise ValueError(f"unknown channel stat {kind!r}")


def concat_channels(a: Tensor4, b: Tensor4) -> Tensor4:
    na, ca, ha, wa = a.data.shape
    nb, cb, hb, wb = b.data.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(f"spatial/batch mismatch {a.data.shape} vs {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise ShapeError("mixed dtypes in concat")
    out = np.concatenate([a.data, b.data], axis=1)

    def vjp(g):
        return (g[:, :ca], g[:, ca:])

    return Tensor4._from_op(out, (a, b), vjp)
