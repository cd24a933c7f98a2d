"""Differentiable operations used by the network.

Spatial ops take ``[c, H, W]`` inputs or a leading batch axis
``[N, c, H, W]``; the channel axis is always ``ndim - 3``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigError, DimensionError
from .tensor import Tensor, as_array, unbroadcast


def _pair(value):
    if isinstance(value, (tuple, list)):
        if len(value) != 2:
            raise ConfigError(f"expected a pair, got {value!r}")
        return int(value[0]), int(value[1])
    return int(value), int(value)


def _spatial(x, name="input"):
    if x.ndim not in (3, 4):
        raise DimensionError(f"{name} must be [c, H, W] or [N, c, H, W], got shape {x.shape}")
    return x.ndim == 3


def conv2d(x, weight, bias=None, stride=(1, 1), padding=(0, 0)):
    """2-D cross-correlation.

    ``weight`` is ``[c_out, c_in, kh, kw]``; output spatial size is
    ``floor((H + 2*ph - kh) / sh) + 1`` (likewise for the width).
    """
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise ConfigError(f"stride components must be >= 1, got {(sh, sw)}")
    if ph < 0 or pw < 0:
        raise ConfigError(f"padding must be non-negative, got {(ph, pw)}")
    single = _spatial(x)
    if weight.ndim != 4:
        raise DimensionError(f"weight must be [c_out, c_in, kh, kw], got shape {weight.shape}")
    xd = x.data[None] if single else x.data
    w = weight.data
    n, c, h, wd = xd.shape
    c_out, c_in, kh, kw = w.shape
    if c != c_in:
        raise DimensionError(
            f"input channel axis ({c}) does not match weight in-channel axis 1 ({c_in})"
        )
    if h + 2 * ph < kh or wd + 2 * pw < kw:
        raise DimensionError(
            f"kernel (kh={kh}, kw={kw}) does not fit padded input (H={h + 2 * ph}, W={wd + 2 * pw})"
        )
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"bias axis 0 ({bias.shape}) must equal weight out-channel axis ({c_out})")

    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    ho, wo = windows.shape[2], windows.shape[3]
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        g4 = g[None] if single else g
        gw = np.tensordot(g4, windows, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g4, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                gxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += contrib
        gx = gxp[:, :, ph : ph + h, pw : pw + wd]
        if single:
            gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out[0] if single else out, parents, backward, "conv2d")


@dataclass
class RunningStats:
    """Per-channel running mean/variance of a batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels, dtype=np.float64):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x, scale, shift, stats, training, momentum=0.1, eps=1e-5):
    single = _spatial(x)
    c = x.shape[-3]
    if scale.shape != (c,) or shift.shape != (c,):
        raise DimensionError(f"scale/shift must have shape ({c},), got {scale.shape} and {shift.shape}")
    axes = (1, 2) if single else (0, 2, 3)
    bshape = (c, 1, 1)
    xd = x.data
    count = xd.size // c
    if training:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        stats.mean[...] = (1 - momentum) * stats.mean + momentum * mean
        stats.var[...] = (1 - momentum) * stats.var + momentum * unbiased
    else:
        mean = stats.mean.astype(xd.dtype, copy=True)
        var = stats.var.astype(xd.dtype, copy=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)

    def backward(g):
        gscale = (g * xhat).sum(axis=axes)
        gshift = g.sum(axis=axes)
        gxhat = g * scale.data.reshape(bshape)
        if training:
            sum_g = gxhat.sum(axis=axes).reshape(bshape)
            sum_gx = (gxhat * xhat).sum(axis=axes).reshape(bshape)
            gx = (inv_std.reshape(bshape) / count) * (count * gxhat - sum_g - xhat * sum_gx)
        else:
            gx = gxhat * inv_std.reshape(bshape)
        return gx, gscale, gshift

    return Tensor._from_op(out, (x, scale, shift), backward, "batch_norm")


def leaky_relu(x, slope=0.1):
    if not 0.0 < slope < 1.0:
        raise ConfigError(f"leaky slope must lie in (0, 1), got {slope}")
    factor = np.where(x.data >= 0, 1.0, slope).astype(x.dtype)
    return Tensor._from_op(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def softmax_rows(logits):
    """Normalized exponential over the last axis, max-subtracted."""
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(s, (logits,), backward, "softmax_rows")


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner axes differ: a axis -1 = {a.shape[-1]}, b axis -2 = {b.shape[-2]}"
        )
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return Tensor._from_op(np.matmul(ad, bd), (a, b), backward, "matmul")


def max_pool_over_channels(x):
    """``[c, h, w] -> [h, w]`` by channel-wise maximum (first index wins ties)."""
    _spatial(x)
    axis = x.ndim - 3
    idx = np.expand_dims(x.data.argmax(axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return Tensor._from_op(out, (x,), backward, "max_pool_over_channels")


def width_bins(width, out_width):
    """Contiguous ``[start, end)`` bins covering ``range(width)``."""
    return [
        (i * width // out_width, -(-(i + 1) * width // out_width)) for i in range(out_width)
    ]


def adaptive_max_pool_width(x, out_width):
    """Max over contiguous width bins: ``[..., w] -> [..., out_width]``."""
    width = x.shape[-1]
    if out_width < 1 or out_width > width:
        raise DimensionError(f"output width {out_width} must lie in [1, input width {width}]")
    bins = width_bins(width, out_width)
    idx = np.empty(x.shape[:-1] + (out_width,), dtype=np.intp)
    for i, (start, end) in enumerate(bins):
        idx[..., i] = x.data[..., start:end].argmax(axis=-1) + start
    out = np.take_along_axis(x.data, idx, axis=-1)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        columns = np.arange(width)
        for i in range(out_width):
            gx += (columns == idx[..., i, None]) * g[..., i, None]
        return (gx,)

    return Tensor._from_op(out, (x,), backward, "adaptive_max_pool_width")


def flatten(x, start_axis=0):
    shape = x.shape[:start_axis] + (-1,)
    return x.reshape(shape)


def layer_normalize(x, weight=None, bias=None, eps=1e-5):
    """Zero-mean / unit-variance over the last axis, then ``x * weight + bias``."""
    xd = x.data
    m = xd.shape[-1]
    for name, p in (("weight", weight), ("bias", bias)):
        if p is not None and p.shape != (m,):
            raise DimensionError(f"layer-norm {name} must have shape ({m},), got {p.shape}")
    mean = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv_std
    out = xhat
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gxhat = g * weight.data if weight is not None else g
        gx = (inv_std / m) * (
            m * gxhat
            - gxhat.sum(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
        )
        grads = [gx]
        lead = tuple(range(xd.ndim - 1))
        if weight is not None:
            grads.append((g * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    parents = [x] + [p for p in (weight, bias) if p is not None]
    return Tensor._from_op(out, tuple(parents), backward, "layer_normalize")


def cosine_similarity(a, b, stabilizer=1e-8):
    """``a.b / max(|a||b|, stabilizer)`` over the last axis."""
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_similarity operands differ in shape: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    dot = (ad * bd).sum(axis=-1)
    na = np.sqrt((ad * ad).sum(axis=-1))
    nb = np.sqrt((bd * bd).sum(axis=-1))
    prod = na * nb
    den = np.maximum(prod, stabilizer)
    s = dot / den

    def backward(g):
        g = g[..., None]
        live = (prod > stabilizer)[..., None]
        d = den[..., None]
        sv = s[..., None]
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = np.where(live, bd / d - sv * ad / (na[..., None] ** 2), bd / d)
            gb = np.where(live, ad / d - sv * bd / (nb[..., None] ** 2), ad / d)
        return g * ga, g * gb

    return Tensor._from_op(np.asarray(s), (a, b), backward, "cosine_similarity")


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(as_array(value))


__all__ = [
    "RunningStats",
    "adaptive_max_pool_width",
    "as_tensor",
    "batch_norm",
    "conv2d",
    "cosine_similarity",
    "flatten",
    "layer_normalize",
    "leaky_relu",
    "matmul",
    "max_pool_over_channels",
    "softmax_rows",
    "width_bins",
]
