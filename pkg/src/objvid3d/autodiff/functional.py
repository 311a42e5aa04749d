"""Convolution, resampling and normalisation ops on channels-last tensors."""

from __future__ import annotations

import itertools
import math

import numpy as np

from .tensor import ShapeError, Tensor, _node, as_tensor, mean, sqrt

__all__ = [
    "conv2d",
    "conv3d",
    "conv_transpose2d",
    "avg_pool2x2",
    "upsample_nearest",
    "upsample_bilinear",
    "group_norm",
    "layer_norm",
]


def _same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def _conv(x: Tensor, w: Tensor, b: Tensor | None, strides, padding: str, op: str) -> Tensor:
    nsp = w.ndim - 2
    if x.ndim != nsp + 2:
        raise ShapeError(f"{op}: input dims {x.shape} need {nsp} spatial axes plus batch and channels")
    if x.shape[-1] != w.shape[-2]:
        raise ShapeError(f"{op}: input channels {x.shape[-1]} != kernel in-channels {w.shape[-2]} (kernel dims {w.shape})")
    kernel = w.shape[:nsp]
    strides = tuple(strides) if isinstance(strides, (tuple, list)) else (strides,) * nsp
    spatial = x.shape[1:-1]
    if padding == "same":
        pads = [_same_padding(s, k, st) for s, k, st in zip(spatial, kernel, strides)]
    elif padding == "valid":
        pads = [(0, 0)] * nsp
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xd = np.pad(x.data, [(0, 0)] + pads + [(0, 0)]) if any(p != (0, 0) for p in pads) else x.data
    padded = xd.shape[1:-1]
    out_sp = tuple((p - k) // s + 1 for p, k, s in zip(padded, kernel, strides))
    if any(o <= 0 for o in out_sp):
        raise ShapeError(f"{op}: kernel {kernel} larger than padded input {padded}")
    wd = w.data
    out = np.zeros((x.shape[0],) + out_sp + (w.shape[-1],), dtype=np.result_type(xd, wd))
    offsets = list(itertools.product(*[range(k) for k in kernel]))

    def window(off):
        return (slice(None),) + tuple(
            slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(off, strides, out_sp)
        )

    for off in offsets:
        out += xd[window(off)] @ wd[off]
    if b is not None:
        out += b.data

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xd)
            for off in offsets:
                gxp[window(off)] += g @ wd[off].T
            crop = (slice(None),) + tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, spatial))
            gx = gxp[crop]
        if w.requires_grad:
            gw = np.zeros_like(wd)
            red = tuple(range(nsp + 1))
            for off in offsets:
                gw[off] = np.tensordot(xd[window(off)], g, axes=(red, red))
        if b is not None and b.requires_grad:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, backward, op)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding: str = "same") -> Tensor:
    """2-D convolution. ``x`` is (N, H, W, Cin); ``w`` is (kh, kw, Cin, Cout)."""
    return _conv(x, w, b, stride, padding, "conv2d")


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding: str = "valid") -> Tensor:
    """3-D convolution. ``x`` is (N, T, H, W, Cin); ``w`` is (kt, kh, kw, Cin, Cout)."""
    return _conv(x, w, b, stride, padding, "conv3d")


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed 2-D convolution with 'same' output size ``H*stride x W*stride``.

    ``w`` is (kh, kw, Cin, Cout); each input pixel scatters a weighted kernel
    footprint into the (cropped) output.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[-1] != w.shape[2]:
        raise ShapeError(f"conv_transpose2d: input dims {x.shape} incompatible with kernel dims {w.shape}")
    n, h, wdt, _ = x.shape
    kh, kw = w.shape[:2]
    full_h = (h - 1) * stride + kh
    full_w = (wdt - 1) * stride + kw
    out_h, out_w = h * stride, wdt * stride
    top = max(full_h - out_h, 0) // 2
    left = max(full_w - out_w, 0) // 2
    canvas_h = max(full_h, top + out_h)
    canvas_w = max(full_w, left + out_w)
    xd, wd = x.data, w.data
    full = np.zeros((n, canvas_h, canvas_w, w.shape[-1]), dtype=np.result_type(xd, wd))
    offsets = list(itertools.product(range(kh), range(kw)))

    def window(off):
        i, j = off
        return (slice(None), slice(i, i + stride * (h - 1) + 1, stride), slice(j, j + stride * (wdt - 1) + 1, stride))

    for off in offsets:
        full[window(off)] += xd @ wd[off]
    crop = (slice(None), slice(top, top + out_h), slice(left, left + out_w))
    out = full[crop].copy()
    if b is not None:
        out += b.data

    def backward(g):
        gfull = np.zeros_like(full)
        gfull[crop] = g
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.zeros_like(xd)
            for off in offsets:
                gx += gfull[window(off)] @ wd[off].T
        if w.requires_grad:
            gw = np.zeros_like(wd)
            for off in offsets:
                gw[off] = np.tensordot(xd, gfull[window(off)], axes=((0, 1, 2), (0, 1, 2)))
        if b is not None and b.requires_grad:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, backward, "conv_transpose2d")


def avg_pool2x2(x: Tensor) -> Tensor:
    """Mean over non-overlapping 2x2 blocks of axes (-3, -2) of a (..., H, W, C) tensor."""
    *lead, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x2: spatial dims ({h}, {w}) must be even")
    blocks = x.data.reshape(*lead, h // 2, 2, w // 2, 2, c)
    out = blocks.mean(axis=(-4, -2))

    def backward(g):
        g4 = np.repeat(np.repeat(g, 2, axis=-3), 2, axis=-2)
        return (g4 * 0.25,)

    return _node(out, (x,), backward, "avg_pool2x2")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of axes (-3, -2) of a (..., H, W, C) tensor."""
    *lead, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=-3), factor, axis=-2)

    def backward(g):
        return (g.reshape(*lead, h, factor, w, factor, c).sum(axis=(-4, -2)),)

    return _node(out, (x,), backward, "upsample_nearest")


def _bilinear_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=dtype)
    np.add.at(m, (np.arange(n_out), lo), 1 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


def upsample_bilinear(x: Tensor, factor: int = 2) -> Tensor:
    """Half-pixel-centred bilinear upsampling of a (N, H, W, C) tensor."""
    if x.ndim != 4:
        raise ShapeError(f"upsample_bilinear: expected (N, H, W, C), got {x.shape}")
    _, h, w, _ = x.shape
    mh = _bilinear_matrix(h, factor, x.dtype)
    mw = _bilinear_matrix(w, factor, x.dtype)
    out = np.einsum("oh,nhwc,pw->nopc", mh, x.data, mw, optimize=True)

    def backward(g):
        return (np.einsum("oh,nopc,pw->nhwc", mh, g, mw, optimize=True),)

    return _node(out, (x,), backward, "upsample_bilinear")


def group_norm(x: Tensor, groups: int, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Group normalisation over all non-batch axes of a channels-last tensor."""
    c = x.shape[-1]
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    shape = x.shape
    grouped = x.reshape(shape[0], -1, groups, c // groups)
    mu = mean(grouped, axis=(1, 3), keepdims=True)
    centred = grouped - mu
    var = mean(centred * centred, axis=(1, 3), keepdims=True)
    out = (centred / sqrt(var + eps)).reshape(shape)
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-3) -> Tensor:
    """Normalise over the last axis (Keras default epsilon 1e-3)."""
    x = as_tensor(x)
    mu = mean(x, axis=-1, keepdims=True)
    centred = x - mu
    var = mean(centred * centred, axis=-1, keepdims=True)
    out = centred / sqrt(var + eps)
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out
