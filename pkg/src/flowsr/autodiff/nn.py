"""Convolution, channel LayerNorm and sub-pixel rearrangement on [N, C, H, W]."""

from __future__ import annotations

from typing import Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from flowsr.autodiff.tensor import Tensor, make_result
from flowsr.errors import ShapeError

Pad = Union[int, Tuple[int, int]]


def _pair(p: Pad) -> Tuple[int, int]:
    return (p, p) if isinstance(p, (int, np.integer)) else (int(p[0]), int(p[1]))


def _im2col(x: np.ndarray, kh: int, kw: int, ph: int, pw: int, stride: int) -> np.ndarray:
    n, c = x.shape[:2]
    if kh == kw == 1 and stride == 1 and ph == pw == 0:
        return x.reshape(n, c, -1)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    pad: Pad = 0,
) -> Tensor:
    """Cross-correlation y[n,o] = sum_{c,ki,kj} w[o,c,ki,kj] x[n,c,s*i+ki-ph,s*j+kj-pw] + b[o]."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape}, {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    ph, pw = _pair(pad)
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (wd + 2 * pw - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")

    w2 = w.data.reshape(cout, cin * kh * kw)
    cols = _im2col(x.data, kh, kw, ph, pw, stride)  # [N, Cin*KH*KW, Ho*Wo]
    y = np.matmul(w2, cols).reshape(n, cout, ho, wo)
    if b is not None:
        y += b.data.reshape(1, cout, 1, 1)

    def backward(g):
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        g3 = g.reshape(n, cout, ho * wo)
        gw = None
        if w.requires_grad:
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gx = None
        if x.requires_grad and stride == 1 and kh - 1 - ph >= 0 and kw - 1 - pw >= 0:
            # full correlation of g with the flipped, channel-swapped kernel
            gcols = _im2col(g, kh, kw, kh - 1 - ph, kw - 1 - pw, 1)
            wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, cout * kh * kw)
            gx = np.matmul(wflip, gcols).reshape(x.shape)
        elif x.requires_grad:
            gc = np.matmul(w2.T, g3).reshape(n, cin, kh, kw, ho, wo)
            gxp = np.zeros((n, cin, h + 2 * ph, wd + 2 * pw), dtype=g.dtype)
            for ki in range(kh):
                for kj in range(kw):
                    gxp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += gc[:, :, ki, kj]
            gx = np.ascontiguousarray(gxp[:, :, ph : ph + h, pw : pw + wd])
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_result(y, parents, backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each pixel's channel vector, then apply a per-channel affine map."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layernorm: gamma/beta must have shape ({c},)")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g_shape = (1, c) + (1,) * (x.ndim - 2)
    y = xhat * gamma.data.reshape(g_shape) + beta.data.reshape(g_shape)
    reduce_axes = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        ggamma = (g * xhat).sum(axis=reduce_axes)
        gbeta = g.sum(axis=reduce_axes)
        gxhat = g * gamma.data.reshape(g_shape)
        gx = inv * (
            gxhat
            - gxhat.mean(axis=1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return make_result(y.astype(x.dtype), (x, gamma, beta), backward)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """[N, C*r*r, H, W] -> [N, C, H*r, W*r]."""
    n, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"pixel_shuffle: {c} channels not divisible by r^2={r * r}")
    co = c // (r * r)
    y = x.data.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * r, w * r)

    def backward(g):
        gx = g.reshape(n, co, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(x.shape)
        return (gx,)

    return make_result(np.ascontiguousarray(y), (x,), backward)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """[N, C, H*r, W*r] -> [N, C*r*r, H, W]; exact inverse of pixel_shuffle."""
    n, c, hr, wr = x.shape
    if hr % r or wr % r:
        raise ShapeError(f"pixel_unshuffle: spatial size {hr}x{wr} not divisible by {r}")
    h, w = hr // r, wr // r
    y = x.data.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)

    def backward(g):
        gx = g.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(x.shape)
        return (gx,)

    return make_result(np.ascontiguousarray(y), (x,), backward)
