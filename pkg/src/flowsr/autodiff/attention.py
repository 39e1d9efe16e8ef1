"""(Shifted) window multi-head self-attention on [N, C, H, W] feature maps."""

from __future__ import annotations

from typing import NamedTuple, Optional

import numpy as np

from flowsr.autodiff import ops
from flowsr.autodiff.nn import conv2d
from flowsr.autodiff.tensor import Tensor
from flowsr.errors import ShapeError

MASK_VALUE = -100.0


class AttentionWeights(NamedTuple):
    qkv_w: Tensor  # [3C, C, 1, 1], output channels ordered (q|k|v, head, head_dim)
    qkv_b: Optional[Tensor]  # [3C]
    proj_w: Tensor  # [C, C, 1, 1]
    proj_b: Optional[Tensor]  # [C]


def shift_mask(h: int, w: int, window: int, shift: int) -> np.ndarray:
    """Additive mask [nW, T, T] keeping attention inside each pre-roll region."""
    region = np.zeros((h, w), dtype=np.int64)
    cuts = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    label = 0
    for hs in cuts:
        for ws in cuts:
            region[hs, ws] = label
            label += 1
    blocks = region.reshape(h // window, window, w // window, window).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(-1, window * window)
    same = blocks[:, :, None] == blocks[:, None, :]
    return np.where(same, 0.0, MASK_VALUE)


def window_attention(
    x: Tensor, weights: AttentionWeights, window: int, shift: int = 0, heads: int = 1
) -> Tensor:
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeError(f"window_attention: {h}x{w} not divisible by window {window}")
    if c % heads:
        raise ShapeError(f"window_attention: {c} channels not divisible by {heads} heads")
    if not 0 <= shift < window:
        raise ShapeError(f"window_attention: shift {shift} outside [0, {window})")
    d = c // heads
    hb, wb = h // window, w // window
    t = window * window

    qkv = conv2d(x, weights.qkv_w, weights.qkv_b)
    if shift:
        qkv = ops.roll(qkv, (-shift, -shift), (2, 3))
    qkv = ops.reshape(qkv, (n, 3, heads, d, hb, window, wb, window))
    qkv = ops.transpose(qkv, (1, 0, 4, 6, 2, 5, 7, 3))
    qkv = ops.reshape(qkv, (3, n * hb * wb * heads, t, d))
    q, k, v = (ops.reshape(ops.slice_axis(qkv, 0, i, i + 1), qkv.shape[1:]) for i in range(3))

    logits = ops.scale(ops.matmul(q, ops.swap_last(k)), d**-0.5)
    if shift:
        mask = shift_mask(h, w, window, shift)
        logits = ops.reshape(logits, (n, hb * wb, heads, t, t))
        logits = ops.add_constant(logits, mask[None, :, None])
        logits = ops.reshape(logits, (n * hb * wb * heads, t, t))
    out = ops.matmul(ops.softmax(logits, axis=-1), v)

    out = ops.reshape(out, (n, hb, wb, heads, window, window, d))
    out = ops.transpose(out, (0, 3, 6, 1, 4, 2, 5))
    out = ops.reshape(out, (n, c, h, w))
    if shift:
        out = ops.roll(out, (shift, shift), (2, 3))
    return conv2d(out, weights.proj_w, weights.proj_b)
