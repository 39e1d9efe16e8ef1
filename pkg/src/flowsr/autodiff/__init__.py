"""Minimal reverse-mode autodiff over numpy arrays."""

from flowsr.autodiff import ops
from flowsr.autodiff.attention import AttentionWeights, shift_mask, window_attention
from flowsr.autodiff.nn import conv2d, layernorm, pixel_shuffle, pixel_unshuffle
from flowsr.autodiff.tensor import (
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    ones,
    set_default_dtype,
    zeros,
)

__all__ = [
    "AttentionWeights",
    "Tensor",
    "as_tensor",
    "backward",
    "conv2d",
    "default_dtype",
    "get_default_dtype",
    "is_grad_enabled",
    "layernorm",
    "no_grad",
    "ones",
    "ops",
    "pixel_shuffle",
    "pixel_unshuffle",
    "set_default_dtype",
    "shift_mask",
    "window_attention",
    "zeros",
]
