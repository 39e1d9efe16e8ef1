"""Elementwise, shape and reduction primitives.

Shapes must match exactly for binary ops; the only implicit broadcast in the
package is the per-channel bias inside :func:`flowsr.autodiff.nn.conv2d`.
Non-differentiable constants can be mixed in with :func:`add_constant` and
:func:`mul_constant`.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.special import erf

from flowsr.autodiff import kinks
from flowsr.autodiff.tensor import Tensor, make_result
from flowsr.errors import ShapeError


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return make_result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    return make_result(a.data * s, (a,), lambda g: (g * s,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    return make_result(a.data + a.dtype.type(s), (a,), lambda g: (g,))


def add_constant(a: Tensor, c: np.ndarray) -> Tensor:
    """a + c where c is a constant array broadcastable to a's shape."""
    c = np.asarray(c, dtype=a.dtype)
    if np.broadcast_shapes(a.shape, c.shape) != a.shape:
        raise ShapeError(f"constant of shape {c.shape} does not fit {a.shape}")
    return make_result(a.data + c, (a,), lambda g: (g,))


def mul_constant(a: Tensor, c: np.ndarray) -> Tensor:
    c = np.asarray(c, dtype=a.dtype)
    if np.broadcast_shapes(a.shape, c.shape) != a.shape:
        raise ShapeError(f"constant of shape {c.shape} does not fit {a.shape}")
    return make_result(a.data * c, (a,), lambda g: (g * c,))


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select a where mask is true, else b. The mask is not differentiated."""
    _same_shape(a, b, "where")
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)

    def backward(g):
        return np.where(mask, g, 0), np.where(mask, 0, g)

    return make_result(np.where(mask, a.data, b.data), (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; batch axes must match."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return make_result(a.data @ b.data, (a, b), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape {src} -> {tuple(shape)}: {exc}") from None
    return make_result(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return make_result(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(lo, hi), axis=axis))
            for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % a.ndim
    if not 0 <= start < stop <= a.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis of size {a.shape[axis]}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return make_result(np.ascontiguousarray(a.data[index]), (a,), backward)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    return slice_axis(a, 1, start, stop)


def split_channels(a: Tensor, parts: int) -> list:
    c = a.shape[1]
    if c % parts:
        raise ShapeError(f"cannot split {c} channels into {parts} equal parts")
    step = c // parts
    return [slice_channels(a, i * step, (i + 1) * step) for i in range(parts)]


def roll(a: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    back = tuple(-s for s in shifts)
    return make_result(np.roll(a.data, shifts, axes), (a,), lambda g: (np.roll(g, back, axes),))


# -- activations -------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    kinks.record(a.data)
    factor = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return make_result(a.data * factor, (a,), lambda g: (g * factor,))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    out = (x * cdf).astype(a.dtype)
    return make_result(out, (a,), lambda g: ((g * (cdf + x * pdf)).astype(a.dtype),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return make_result(y, (a,), lambda g: (g * (1.0 - y * y),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (a,), backward)


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the op name
    kinks.record(a.data)
    sign = np.sign(a.data)
    return make_result(np.abs(a.data), (a,), lambda g: (g * sign,))


# -- reductions ----------------------------------------------------------------


def sum(a: Tensor) -> Tensor:  # noqa: A001
    shape = a.shape
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return make_result(out, (a,), lambda g: (np.full(shape, g, dtype=a.dtype),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    out = np.asarray(a.data.mean(), dtype=a.dtype)
    return make_result(out, (a,), lambda g: (np.full(shape, g / n, dtype=a.dtype),))
