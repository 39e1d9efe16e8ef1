"""Quaternion algebra, quaternion convolution and quaternion spatial modeling (QSM)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from flowsr.autodiff import ops
from flowsr.autodiff.nn import conv2d
from flowsr.autodiff.tensor import Tensor, zeros
from flowsr.errors import ShapeError

PARTS = ("r", "x", "y", "z")

# Hamilton product q1 (x) q2, one row per output component: (sign, q1 part, q2 part).
HAMILTON_TABLE = (
    ((+1, 0, 0), (-1, 1, 1), (-1, 2, 2), (-1, 3, 3)),
    ((+1, 0, 1), (+1, 1, 0), (+1, 2, 3), (-1, 3, 2)),
    ((+1, 0, 2), (-1, 1, 3), (+1, 2, 0), (+1, 3, 1)),
    ((+1, 0, 3), (+1, 1, 2), (-1, 2, 1), (+1, 3, 0)),
)


@dataclass(frozen=True)
class Quaternion:
    r: float
    x: float
    y: float
    z: float

    def as_tuple(self):
        return (self.r, self.x, self.y, self.z)

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.r, -self.x, -self.y, -self.z)

    def norm(self) -> float:
        return math.sqrt(self.r**2 + self.x**2 + self.y**2 + self.z**2)

    def __mul__(self, other: "Quaternion") -> "Quaternion":
        return hamilton(self, other)


def hamilton(q1: Quaternion, q2: Quaternion) -> Quaternion:
    a, b = q1.as_tuple(), q2.as_tuple()
    return Quaternion(*(sum(s * a[i] * b[j] for s, i, j in row) for row in HAMILTON_TABLE))


@dataclass
class QuaternionFeature:
    """Four equally shaped [N, Cq, H, W] part tensors (real, i, j, k)."""

    r: Tensor
    i: Tensor
    j: Tensor
    k: Tensor

    def __post_init__(self):
        shapes = {t.shape for t in self.parts()}
        if len(shapes) != 1:
            raise ShapeError(f"quaternion parts differ in shape: {sorted(shapes)}")
        if self.r.ndim != 4 or self.r.shape[1] < 1:
            raise ShapeError(f"quaternion parts must be [N, Cq>=1, H, W], got {self.r.shape}")

    def parts(self):
        return (self.r, self.i, self.j, self.k)

    @property
    def shape(self):
        return self.r.shape


@dataclass
class QuaternionConvWeights:
    """Weight quaternion parts, each [Cq_out, Cq_in, K, K]; bias is [4 * Cq_out] (r|i|j|k)."""

    r: Tensor
    x: Tensor
    y: Tensor
    z: Tensor
    bias: Optional[Tensor] = None

    def __post_init__(self):
        shapes = {t.shape for t in self.parts()}
        if len(shapes) != 1:
            raise ShapeError(f"quaternion weight parts differ in shape: {sorted(shapes)}")
        if self.bias is not None and self.bias.shape != (4 * self.r.shape[0],):
            raise ShapeError(f"quaternion bias must have shape ({4 * self.r.shape[0]},)")

    def parts(self):
        return (self.r, self.x, self.y, self.z)

    def tensors(self):
        return self.parts() + ((self.bias,) if self.bias is not None else ())


def split_activation(q: QuaternionFeature, f: Callable[[Tensor], Tensor]) -> QuaternionFeature:
    return QuaternionFeature(*(f(p) for p in q.parts()))


def real_weight(w: QuaternionConvWeights) -> Tensor:
    """Real [4*Cq_out, 4*Cq_in, K, K] weight acting on channel-stacked (r|i|j|k) parts."""
    parts = w.parts()
    rows = []
    for row in HAMILTON_TABLE:
        blocks = [None] * 4
        for sign, wi, xi in row:
            blocks[xi] = parts[wi] if sign > 0 else ops.neg(parts[wi])
        rows.append(ops.concat(blocks, axis=1))
    return ops.concat(rows, axis=0)


def qconv2d(q: QuaternionFeature, w: QuaternionConvWeights, stride: int = 1, pad: int = 0) -> QuaternionFeature:
    """Convolution whose every tap is the Hamilton product w (x) q."""
    cq_out, cq_in, kh, kw = w.r.shape
    if q.shape[1] != cq_in:
        raise ShapeError(f"qconv2d: input has {q.shape[1]} quaternion channels, weight expects {cq_in}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"qconv2d: kernel must be square and odd, got {kh}x{kw}")
    stacked = ops.concat(q.parts(), axis=1)
    out = conv2d(stacked, real_weight(w), w.bias, stride=stride, pad=pad)
    return QuaternionFeature(*ops.split_channels(out, 4))


def init_qconv_weights(
    cq_out: int, cq_in: int, k: int, rng: np.random.Generator, bias: bool = True, dtype=np.float64
) -> QuaternionConvWeights:
    """Random unit-quaternion directions with uniform magnitudes.

    Magnitudes are U(-a, a) with a = 2 / sqrt(fan_in) over the expanded real
    form, so each component has variance 1 / (3 fan_in), the same as the
    default uniform init of a real conv with that fan-in.
    """
    fan_in = 4 * cq_in * k * k
    bound = 2.0 / math.sqrt(fan_in)
    shape = (cq_out, cq_in, k, k)
    direction = rng.standard_normal((4,) + shape)
    direction /= np.linalg.norm(direction, axis=0, keepdims=True)
    magnitude = rng.uniform(-bound, bound, size=shape)
    parts = [Tensor(magnitude * direction[p], requires_grad=True, dtype=dtype) for p in range(4)]
    b = Tensor(np.zeros(4 * cq_out), requires_grad=True, dtype=dtype) if bias else None
    return QuaternionConvWeights(*parts, bias=b)


def qsm(
    f: Tensor,
    w: QuaternionConvWeights,
    keep_real: bool = False,
    proj_w: Optional[Tensor] = None,
) -> Tensor:
    """Quaternion spatial modeling on a [N, C, H, W] feature map.

    The channels are split into three equal groups placed on the i, j, k axes
    with a constant zero real part, convolved with a 3x3 quaternion kernel, and
    the imaginary output parts are concatenated back to C channels. With
    ``keep_real`` all four output parts are projected to C channels by the
    1x1 weight ``proj_w`` instead.
    """
    c = f.shape[1]
    if c % 3:
        raise ShapeError(f"qsm needs channels divisible by 3, got {c}")
    f1, f2, f3 = ops.split_channels(f, 3)
    z0 = zeros(f1.shape, dtype=f.dtype)
    out = qconv2d(QuaternionFeature(z0, f1, f2, f3), w, stride=1, pad=w.r.shape[-1] // 2)
    if keep_real:
        if proj_w is None:
            raise ValueError("keep_real=True needs a projection weight")
        return conv2d(ops.concat(out.parts(), axis=1), proj_w)
    return ops.concat((out.i, out.j, out.k), axis=1)
