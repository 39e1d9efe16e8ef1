"""Bilinear sampling, deformable convolution and dynamic flow convolution (DFC).

Offsets are in pixels. DFC decouples a K-tap kernel into a horizontal 1xK and
a vertical Kx1 kernel whose taps drift perpendicular to the kernel axis. The
drift of tap t is the running sum of per-step offsets between the center and
t, after a magnitude constraint ("left" or "right" pattern) that makes one
side of the chain fan out and the other side contract.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import sparse

from flowsr.autodiff import kinks, ops
from flowsr.autodiff.nn import conv2d
from flowsr.autodiff.tensor import Tensor, make_result
from flowsr.errors import ConfigError, ShapeError

PATTERNS = ("left", "right", "adaptive", "none")
VARIANTS = ("none", "ndc", "ldfc", "rdfc", "adfc", "dfc")
VARIANT_PATTERNS = {"ldfc": ("left",), "rdfc": ("right",), "adfc": ("adaptive",), "dfc": ("left", "right")}


# -- sampling ----------------------------------------------------------------------


def bilinear_sample(x: Tensor, px: Tensor, py: Tensor) -> Tensor:
    """Sample x [N, C, H, W] at fractional (px, py), each [N, *S], giving [N, C, *S].

    Samples outside the image read zeros. Differentiable in x, px and py.
    """
    n, c, h, w = x.shape
    if px.shape != py.shape or px.shape[0] != n:
        raise ShapeError(f"bilinear_sample: position shapes {px.shape}, {py.shape} vs batch {n}")
    for pos in (px, py):
        if pos.requires_grad:
            kinks.record_fractional(pos.data)
    sample_shape = px.shape[1:]
    pts = int(np.prod(sample_shape, dtype=np.int64))
    X = px.data.reshape(n, pts)
    Y = py.data.reshape(n, pts)
    x0 = np.floor(X)
    y0 = np.floor(Y)
    fx = (X - x0).reshape(-1, 1)
    fy = (Y - y0).reshape(-1, 1)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xt = x.data.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    base = (np.arange(n, dtype=np.int64) * h * w)[:, None]

    # corners whose interpolation weight vanishes everywhere (integer axis) are skipped
    dxs = (0, 1) if fx.any() else (0,)
    dys = (0, 1) if fy.any() else (0,)
    wx = {0: 1 - fx, 1: fx}
    wy = {0: 1 - fy, 1: fy}
    corners = [(dx, dy) for dy in dys for dx in dxs]
    indices, weights, values = [], [], []
    out = np.zeros((n * pts, c), dtype=x.dtype)
    for dx, dy in corners:
        cx = x0 + dx
        cy = y0 + dy
        valid = ((cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)).reshape(-1, 1)
        idx = (base + np.clip(cy, 0, h - 1) * w + np.clip(cx, 0, w - 1)).reshape(-1)
        v = xt[idx]
        v *= valid
        out += (wx[dx] * wy[dy]) * v
        indices.append(idx)
        weights.append((wx[dx] * wy[dy] * valid).ravel())
        values.append(v)
    out = np.ascontiguousarray(np.moveaxis(out.reshape((n,) + sample_shape + (c,)), -1, 1))

    def backward(g):
        g2 = np.moveaxis(g, 1, -1).reshape(n * pts, c)
        gx = gpx = gpy = None
        if x.requires_grad:
            m = len(corners)
            gather = sparse.csr_matrix(
                (np.stack(weights, axis=1).ravel(), np.stack(indices, axis=1).ravel(), np.arange(0, m * n * pts + 1, m)),
                shape=(n * pts, n * h * w),
            )
            gxt = gather.T @ g2
            gx = np.ascontiguousarray(gxt.reshape(n, h, w, c).transpose(0, 3, 1, 2), dtype=x.dtype)
        if px.requires_grad or py.requires_grad:
            gpx = np.zeros((n * pts, 1), dtype=x.dtype)
            gpy = np.zeros((n * pts, 1), dtype=x.dtype)
            for (dx, dy), v in zip(corners, values):
                dot = np.einsum("ij,ij->i", g2, v)[:, None]
                gpx += (1 if dx else -1) * wy[dy] * dot
                gpy += (1 if dy else -1) * wx[dx] * dot
            gpx = gpx.reshape(px.shape)
            gpy = gpy.reshape(py.shape)
        return gx, gpx, gpy

    return make_result(out, (x, px, py), backward)


def bilinear_sample_point(x: Tensor, p: Tuple[float, float]) -> Tensor:
    """Values of every channel at one location p = (px, py); returns [N, C]."""
    n = x.shape[0]
    px = Tensor(np.full((n, 1), p[0]), dtype=x.dtype)
    py = Tensor(np.full((n, 1), p[1]), dtype=x.dtype)
    return ops.reshape(bilinear_sample(x, px, py), x.shape[:2])


# -- deformable convolution (v1) ------------------------------------------------------


def _tap_grid(h: int, w: int, ky: np.ndarray, kx: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Base positions [T, H, W] for taps at integer displacements (ky, kx)."""
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return jj[None] + kx[:, None, None], ii[None] + ky[:, None, None]


def deformable_conv2d(x: Tensor, w: Tensor, offsets: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Stride-1 'same' deformable convolution.

    ``offsets`` is [N, 2*K*K, H, W] holding (dx, dy) per tap, taps in
    row-major kernel order.
    """
    n, c, h, wd = x.shape
    cout, cin, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"deformable_conv2d: kernel must be square and odd, got {k}x{k2}")
    if cin != c:
        raise ShapeError(f"deformable_conv2d: input has {c} channels, weight expects {cin}")
    taps = k * k
    if offsets.shape != (n, 2 * taps, h, wd):
        raise ShapeError(f"deformable_conv2d: offsets must be {(n, 2 * taps, h, wd)}, got {offsets.shape}")
    half = k // 2
    ky, kx = np.divmod(np.arange(taps), k)
    base_x, base_y = _tap_grid(h, wd, ky - half, kx - half)
    off = ops.reshape(offsets, (n, taps, 2, h, wd))
    dx = ops.reshape(ops.slice_axis(off, 2, 0, 1), (n, taps, h, wd))
    dy = ops.reshape(ops.slice_axis(off, 2, 1, 2), (n, taps, h, wd))
    px = ops.add_constant(dx, base_x[None])
    py = ops.add_constant(dy, base_y[None])
    samples = ops.reshape(bilinear_sample(x, px, py), (n, c * taps, h, wd))
    return conv2d(samples, ops.reshape(w, (cout, cin * taps, 1, 1)), b)


# -- flow constraint and chained tap positions ---------------------------------------------


def _accumulation_matrix(k: int) -> np.ndarray:
    """A[k_out, k_in] = 1 when step k_in lies between the center and tap k_out."""
    half = k // 2
    a = np.zeros((k, k))
    for t in range(1, half + 1):
        a[half + t, half + 1 : half + t + 1] = 1.0
        a[half - t, half - t : half] = 1.0
    return a


def chain_accumulate(steps: Tensor) -> Tensor:
    """Running sums of per-step offsets [N, K, H, W] outward from the center tap."""
    k = steps.shape[1]
    if k % 2 == 0:
        raise ShapeError(f"chain length must be odd, got {k}")
    a = _accumulation_matrix(k).astype(steps.dtype)
    n, _, h, w = steps.shape
    out = np.matmul(a, steps.data.reshape(n, k, h * w)).reshape(steps.shape)
    return make_result(out, (steps,), lambda g: (np.matmul(a.T, g.reshape(n, k, h * w)).reshape(g.shape),))


def chain_positions(axis: str, steps: Tensor) -> Tuple[Tensor, Tensor]:
    """Tap positions (px, py), each [N, K, H, W], of a chained 1xK or Kx1 kernel.

    For the horizontal kernel tap c+t sits at (x + t, y + sum of steps between
    the center and tap c+t); the vertical kernel swaps the roles of x and y.
    """
    n, k, h, w = steps.shape
    half = k // 2
    along = np.arange(k) - half
    drift = chain_accumulate(steps)
    if axis == "horizontal":
        base_x, base_y = _tap_grid(h, w, np.zeros(k, dtype=np.int64), along)
        return Tensor(np.broadcast_to(base_x, (n, k, h, w)), dtype=steps.dtype), ops.add_constant(drift, base_y[None])
    if axis == "vertical":
        base_x, base_y = _tap_grid(h, w, along, np.zeros(k, dtype=np.int64))
        return ops.add_constant(drift, base_x[None]), Tensor(np.broadcast_to(base_y, (n, k, h, w)), dtype=steps.dtype)
    raise ConfigError(f"unknown kernel axis {axis!r}")


def apply_flow_constraint(raw: Tensor, pattern: str) -> Tensor:
    """Constrain per-step offsets [N, K, H, W] outward from the center step.

    ``left``: toward the positive side each step keeps its sign but takes the
    larger of its own magnitude and the previous (constrained) step's; toward
    the negative side the smaller. ``right`` swaps larger and smaller. The
    center step is unchanged.
    """
    if pattern not in ("left", "right"):
        raise ConfigError(f"flow constraint pattern must be 'left' or 'right', got {pattern!r}")
    d = raw.data
    k = d.shape[1]
    half = k // 2
    out = d.copy()
    own = np.ones(d.shape, dtype=bool)
    grow_positive = pattern == "left"

    def step(kk: int, prev: int, grow: bool) -> None:
        cur, ref = d[:, kk], np.abs(out[:, prev])
        mag = np.abs(cur)
        keep = mag >= ref if grow else mag <= ref
        own[:, kk] = keep
        out[:, kk] = np.where(keep, cur, np.sign(cur) * ref)
        kinks.record(mag - ref)
        kinks.record(np.where(keep, np.inf, cur))

    for kk in range(half + 1, k):
        step(kk, kk - 1, grow_positive)
    for kk in range(half - 1, -1, -1):
        step(kk, kk + 1, not grow_positive)

    def backward(g):
        total = g.copy()
        graw = np.zeros_like(g)
        sign = np.sign(d)
        osign = np.sign(out)
        for kk in range(k - 1, half, -1):
            graw[:, kk] += np.where(own[:, kk], total[:, kk], 0)
            total[:, kk - 1] += np.where(own[:, kk], 0, total[:, kk] * sign[:, kk] * osign[:, kk - 1])
        for kk in range(0, half):
            graw[:, kk] += np.where(own[:, kk], total[:, kk], 0)
            total[:, kk + 1] += np.where(own[:, kk], 0, total[:, kk] * sign[:, kk] * osign[:, kk + 1])
        graw[:, half] += total[:, half]
        return (graw,)

    return make_result(out, (raw,), backward)


def adaptive_side_mask(raw: Tensor) -> np.ndarray:
    """True where the positive side of the chain carries more total |offset|."""
    half = raw.shape[1] // 2
    mag = np.abs(raw.data)
    margin = mag[:, half + 1 :].sum(axis=1) - mag[:, :half].sum(axis=1)
    kinks.record(margin)
    return (margin >= 0)[:, None]


def constrain(raw: Tensor, pattern: str) -> Tensor:
    if pattern == "none":
        return raw
    if pattern == "adaptive":
        # left widens toward the positive side, right toward the negative side
        mask = adaptive_side_mask(raw)
        return ops.where(mask, apply_flow_constraint(raw, "left"), apply_flow_constraint(raw, "right"))
    return apply_flow_constraint(raw, pattern)


# -- DFC ------------------------------------------------------------------------------


@dataclass
class DFCBranchWeights:
    offset_w: Tensor  # [2K, C, 3, 3]: K horizontal-kernel dy steps, then K vertical-kernel dx steps
    offset_b: Optional[Tensor]  # [2K]
    wh: Tensor  # [C, C, 1, K]
    wv: Tensor  # [C, C, K, 1]

    @property
    def k(self) -> int:
        return self.wh.shape[-1]

    def tensors(self):
        return tuple(t for t in (self.offset_w, self.offset_b, self.wh, self.wv) if t is not None)


@dataclass
class DeformWeights:
    offset_w: Tensor  # [2*K*K, C, 3, 3]
    offset_b: Optional[Tensor]
    w: Tensor  # [C, C, K, K]


@dataclass
class DFCWeights:
    branches: Dict[str, DFCBranchWeights] = field(default_factory=dict)
    fuse: Optional[Tensor] = None  # [C, 2C, 1, 1]
    deform: Optional[DeformWeights] = None


def predict_offsets(x: Tensor, w: Tensor, b: Optional[Tensor], max_offset: float) -> Tensor:
    return ops.scale(ops.tanh(conv2d(x, w, b, pad=w.shape[-1] // 2)), max_offset)


def _axis_response(x: Tensor, steps: Tensor, kernel: Tensor, axis: str, pattern: str) -> Tensor:
    n, c, h, w = x.shape
    k = steps.shape[1]
    px, py = chain_positions(axis, constrain(steps, pattern))
    samples = ops.reshape(bilinear_sample(x, px, py), (n, c * k, h, w))
    cout = kernel.shape[0]
    return conv2d(samples, ops.reshape(kernel, (cout, c * k, 1, 1)))


def dfc_branch(x: Tensor, weights: DFCBranchWeights, pattern: str, max_offset: float = 2.0) -> Tensor:
    """One constraint pattern: chained 1xK plus Kx1 responses, summed."""
    if pattern not in PATTERNS:
        raise ConfigError(f"unknown DFC pattern {pattern!r}")
    c = x.shape[1]
    k = weights.k
    if weights.wh.shape != (c, c, 1, k) or weights.wv.shape != (c, c, k, 1):
        raise ShapeError(f"dfc_branch: kernels {weights.wh.shape}, {weights.wv.shape} do not fit {c} channels")
    if weights.offset_w.shape[:2] != (2 * k, c):
        raise ShapeError(f"dfc_branch: offset predictor {weights.offset_w.shape} does not fit K={k}, C={c}")
    raw = predict_offsets(x, weights.offset_w, weights.offset_b, max_offset)
    dy = ops.slice_channels(raw, 0, k)
    dx = ops.slice_channels(raw, k, 2 * k)
    horizontal = _axis_response(x, dy, weights.wh, "horizontal", pattern)
    vertical = _axis_response(x, dx, weights.wv, "vertical", pattern)
    return ops.add(horizontal, vertical)


def dfc(x: Tensor, weights: DFCWeights, max_offset: float = 2.0) -> Tensor:
    """Left- and right-pattern branches fused by a 1x1 convolution."""
    left = dfc_branch(x, weights.branches["left"], "left", max_offset)
    right = dfc_branch(x, weights.branches["right"], "right", max_offset)
    return conv2d(ops.concat((left, right), axis=1), weights.fuse)


def flow_conv(x: Tensor, weights: DFCWeights, variant: str, max_offset: float = 2.0) -> Optional[Tensor]:
    """Dispatch on the convolution variant; ``none`` returns None (no branch)."""
    if variant == "none":
        return None
    if variant == "ndc":
        d = weights.deform
        offsets = predict_offsets(x, d.offset_w, d.offset_b, max_offset)
        return deformable_conv2d(x, d.w, offsets)
    if variant == "dfc":
        return dfc(x, weights, max_offset)
    if variant in VARIANT_PATTERNS:
        (pattern,) = VARIANT_PATTERNS[variant]
        return dfc_branch(x, weights.branches[pattern], pattern, max_offset)
    raise ConfigError(f"unknown convolution variant {variant!r}")
