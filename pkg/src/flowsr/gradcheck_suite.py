"""Finite-difference gradient checks for every differentiable op and the micro network.

Each case draws inputs in [-1, 1] from a seeded generator and reduces the op
output to a scalar through a fixed random projection, so that no gradient
component cancels by symmetry. Cases with piecewise-linear pieces (|x|,
bilinear floor, max/min in the flow constraint) redraw their inputs until the
kink monitor reports every kink at least ``kink_margin`` away.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from flowsr.autodiff import kinks, ops
from flowsr.autodiff.attention import AttentionWeights, window_attention
from flowsr.autodiff.gradcheck import gradcheck
from flowsr.autodiff.nn import conv2d, layernorm, pixel_shuffle, pixel_unshuffle
from flowsr.autodiff.tensor import Tensor, default_dtype, no_grad
from flowsr.flowconv import DFCBranchWeights, DFCWeights, bilinear_sample, deformable_conv2d, dfc, dfc_branch
from flowsr.model import NetworkConfig, forward, init_params, l1_loss
from flowsr.quaternion import QuaternionConvWeights, QuaternionFeature, qconv2d, qsm, split_activation

Built = Tuple[Callable[[], Tensor], List[Tensor]]


@dataclass
class Case:
    name: str
    build: Callable[[np.random.Generator], Built]
    tol: float = 1e-4
    kinked: bool = False
    max_coords: Optional[int] = None


@dataclass
class CaseResult:
    name: str
    rel_err: float  # worst over seeds
    tol: float
    seeds: int
    redraws: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.rel_err <= self.tol


def _u(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)


def _with_projection(make: Callable[[np.random.Generator], Tuple[Callable[[], Tensor], List[Tensor]]]):
    """Wrap ``make(rng) -> (forward, inputs)`` with a projection fixed at build time."""

    def build(rng):
        fwd, inputs = make(rng)
        with no_grad():
            shape = fwd().shape
        proj = rng.standard_normal(shape)
        return (lambda: ops.sum(ops.mul_constant(fwd(), proj))), inputs

    return build


# -- case builders ------------------------------------------------------------------------


def _elementwise(op):
    def make(rng):
        a = _u(rng, 2, 3, 4)
        return (lambda: op(a)), [a]

    return make


def _binary(op):
    def make(rng):
        a, b = _u(rng, 2, 3, 4), _u(rng, 2, 3, 4)
        return (lambda: op(a, b)), [a, b]

    return make


def _matmul(rng):
    a, b = _u(rng, 2, 3, 4), _u(rng, 2, 4, 5)
    return (lambda: ops.matmul(a, b)), [a, b]


def _concat(rng):
    a, b = _u(rng, 1, 2, 3, 3), _u(rng, 1, 3, 3, 3)
    return (lambda: ops.concat((a, b), axis=1)), [a, b]


def _slice(rng):
    a = _u(rng, 1, 5, 3, 3)
    return (lambda: ops.slice_channels(a, 1, 4)), [a]


def _reshape(rng):
    a = _u(rng, 2, 6, 2)
    return (lambda: ops.reshape(a, (4, 6))), [a]


def _softmax(rng):
    a = _u(rng, 2, 3, 5, scale=2.0)
    return (lambda: ops.softmax(a, axis=-1)), [a]


def _conv(k, pad, stride, bias=True):
    def make(rng):
        x = _u(rng, 1, 2, 5, 5)
        w = _u(rng, 3, 2, k, k)
        b = _u(rng, 3) if bias else None
        ins = [x, w] + ([b] if bias else [])
        return (lambda: conv2d(x, w, b, stride=stride, pad=pad)), ins

    return make


def _layernorm(rng):
    x, g, b = _u(rng, 2, 4, 3, 3), _u(rng, 4), _u(rng, 4)
    return (lambda: layernorm(x, g, b)), [x, g, b]


def _attention(shift):
    def make(rng):
        c = 4
        x = _u(rng, 1, c, 4, 4)
        wts = AttentionWeights(_u(rng, 3 * c, c, 1, 1), _u(rng, 3 * c), _u(rng, c, c, 1, 1), _u(rng, c))
        return (lambda: window_attention(x, wts, 2, shift, heads=2)), [x, *wts]

    return make


def _pixel_shuffle(rng):
    x = _u(rng, 1, 8, 2, 3)
    return (lambda: pixel_shuffle(x, 2)), [x]


def _pixel_unshuffle(rng):
    x = _u(rng, 1, 2, 4, 6)
    return (lambda: pixel_unshuffle(x, 2)), [x]


def _qweights(rng, cq_out, cq_in, k):
    return QuaternionConvWeights(*(_u(rng, cq_out, cq_in, k, k) for _ in range(4)), bias=_u(rng, 4 * cq_out))


def _qconv(rng):
    q = QuaternionFeature(*(_u(rng, 1, 2, 4, 4) for _ in range(4)))
    w = _qweights(rng, 2, 2, 3)

    def fwd():
        return ops.concat(qconv2d(q, w, pad=1).parts(), axis=1)

    return fwd, [*q.parts(), *w.tensors()]


def _split_gelu(rng):
    q = QuaternionFeature(*(_u(rng, 1, 2, 3, 3) for _ in range(4)))
    return (lambda: ops.concat(split_activation(q, ops.gelu).parts(), axis=1)), list(q.parts())


def _qsm(rng):
    f = _u(rng, 1, 6, 4, 4)
    w = _qweights(rng, 2, 2, 3)
    return (lambda: qsm(f, w)), [f, *w.tensors()]


def _bilinear(rng):
    x = _u(rng, 2, 3, 5, 5)
    px = Tensor(rng.uniform(-0.8, 4.8, size=(2, 7)), requires_grad=True)
    py = Tensor(rng.uniform(-0.8, 4.8, size=(2, 7)), requires_grad=True)
    return (lambda: bilinear_sample(x, px, py)), [x, px, py]


def _deformable(rng):
    x = _u(rng, 1, 2, 5, 5)
    w = _u(rng, 3, 2, 3, 3)
    off = _u(rng, 1, 18, 5, 5, scale=1.5)
    b = _u(rng, 3)
    return (lambda: deformable_conv2d(x, w, off, b)), [x, w, off, b]


def _branch_weights(rng, c, k):
    return DFCBranchWeights(_u(rng, 2 * k, c, 3, 3), _u(rng, 2 * k, scale=0.5), _u(rng, c, c, 1, k), _u(rng, c, c, k, 1))


def _dfc_branch(pattern):
    def make(rng):
        x = _u(rng, 1, 2, 6, 6)
        wts = _branch_weights(rng, 2, 5)
        return (lambda: dfc_branch(x, wts, pattern)), [x, *wts.tensors()]

    return make


def _dfc(rng):
    x = _u(rng, 1, 2, 6, 6)
    wts = DFCWeights({p: _branch_weights(rng, 2, 5) for p in ("left", "right")}, fuse=_u(rng, 2, 4, 1, 1))
    ins = [x, *wts.branches["left"].tensors(), *wts.branches["right"].tensors(), wts.fuse]
    return (lambda: dfc(x, wts)), ins


def _l1_build(rng):
    # targets stay at least 0.1 away from the prediction, so |pred - target| has no tie
    pred = _u(rng, 2, 3, 4)
    gap = rng.uniform(0.1, 1.0, size=pred.shape) * rng.choice([-1.0, 1.0], size=pred.shape)
    target = Tensor(pred.data + gap)
    return (lambda: l1_loss(pred, target)), [pred]


MICRO = dict(channels=6, feu_per_ffb=1, ffb_count=1, window=2, heads=1, scale=2, dfc_k=3)


def _micro_build(rng):
    """End-to-end: C=6, 1 FEU, 1 FFB, window 2, K=3, x2 on an 8x8 input."""
    cfg = NetworkConfig(**MICRO)
    params = init_params(cfg, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    for name, p in params.items():
        # random (nonzero) offset predictors and affine terms so every path is exercised
        if ".offset." in name or name.endswith((".b", ".beta", ".bias")):
            p.data[...] = rng.uniform(-0.5, 0.5, size=p.shape)
    lr = Tensor(rng.uniform(0, 1, size=(1, 3, 8, 8)), requires_grad=True)
    with no_grad():
        pred = forward(lr, params, cfg).data
    gap = rng.uniform(0.05, 0.5, size=pred.shape) * rng.choice([-1.0, 1.0], size=pred.shape)
    target = Tensor(pred + gap)
    return (lambda: l1_loss(forward(lr, params, cfg), target)), [lr, *params.values()]


def _abs_build(rng):
    a = _u(rng, 2, 3, 4)
    return (lambda: ops.abs(a)), [a]


def _leaky_build(rng):
    a = _u(rng, 2, 3, 4)
    return (lambda: ops.leaky_relu(a, 0.1)), [a]


def _scalar_reduction(op):
    def build(rng):
        a = _u(rng, 2, 3, 4)
        return (lambda: ops.scale(op(a), 1.7)), [a]

    return build


def _diamond(rng):
    # shared subexpression: both branches depend on the same intermediate
    a = _u(rng, 2, 3)
    b = _u(rng, 2, 3)

    def fwd():
        s = ops.mul(a, b)
        return ops.add(ops.mul(s, s), ops.tanh(s))

    return fwd, [a, b]


def _composite(rng):
    x, w, b = _u(rng, 1, 2, 5, 5), _u(rng, 4, 2, 3, 3), _u(rng, 4)
    g, be = _u(rng, 4), _u(rng, 4)
    return (lambda: layernorm(conv2d(x, w, b, pad=1), g, be)), [x, w, b, g, be]


CASES: List[Case] = [
    Case("add", _with_projection(_binary(ops.add))),
    Case("sub", _with_projection(_binary(ops.sub))),
    Case("mul", _with_projection(_binary(ops.mul))),
    Case("matmul", _with_projection(_matmul)),
    Case("concat", _with_projection(_concat)),
    Case("slice_channels", _with_projection(_slice)),
    Case("reshape", _with_projection(_reshape)),
    Case("softmax", _with_projection(_softmax)),
    Case("gelu", _with_projection(_elementwise(ops.gelu))),
    Case("tanh", _with_projection(_elementwise(ops.tanh))),
    Case("leaky_relu", _with_projection(_leaky_build), kinked=True),
    Case("abs", _with_projection(_abs_build), kinked=True),
    Case("sum", _scalar_reduction(ops.sum)),
    Case("mean", _scalar_reduction(ops.mean)),
    Case("diamond_graph", _with_projection(_diamond)),
    Case("conv2d_k3_p1", _with_projection(_conv(3, 1, 1))),
    Case("conv2d_k3_p0_s2", _with_projection(_conv(3, 0, 2))),
    Case("conv2d_k1", _with_projection(_conv(1, 0, 1, bias=False))),
    Case("layernorm", _with_projection(_layernorm)),
    Case("conv2d_layernorm", _with_projection(_composite)),
    Case("window_attention", _with_projection(_attention(0))),
    Case("window_attention_shifted", _with_projection(_attention(1))),
    Case("pixel_shuffle", _with_projection(_pixel_shuffle)),
    Case("pixel_unshuffle", _with_projection(_pixel_unshuffle)),
    Case("qconv2d", _with_projection(_qconv)),
    Case("split_gelu", _with_projection(_split_gelu)),
    Case("qsm", _with_projection(_qsm)),
    Case("bilinear_sample", _with_projection(_bilinear), kinked=True),
    Case("deformable_conv2d", _with_projection(_deformable), kinked=True),
    Case("dfc_branch_left", _with_projection(_dfc_branch("left")), tol=1e-3, kinked=True),
    Case("dfc_branch_right", _with_projection(_dfc_branch("right")), tol=1e-3, kinked=True),
    Case("dfc_branch_adaptive", _with_projection(_dfc_branch("adaptive")), tol=1e-3, kinked=True),
    Case("dfc", _with_projection(_dfc), tol=1e-3, kinked=True),
    Case("l1_loss", _l1_build, kinked=True),
    Case("micro_network", _micro_build, tol=1e-3, kinked=True, max_coords=6),
]


def case_names() -> List[str]:
    return [c.name for c in CASES]


def _kink_distance(fn: Callable[[], Tensor]) -> float:
    # graph recording stays on: sampling positions only report kinks when differentiable
    with kinks.monitor() as rec:
        fn()
    return kinks.closest(rec)


def run_case(
    case: Case,
    seeds: Iterable[int] = range(5),
    kink_margin: float = 1e-3,
    max_redraws: int = 1000,
    eps: float = 1e-4,
) -> CaseResult:
    t0 = time.perf_counter()
    worst, redraws, n = 0.0, 0, 0
    with default_dtype(np.float64):
        for seed in seeds:
            rng = np.random.default_rng([seed, 7919])
            for _ in range(max_redraws):
                fn, inputs = case.build(rng)
                if not case.kinked or _kink_distance(fn) >= kink_margin:
                    break
                redraws += 1
            else:
                raise RuntimeError(f"{case.name}: no kink-free draw in {max_redraws} attempts")
            res = gradcheck(fn, inputs, eps=eps, tol=case.tol, max_coords=case.max_coords, rng=rng)
            worst = max(worst, res.rel_err)
            n += 1
    return CaseResult(case.name, worst, case.tol, n, redraws, time.perf_counter() - t0)


def run_suite(
    names: Optional[Sequence[str]] = None,
    seeds: Iterable[int] = range(5),
    log: Optional[Callable[[str], None]] = None,
) -> List[CaseResult]:
    """Run the selected cases (all by default); returns one result per case."""
    selected = CASES if names is None else [c for c in CASES if c.name in set(names)]
    if names is not None and len(selected) != len(set(names)):
        unknown = sorted(set(names) - {c.name for c in CASES})
        raise KeyError(f"unknown gradcheck case(s): {unknown}")
    seeds = list(seeds)
    results = []
    for case in selected:
        r = run_case(case, seeds)
        results.append(r)
        if log is not None:
            status = "ok" if r.passed else "FAIL"
            log(f"{r.name:<26} rel_err {r.rel_err:.2e}  tol {r.tol:.0e}  redraws {r.redraws:3d}  {r.seconds:6.2f}s  {status}")
    return results
