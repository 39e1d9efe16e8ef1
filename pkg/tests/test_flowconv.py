import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowsr.autodiff import Tensor, conv2d, default_dtype
from flowsr.errors import ConfigError, ShapeError
from flowsr.flowconv import (
    DeformWeights,
    DFCBranchWeights,
    DFCWeights,
    adaptive_side_mask,
    apply_flow_constraint,
    bilinear_sample,
    bilinear_sample_point,
    chain_positions,
    constrain,
    deformable_conv2d,
    dfc,
    dfc_branch,
    flow_conv,
)
from flowsr.gradcheck_suite import CASES, run_case

from oracles import bilinear_point


@pytest.fixture(autouse=True)
def f64():
    with default_dtype(np.float64):
        yield


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def chain(values):
    """[1, K, 1, 1] chain of per-step offsets."""
    return T(np.asarray(values, dtype=np.float64).reshape(1, -1, 1, 1))


def steps(t):
    return t.data.reshape(-1)


# -- bilinear sampling -------------------------------------------------------------------------


def test_bilinear_integer_point_reads_pixel():
    x = np.random.default_rng(0).standard_normal((1, 2, 5, 6))
    np.testing.assert_array_equal(bilinear_sample_point(T(x), (2, 3)).data[0], x[0, :, 3, 2])


def test_bilinear_horizontal_midpoint():
    x = np.zeros((1, 1, 1, 2))
    x[0, 0, 0, 1] = 1.0
    assert bilinear_sample_point(T(x), (0.5, 0.0)).data[0, 0] == 0.5


def test_bilinear_reproduces_affine_interior():
    h, w = 6, 7
    yy, xx = np.mgrid[0:h, 0:w]
    img = 0.3 * xx - 1.7 * yy + 0.25
    rng = np.random.default_rng(1)
    px = rng.uniform(0, w - 1, (1, 50))
    py = rng.uniform(0, h - 1, (1, 50))
    got = bilinear_sample(T(img[None, None]), T(px), T(py)).data[0, 0]
    np.testing.assert_allclose(got, 0.3 * px[0] - 1.7 * py[0] + 0.25, atol=1e-12)


def test_bilinear_matches_textbook_oracle_with_zero_padding():
    rng = np.random.default_rng(2)
    img = rng.standard_normal((4, 5))
    px = rng.uniform(-1.5, 5.5, 40)
    py = rng.uniform(-1.5, 4.5, 40)
    got = bilinear_sample(T(img[None, None]), T(px[None]), T(py[None])).data[0, 0]
    want = [bilinear_point(img, a, b) for a, b in zip(px, py)]
    np.testing.assert_allclose(got, want, atol=1e-13)


def test_bilinear_far_outside_is_zero():
    got = bilinear_sample(T(np.ones((1, 1, 3, 3))), T([[-5.0, 10.0]]), T([[1.0, 1.0]])).data
    assert not got.any()


# -- deformable conv --------------------------------------------------------------------------------


def test_deformable_zero_offsets_equals_conv():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 5, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    got = deformable_conv2d(T(x), T(w), T(np.zeros((2, 18, 5, 6))), T(b)).data
    np.testing.assert_allclose(got, conv2d(T(x), T(w), T(b), pad=1).data, atol=1e-10)


def test_deformable_integer_shift_oracle():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    off = np.zeros((1, 18, 5, 5))
    off[:, 0::2] = 1.0  # dx = +1 on every tap
    # every tap reads one pixel further right: the plain conv evaluated one column to the
    # right, with zeros past the right border
    wide = np.concatenate([x, np.zeros((1, 2, 5, 1))], axis=3)
    want = conv2d(T(wide), T(w), pad=1).data[..., 1:]
    got = deformable_conv2d(T(x), T(w), T(off)).data
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_deformable_offset_shape_checked():
    with pytest.raises(ShapeError):
        deformable_conv2d(T(np.ones((1, 2, 4, 4))), T(np.ones((2, 2, 3, 3))), T(np.zeros((1, 9, 4, 4))))


# -- chain positions --------------------------------------------------------------------------------


def test_chain_zero_steps_straight_stencil():
    px, py = chain_positions("horizontal", T(np.zeros((1, 5, 3, 4))))
    np.testing.assert_array_equal(px.data[0, :, 1, 2], [0, 1, 2, 3, 4])
    np.testing.assert_array_equal(py.data[0, :, 1, 2], [1] * 5)
    px, py = chain_positions("vertical", T(np.zeros((1, 5, 3, 4))))
    np.testing.assert_array_equal(py.data[0, :, 1, 2], [-1, 0, 1, 2, 3])
    np.testing.assert_array_equal(px.data[0, :, 1, 2], [2] * 5)


def test_chain_constant_half_steps():
    s = np.full((1, 5, 1, 1), 0.5)
    px, py = chain_positions("horizontal", T(s))
    np.testing.assert_array_equal(py.data.reshape(-1), [1.0, 0.5, 0.0, 0.5, 1.0])
    np.testing.assert_array_equal(px.data.reshape(-1), [-2, -1, 0, 1, 2])


def test_chain_prefix_sum_property():
    rng = np.random.default_rng(5)
    s = rng.uniform(-1, 1, (1, 7, 1, 1))
    _, py = chain_positions("horizontal", T(s))
    d = s.reshape(-1)
    want = [d[0:3].sum(), d[1:3].sum(), d[2], 0.0, d[4], d[4:6].sum(), d[4:7].sum()]
    np.testing.assert_allclose(py.data.reshape(-1), want, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 2), min_size=5, max_size=5))
def test_chain_monotone_for_nonnegative_steps(vals):
    _, py = chain_positions("horizontal", chain(vals))
    y = py.data.reshape(-1)
    assert np.all(np.diff(y[2:]) >= 0) and np.all(np.diff(y[:3][::-1]) >= 0)


def test_chain_rejects_unknown_axis():
    with pytest.raises(ConfigError):
        chain_positions("diagonal", T(np.zeros((1, 3, 1, 1))))


# -- flow constraint -----------------------------------------------------------------------------------


def test_constraint_fixed_point_for_equal_offsets():
    c = chain([0.4] * 5)
    for p in ("left", "right"):
        np.testing.assert_array_equal(steps(apply_flow_constraint(c, p)), [0.4] * 5)


def test_constraint_left_positive_side_example():
    # center at index 1, positive neighbour at index 2: (0.8, 0.2) -> +0.8
    out = steps(apply_flow_constraint(chain([0.8, 0.8, 0.2]), "left"))
    assert out[2] == 0.8


def test_constraint_left_negative_side_example():
    # center 0.2, negative neighbour -0.8 -> -0.2
    out = steps(apply_flow_constraint(chain([-0.8, 0.2, 0.2]), "left"))
    assert out[0] == -0.2


def test_constraint_right_swaps_sides():
    out = steps(apply_flow_constraint(chain([-0.8, 0.2, 0.8]), "right"))
    assert out[0] == -0.8  # negative side grows
    assert out[2] == 0.2  # positive side shrinks


def test_constraint_sign_zero():
    out = steps(apply_flow_constraint(chain([0.0, 0.5, 0.0]), "left"))
    assert out[2] == 0.0 and out[0] == 0.0


def test_constraint_center_untouched_and_pattern_checked():
    rng = np.random.default_rng(6)
    raw = T(rng.uniform(-1, 1, (2, 9, 3, 3)))
    for p in ("left", "right"):
        np.testing.assert_array_equal(apply_flow_constraint(raw, p).data[:, 4], raw.data[:, 4])
    with pytest.raises(ConfigError):
        apply_flow_constraint(raw, "adaptive")


def _ordering_ok(out, pattern):
    mag = np.abs(out)
    half = out.shape[1] // 2
    pos = np.diff(mag[:, half:], axis=1)  # |f_{s+1}| - |f_s| moving outward on the positive side
    neg = np.diff(mag[:, : half + 1][:, ::-1], axis=1)  # same, outward on the negative side
    if pattern == "left":
        return np.all(pos >= 0) and np.all(neg <= 0)
    return np.all(pos <= 0) and np.all(neg >= 0)


@pytest.mark.parametrize("pattern", ["left", "right"])
def test_constraint_ordering_and_idempotence_1000_chains(pattern):
    rng = np.random.default_rng(7)
    raw = T(rng.uniform(-2, 2, (1000, 9, 1, 1)))
    once = apply_flow_constraint(raw, pattern)
    assert _ordering_ok(once.data[..., 0, 0], pattern)
    twice = apply_flow_constraint(once, pattern)
    np.testing.assert_array_equal(twice.data, once.data)
    # signs follow the raw steps
    assert np.all(np.sign(once.data) == np.sign(raw.data))


def test_adaptive_picks_larger_side():
    raw = chain([0.1, 0.1, 0.3, 0.9, 0.9])  # positive side heavier -> left
    assert adaptive_side_mask(raw).all()
    np.testing.assert_array_equal(constrain(raw, "adaptive").data, apply_flow_constraint(raw, "left").data)
    raw = chain([-0.9, -0.9, 0.3, 0.1, 0.1])
    assert not adaptive_side_mask(raw).any()
    np.testing.assert_array_equal(constrain(raw, "adaptive").data, apply_flow_constraint(raw, "right").data)


# -- DFC ---------------------------------------------------------------------------------------------------


def _branch(rng, c, k, zero_offsets=False):
    ow = np.zeros((2 * k, c, 3, 3)) if zero_offsets else rng.standard_normal((2 * k, c, 3, 3))
    return DFCBranchWeights(T(ow), T(np.zeros(2 * k)), T(rng.standard_normal((c, c, 1, k))),
                            T(rng.standard_normal((c, c, k, 1))))


@pytest.mark.parametrize("pattern", ["left", "right", "adaptive", "none"])
def test_dfc_branch_zero_predictor_is_plain_convs(pattern):
    rng = np.random.default_rng(8)
    x = T(rng.standard_normal((1, 3, 6, 7)))
    wts = _branch(rng, 3, 5, zero_offsets=True)
    want = conv2d(x, wts.wh, pad=(0, 2)).data + conv2d(x, wts.wv, pad=(2, 0)).data
    np.testing.assert_allclose(dfc_branch(x, wts, pattern).data, want, atol=1e-10)


@pytest.mark.parametrize("c", [1, 2, 5])
def test_dfc_branch_shape(c):
    rng = np.random.default_rng(c)
    assert dfc_branch(T(rng.standard_normal((2, c, 3, 4))), _branch(rng, c, 5), "left").shape == (2, c, 3, 4)


def test_dfc_branch_small_image_zero_padded():
    rng = np.random.default_rng(9)
    assert dfc_branch(T(rng.standard_normal((1, 2, 2, 2))), _branch(rng, 2, 9), "right").shape == (1, 2, 2, 2)


def test_dfc_branch_channel_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeError):
        dfc_branch(T(np.ones((1, 3, 4, 4))), _branch(rng, 2, 5), "left")
    with pytest.raises(ConfigError):
        dfc_branch(T(np.ones((1, 2, 4, 4))), _branch(rng, 2, 5), "up")


def test_dfc_mean_fusion_and_zero_input():
    rng = np.random.default_rng(10)
    c = 2
    x = T(rng.standard_normal((1, c, 5, 5)))
    eye = np.eye(c)
    fuse = T((0.5 * np.concatenate([eye, eye], axis=1)).reshape(c, 2 * c, 1, 1))
    wts = DFCWeights({p: _branch(rng, c, 5) for p in ("left", "right")}, fuse=fuse)
    want = 0.5 * (dfc_branch(x, wts.branches["left"], "left").data + dfc_branch(x, wts.branches["right"], "right").data)
    np.testing.assert_allclose(dfc(x, wts).data, want, atol=1e-13)
    assert not dfc(T(np.zeros((1, c, 5, 5))), wts).data.any()


def test_dfc_translation_equivariance_zero_offsets():
    rng = np.random.default_rng(12)
    c, k = 2, 5
    wts = _branch(rng, c, k, zero_offsets=True)
    x = np.zeros((1, c, 12, 12))
    x[..., 3:7, 3:7] = rng.standard_normal((1, c, 4, 4))
    y = dfc_branch(T(x), wts, "left").data
    ys = dfc_branch(T(np.roll(x, (2, 1), axis=(2, 3))), wts, "left").data
    np.testing.assert_allclose(ys, np.roll(y, (2, 1), axis=(2, 3)), atol=1e-12)


def test_variant_selection_runs_expected_path(monkeypatch):
    import flowsr.flowconv as fc

    rng = np.random.default_rng(13)
    c = 3
    x = T(rng.standard_normal((1, c, 4, 4)))
    wts = DFCWeights({p: _branch(rng, c, 3) for p in ("left", "right", "adaptive")},
                     fuse=T(rng.standard_normal((c, 2 * c, 1, 1))),
                     deform=DeformWeights(T(np.zeros((18, c, 3, 3))), None, T(rng.standard_normal((c, c, 3, 3)))))
    calls = []
    real_branch, real_deform = fc.dfc_branch, fc.deformable_conv2d
    monkeypatch.setattr(fc, "dfc_branch", lambda x, w, p, m=2.0: calls.append(p) or real_branch(x, w, p, m))
    monkeypatch.setattr(fc, "deformable_conv2d", lambda *a, **k: calls.append("ndc") or real_deform(*a, **k))
    expected = {"ndc": ["ndc"], "ldfc": ["left"], "rdfc": ["right"], "adfc": ["adaptive"], "dfc": ["left", "right"]}
    for variant, want in expected.items():
        calls.clear()
        assert flow_conv(x, wts, variant).shape == x.shape
        assert calls == want, variant
    assert flow_conv(x, wts, "none") is None
    with pytest.raises(ConfigError):
        flow_conv(x, wts, "bogus")


@pytest.mark.parametrize(
    "name",
    ["bilinear_sample", "deformable_conv2d", "dfc_branch_left", "dfc_branch_right", "dfc_branch_adaptive", "dfc"],
)
def test_gradcheck(name):
    result = run_case(next(c for c in CASES if c.name == name), seeds=range(5))
    assert result.passed, f"{name}: {result.rel_err:.3e}"
