import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import convolve2d

from detkit.checks import (
    draw_gate_case,
    finite_difference_gate_grads,
    gate_gradient_error,
    nonzero_extent,
    reference_dilated_conv,
    reference_gate_alpha,
    run_kernel_checks,
    zero_inserted_kernel,
)
from detkit.kernels import (
    AttentionGateParams,
    Grid2D,
    attention_gate_forward,
    attention_gate_grad,
    attention_gate_map,
    conv_cascade,
    dilated_conv2d,
    focal_loss,
    gridding_index,
    receptive_field,
    smooth_l1,
)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# --- dilated convolution --------------------------------------------------------


@pytest.mark.parametrize("rate", [1, 2, 3, 4])
def test_delta_kernel_identity(rng, rate):
    F = rng.normal(size=(7, 9))
    delta = np.zeros((3, 3))
    delta[1, 1] = 1
    assert np.array_equal(dilated_conv2d(F, delta, rate, "same"), F)


def test_rate_one_is_standard_convolution(rng):
    for _ in range(20):
        F = rng.normal(size=(8, 11))
        k = rng.normal(size=(3, 3))
        np.testing.assert_allclose(dilated_conv2d(F, k, 1, "same"), convolve2d(F, k, mode="same"), atol=1e-12)
        np.testing.assert_allclose(dilated_conv2d(F, k, 1, "valid"), convolve2d(F, k, mode="valid"), atol=1e-12)


def test_valid_rate_two_single_output():
    F = np.arange(25, dtype=float).reshape(5, 5)
    out = dilated_conv2d(F, np.ones((3, 3)), 2, "valid")
    assert out.shape == (1, 1)
    assert out[0, 0] == F[np.ix_([0, 2, 4], [0, 2, 4])].sum()
    assert out[0, 0] == reference_dilated_conv(F, np.ones((3, 3)), 2, "valid")[0, 0]


@settings(max_examples=80, deadline=None)
@given(
    st.integers(0, 2**32 - 1),
    st.integers(1, 16),
    st.integers(1, 16),
    st.sampled_from([3, 5]),
    st.integers(1, 4),
)
def test_matches_zero_inserted_kernel(seed, h, w, side, rate):
    r = np.random.default_rng(seed)
    F = r.normal(size=(h, w))
    k = r.normal(size=(side, side))
    np.testing.assert_allclose(dilated_conv2d(F, k, rate), reference_dilated_conv(F, k, rate, "same"), atol=1e-12, rtol=0)
    if (side - 1) * rate + 1 <= min(h, w):
        np.testing.assert_allclose(
            dilated_conv2d(F, k, rate, "valid"), reference_dilated_conv(F, k, rate, "valid"), atol=1e-12, rtol=0
        )


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3), st.integers(1, 4))
def test_linearity(seed, a, b, rate):
    r = np.random.default_rng(seed)
    F1, F2 = r.normal(size=(2, 10, 12))
    k = r.normal(size=(3, 3))
    lhs = dilated_conv2d(a * F1 + b * F2, k, rate)
    rhs = a * dilated_conv2d(F1, k, rate) + b * dilated_conv2d(F2, k, rate)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_conv_errors(rng):
    with pytest.raises(ValueError):
        dilated_conv2d(np.ones((5, 5)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        dilated_conv2d(np.ones((4, 4)), np.ones((3, 3)), 2, "valid")
    with pytest.raises(ValueError):
        dilated_conv2d(np.ones((4, 4)), np.ones((3, 3)), 0)


def test_grid2d_wrapper():
    g = Grid2D.from_array(np.arange(6.0).reshape(2, 3))
    assert (g.width, g.height) == (3, 2)
    assert g.values == (0, 1, 2, 3, 4, 5)
    np.testing.assert_array_equal(dilated_conv2d(g, np.ones((1, 1))), g.to_array())
    with pytest.raises(ValueError):
        Grid2D(2, 2, (1.0,))


# --- receptive field ------------------------------------------------------------


@pytest.mark.parametrize("k, rate, expected", [(3, 2, 5), (3, 1, 3), (3, 4, 9), (5, 3, 13)])
def test_receptive_field(k, rate, expected):
    assert receptive_field(k, rate) == expected
    assert nonzero_extent(zero_inserted_kernel(np.ones((k, k)), rate)) == expected


def test_receptive_field_increasing():
    values = [receptive_field(3, r) for r in range(1, 10)]
    assert values == sorted(set(values))


@pytest.mark.parametrize("k, rate", [(2, 1), (0, 1), (3, 0)])
def test_receptive_field_errors(k, rate):
    with pytest.raises(ValueError):
        receptive_field(k, rate)


# --- gridding index ---------------------------------------------------------------


def test_gridding_constant_and_checkerboard():
    assert gridding_index(np.full((6, 6), 2.5), 2) == 0.0
    checker = (np.indices((8, 8)).sum(axis=0) % 2).astype(float)
    # closed form: class means are 0 or 1 with equal counts, so the between-class
    # variance equals the total variance 0.25
    assert gridding_index(checker, 2) == pytest.approx(0.25 / (0.25 + 1e-12), abs=1e-15)
    assert gridding_index(checker, 2) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.floats(-100, 100))
def test_gridding_bounded_and_shift_invariant(seed, rate, c):
    g = np.random.default_rng(seed).normal(size=(9, 11))
    idx = gridding_index(g, rate)
    assert 0.0 <= idx <= 1.0 + 1e-12
    assert gridding_index(g + c, rate) == pytest.approx(idx, abs=1e-9)


def test_degridding_direction():
    impulse = np.zeros((33, 33))
    impulse[16, 16] = 1.0
    k = np.ones((3, 3))
    assert gridding_index(conv_cascade(impulse, k, [2, 2]), 2) > gridding_index(conv_cascade(impulse, k, [2, 1]), 2)


def test_gridding_errors():
    with pytest.raises(ValueError):
        gridding_index(np.ones((2, 5)), 2)


# --- attention gate -------------------------------------------------------------


def test_gate_zero_params():
    theta = AttentionGateParams.zeros(3, 2, 4)
    x = np.array([1.0, -2.0, 4.0])
    alpha, gated = attention_gate_forward(x, np.ones(2), theta)
    assert alpha == 0.5
    np.testing.assert_array_equal(gated, 0.5 * x)
    grads = attention_gate_grad(x, np.ones(2), theta)
    assert grads.b_psi == 0.25


def test_gate_saturation(rng):
    theta = AttentionGateParams.random(4, 4, 3, rng)
    theta = AttentionGateParams(theta.W_x, theta.W_g, theta.b_xg, np.zeros(3), 20.0)
    x = rng.normal(size=4)
    alpha, gated = attention_gate_forward(x, rng.normal(size=4), theta)
    assert abs(alpha - 1.0) < 1e-8
    np.testing.assert_allclose(gated, x, atol=1e-8 * np.abs(x).max())


def test_gate_forward_matches_scalar_loop(rng):
    for _ in range(50):
        theta = AttentionGateParams.random(4, 4, 3, rng)
        x, g = rng.normal(size=(2, 4))
        alpha, gated = attention_gate_forward(x, g, theta)
        assert alpha == pytest.approx(reference_gate_alpha(x, g, theta), abs=1e-14)
        assert 0.0 < alpha < 1.0
        assert np.array_equal(gated, alpha * x)


def test_gate_gradients_match_finite_differences(rng):
    for _ in range(30):
        assert gate_gradient_error(*draw_gate_case(rng)) < 1e-5


def test_gated_output_gradient(rng):
    x, g, theta = draw_gate_case(rng)
    u = rng.normal(size=x.shape)

    def loss(xv):
        return float(u @ attention_gate_forward(xv, g, theta)[1])

    grads = attention_gate_grad(x, g, theta, upstream=0.0, gated_upstream=u)
    h = 1e-6
    fd = np.array([(loss(x + h * e) - loss(x - h * e)) / (2 * h) for e in np.eye(len(x))])
    np.testing.assert_allclose(grads.x, fd, rtol=1e-5, atol=1e-8)


def test_zero_input_kills_alpha_path_of_gated_output(rng):
    _, g, theta = draw_gate_case(rng)
    d_x = theta.dims[0]
    grads = attention_gate_grad(np.zeros(d_x), g, theta, upstream=0.0, gated_upstream=rng.normal(size=d_x))
    for name in ("g", "W_g", "b_xg", "psi"):
        assert np.all(getattr(grads, name) == 0)
    assert grads.b_psi == 0


def test_upstream_scales_gradients(rng):
    x, g, theta = draw_gate_case(rng)
    one = attention_gate_grad(x, g, theta)
    three = attention_gate_grad(x, g, theta, upstream=3.0)
    np.testing.assert_allclose(three.W_x, 3 * one.W_x)
    fd = finite_difference_gate_grads(x, g, theta)
    np.testing.assert_allclose(one.b_psi, fd["b_psi"][0], rtol=1e-6)


def test_gate_dimension_mismatch(rng):
    theta = AttentionGateParams.zeros(3, 2, 4)
    with pytest.raises(ValueError):
        attention_gate_forward(np.ones(4), np.ones(2), theta)
    with pytest.raises(ValueError):
        AttentionGateParams(np.zeros((3, 4)), np.zeros((2, 5)), np.zeros(4), np.zeros(4), 0.0)


def test_gate_map_loops_positions(rng):
    theta = AttentionGateParams.random(3, 2, 4, rng)
    X = rng.normal(size=(4, 5, 3))
    G = rng.normal(size=(4, 5, 2))
    alpha, gated = attention_gate_map(X, G, theta)
    a, gx = attention_gate_forward(X[2, 3], G[2, 3], theta)
    assert alpha[2, 3] == a
    np.testing.assert_array_equal(gated[2, 3], gx)


# --- losses -----------------------------------------------------------------------


def test_focal_reference_value():
    expected = -0.25 * 0.81 * math.log(0.1)
    assert expected == pytest.approx(0.46627, abs=5e-6)
    assert focal_loss(0.1, 1, 0.25, 2.0) == pytest.approx(expected, abs=1e-15)


@settings(max_examples=100)
@given(st.floats(1e-4, 1 - 1e-4), st.integers(0, 1))
def test_focal_reduces_to_cross_entropy(p, y):
    p_t = p if y else 1 - p
    assert focal_loss(p, y, 1.0 if y else 0.0, 0.0) == pytest.approx(-math.log(p_t), rel=1e-12)


@settings(max_examples=100)
@given(st.floats(1e-4, 1 - 1e-4), st.integers(0, 1), st.floats(0, 1), st.floats(0, 5))
def test_focal_bounded_by_weighted_ce(p, y, a, gamma):
    p_t = p if y else 1 - p
    a_t = a if y else 1 - a
    assert 0.0 <= focal_loss(p, y, a, gamma) <= a_t * -math.log(p_t) + 1e-15


def test_focal_decreases_to_zero():
    values = [focal_loss(p, 1) for p in np.linspace(0.05, 0.999999, 50)]
    assert all(b < a for a, b in zip(values, values[1:]))
    assert values[-1] < 1e-12


@pytest.mark.parametrize("p", [0.0, 1.0])
def test_focal_rejects_boundary(p):
    with pytest.raises(ValueError):
        focal_loss(p, 1)


def test_smooth_l1_examples():
    assert smooth_l1([1, 2, 3], [1, 2, 3]) == 0.0
    assert smooth_l1([2, 0, 0, 0], [0, 0, 0, 0], 1.0) == 1.5
    assert smooth_l1([-2, 0.3], [0, 0]) == smooth_l1([2, -0.3], [0, 0])


@pytest.mark.parametrize("beta", [0.1, 1.0, 3.0])
def test_smooth_l1_continuous_and_differentiable_at_beta(beta):
    eps = 1e-7
    f = lambda d: smooth_l1([d], [0.0], beta)  # noqa: E731
    assert f(beta - eps) == pytest.approx(f(beta + eps), abs=1e-6)
    left_slope = (f(beta - eps) - f(beta - 2 * eps)) / eps
    right_slope = (f(beta + 2 * eps) - f(beta + eps)) / eps
    assert left_slope == pytest.approx(1.0, abs=1e-5)
    assert right_slope == pytest.approx(1.0, abs=1e-5)


def test_smooth_l1_errors():
    with pytest.raises(ValueError):
        smooth_l1([1, 2], [1])
    with pytest.raises(ValueError):
        smooth_l1([1], [1], 0.0)


def test_kernel_check_suite_passes():
    assert all(r.passed for r in run_kernel_checks(0))
