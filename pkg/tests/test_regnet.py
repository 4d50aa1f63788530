import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pmpreg import regnet
from pmpreg.regnet import LOGCOSH, SILU, RegularizerParams, layer_shapes
from pmpreg.tensorcore import (
    DualTensor,
    ShapeError,
    conv2d,
    conv2d_adjoint_weights,
    dual_conv2d,
    dual_elementwise_map,
)

from conftest import fd_grad, fd_grad_params, random_params, rel_err


def random_case(rng, H=None, W=None, n_layers=None, n_channels=None):
    H = H or int(rng.integers(2, 9))
    W = W or int(rng.integers(2, 9))
    n_layers = n_layers or int(rng.integers(2, 4))
    n_channels = n_channels or int(rng.integers(1, 5))
    x = rng.normal(size=(1, H, W))
    return x, random_params(rng, n_layers, n_channels)


def test_silu_derivatives_match_fd():
    z = np.linspace(-10, 10, 401)
    h = 1e-5
    assert rel_err(SILU.d1(z), (SILU.value(z + h) - SILU.value(z - h)) / (2 * h)) < 1e-6
    assert rel_err(SILU.d2(z), (SILU.d1(z + h) - SILU.d1(z - h)) / (2 * h)) < 1e-6


def test_psi_values():
    assert regnet.psi(np.zeros(5)) == 0.0
    assert abs(regnet.psi(np.array([1.0])) - 0.433781) < 1e-5
    assert abs(regnet.psi(np.array([30.0])) - (30 - np.log(2))) < 1e-9
    assert np.isfinite(regnet.psi(np.array([1e8, -1e8])))
    assert regnet.psi(np.array([1e8])) == pytest.approx(1e8 - np.log(2), rel=1e-15)


@given(z=st.floats(-0.1, 0.1))
def test_psi_small_argument_law(z):
    assert abs(regnet.psi(np.array([z])) - z * z / 2) <= z**4 / 12 + 1e-18


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.01, 3.0))
def test_regularizer_nonnegative(seed, scale):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 5, 5)) * 3
    assert regnet.regularizer_value(x, random_params(rng, 3, 2, scale)) >= 0.0


def test_param_shapes():
    theta = RegularizerParams.init(4, 8, seed=1)
    assert theta.shapes == [(8, 1, 3, 3), (8, 8, 3, 3), (8, 8, 3, 3), (1, 8, 3, 3)]
    assert RegularizerParams.zeros(2, 1).shapes == [(1, 1, 3, 3), (1, 1, 3, 3)]
    with pytest.raises(ShapeError, match="layer 2"):
        RegularizerParams((np.zeros((2, 1, 3, 3)), np.zeros((2, 2, 3, 3))))
    with pytest.raises(ValueError):
        layer_shapes(1, 4)


def test_param_init_statistics_and_determinism():
    a = RegularizerParams.init(3, 8, seed=7)
    assert a.equal(RegularizerParams.init(3, 8, seed=7))
    assert not a.equal(RegularizerParams.init(3, 8, seed=8))
    hidden = a.weights[1]
    assert hidden.std() == pytest.approx(1.0 / np.sqrt(72), rel=0.15)
    small = RegularizerParams.init(3, 8, seed=7, scale=0.1)
    assert rel_err(small.flat(), 0.1 * a.flat()) < 1e-14


def test_param_vector_space(rng):
    a = random_params(rng)
    b = random_params(rng)
    assert rel_err((a + b).flat(), a.flat() + b.flat()) == 0
    assert rel_err((a * 2.5).flat(), 2.5 * a.flat()) == 0
    assert a.dot(b) == pytest.approx(float(a.flat() @ b.flat()), rel=1e-14)
    assert a.norm() == pytest.approx(np.linalg.norm(a.flat()), rel=1e-14)
    assert a.from_flat(a.flat()).equal(a)


def test_g_forward_zero_weights(rng):
    x = rng.normal(size=(1, 6, 6))
    assert not regnet.g_forward(x, RegularizerParams.zeros(3, 2)).any()
    assert regnet.regularizer_value(x, RegularizerParams.zeros(3, 2)) == 0.0
    assert regnet.regularizer_value(np.zeros((1, 4, 4)), random_params(rng)) == 0.0


def test_g_forward_delta_kernels(rng):
    x = rng.normal(size=(1, 5, 5))
    delta = np.zeros((1, 1, 3, 3))
    delta[0, 0, 1, 1] = 1.0
    theta = RegularizerParams((delta, delta))
    # G = w2 * s(w1 * x) with identity taps
    expected = x * (1.0 / (1.0 + np.exp(-x)))
    assert np.abs(regnet.g_forward(x, theta) - expected).max() < 1e-15


def test_g_forward_last_layer_linearity(rng):
    x, theta = random_case(rng)
    ws = list(theta.weights)
    ws[-1] = ws[-1] * 3.5
    scaled = RegularizerParams(tuple(ws))
    assert rel_err(regnet.g_forward(x, scaled), 3.5 * regnet.g_forward(x, theta)) < 1e-14


def test_regularizer_value_recomposition(rng):
    x, theta = random_case(rng, 6, 5, 3, 3)
    a = x
    for w in theta.weights[:-1]:
        u = conv2d(a, w)
        a = u / (1 + np.exp(-u))
    g = conv2d(a, theta.weights[-1])
    assert regnet.regularizer_value(x, theta) == pytest.approx(np.sum(np.log(np.cosh(g))), rel=1e-12)


def test_x_must_be_single_channel(rng):
    with pytest.raises(ShapeError):
        regnet.g_forward(np.zeros((2, 4, 4)), random_params(rng))


def test_grad_x_zero_weights(rng):
    assert not regnet.grad_x_R(rng.normal(size=(1, 4, 4)), RegularizerParams.zeros(3, 2)).any()


def test_grad_x_matches_fd_20_cases(rng):
    for _ in range(20):
        x, theta = random_case(rng)
        fd = fd_grad(lambda z: regnet.regularizer_value(z, theta), x)
        assert rel_err(regnet.grad_x_R(x, theta), fd) < 1e-5


def _forward_mode_R(x, v, theta):
    d = DualTensor(x, v)
    for w in theta.weights[:-1]:
        d = dual_elementwise_map(dual_conv2d(d, w), SILU)
    g = dual_conv2d(d, theta.weights[-1])
    return float(np.sum(np.tanh(g.primal) * g.tangent))


def test_grad_x_directional_consistency(rng):
    for _ in range(10):
        x, theta = random_case(rng)
        v = rng.normal(size=x.shape)
        lhs = float(np.vdot(regnet.grad_x_R(x, theta), v))
        rhs = _forward_mode_R(x, v, theta)
        assert abs(lhs - rhs) <= 1e-8 * max(abs(rhs), 1.0)


def test_grad_theta_zero_input(rng):
    g = regnet.grad_theta_R(np.zeros((1, 5, 5)), random_params(rng))
    assert g.norm() == 0.0


def test_grad_theta_matches_fd_20_cases(rng):
    for _ in range(20):
        x, theta = random_case(rng)
        fd = fd_grad_params(lambda th: regnet.regularizer_value(x, th), theta)
        assert rel_err(regnet.grad_theta_R(x, theta).flat(), fd.flat()) < 1e-5


def test_grad_theta_last_layer_formula(rng):
    x, theta = random_case(rng, 5, 5, 3, 2)
    a = x
    for w in theta.weights[:-1]:
        a = SILU.value(conv2d(a, w))
    g = conv2d(a, theta.weights[-1])
    expected = conv2d_adjoint_weights(a, np.tanh(g), theta.weights[-1].shape)
    assert rel_err(regnet.grad_theta_R(x, theta).weights[-1], expected) < 1e-14


def test_hvp_zero_direction(rng):
    x, theta = random_case(rng)
    assert not regnet.hvp_x_R(x, np.zeros_like(x), theta).any()


def test_hvp_matches_fd_20_cases(rng):
    eps = 1e-5
    for _ in range(20):
        x, theta = random_case(rng)
        v = rng.normal(size=x.shape)
        fd = (regnet.grad_x_R(x + eps * v, theta) - regnet.grad_x_R(x - eps * v, theta)) / (2 * eps)
        assert rel_err(regnet.hvp_x_R(x, v, theta), fd) < 1e-4


def test_hvp_symmetry(rng):
    for _ in range(10):
        x, theta = random_case(rng)
        u, v = rng.normal(size=(2,) + x.shape)
        a = float(np.vdot(regnet.hvp_x_R(x, u, theta), v))
        b = float(np.vdot(regnet.hvp_x_R(x, v, theta), u))
        assert abs(a - b) <= 1e-8 * max(abs(a), abs(b))


def test_hvp_linear_in_direction(rng):
    x, theta = random_case(rng, 6, 6, 3, 3)
    u, v = rng.normal(size=(2,) + x.shape)
    lhs = regnet.hvp_x_R(x, 2.0 * u - 0.5 * v, theta)
    rhs = 2.0 * regnet.hvp_x_R(x, u, theta) - 0.5 * regnet.hvp_x_R(x, v, theta)
    assert np.abs(lhs - rhs).max() <= 1e-10 * max(1.0, np.abs(rhs).max())


def test_mixed_zero_cases(rng):
    x, theta = random_case(rng)
    assert regnet.mixed_grad_theta(x, np.zeros_like(x), theta).norm() == 0.0
    zeros = theta.zeros_like()
    assert regnet.mixed_grad_theta(x, rng.normal(size=x.shape), zeros).norm() == 0.0


def test_mixed_matches_fd_20_cases(rng):
    for _ in range(20):
        x, theta = random_case(rng)
        p = rng.normal(size=x.shape)
        fd = fd_grad_params(lambda th: float(np.vdot(p, regnet.grad_x_R(x, th))), theta)
        assert rel_err(regnet.mixed_grad_theta(x, p, theta).flat(), fd.flat()) < 1e-4


def test_second_order_batched_equals_per_sample(rng):
    theta = random_params(rng, 3, 3)
    x = rng.normal(size=(4, 1, 6, 6))
    p = rng.normal(size=x.shape)
    hvp, mixed = regnet.second_order(x, p, theta)
    per = [regnet.second_order(x[i], p[i], theta) for i in range(4)]
    assert rel_err(hvp, np.stack([h for h, _ in per])) < 1e-13
    total = per[0][1]
    for _, m in per[1:]:
        total = total + m
    assert rel_err(mixed.flat(), total.flat()) < 1e-13


def test_deterministic(rng):
    x, theta = random_case(rng)
    p = rng.normal(size=x.shape)
    a = regnet.second_order(x, p, theta)
    b = regnet.second_order(x.copy(), p.copy(), theta)
    assert a[0].tobytes() == b[0].tobytes()
    assert a[1].flat().tobytes() == b[1].flat().tobytes()


def test_degenerate_1x1_image(rng):
    theta = random_params(rng, 2, 1)
    x = np.array([[[0.7]]])
    fd = fd_grad(lambda z: regnet.regularizer_value(z, theta), x)
    assert rel_err(regnet.grad_x_R(x, theta), fd) < 1e-6
