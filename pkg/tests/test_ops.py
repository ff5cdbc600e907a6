"""Array-kernel tests: frozen hand values, brute-force oracles, adjoints."""
import numpy as np
import numpy.testing as npt
import pytest

from icefusion.errors import (
    ConfigurationError,
    DegenerateStatisticsError,
    DimensionError,
    UsageError,
)
from icefusion.ops import (
    NormState,
    avg_smooth,
    avg_smooth_backward,
    batch_norm,
    batch_norm_backward,
    conv2d,
    conv2d_backward,
    dropout,
    relu,
    sigmoid,
    upsample,
)
from icefusion.rng import SeededRng

from helpers import avg_smooth_reference, conv2d_reference, upsample_reference


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_identity_kernel():
    x = np.arange(9.0).reshape(1, 3, 3)
    kernels = np.ones((1, 1, 1, 1))
    out = conv2d(x, kernels, np.zeros(1), dilation=1)
    npt.assert_array_equal(out, x)


def test_conv2d_ramp_dilation2_center_is_108():
    # input[0, y, x] = 5y + x on a 5x5 grid; 3x3 all-ones kernel, dilation 2.
    # The center output sums the nine taps at offsets {-2, 0, 2}^2 = 9 * 12.
    y, x = np.mgrid[0:5, 0:5]
    ramp = (5.0 * y + x)[None]
    out = conv2d(ramp, np.ones((1, 1, 3, 3)), np.zeros(1), dilation=2)
    assert out[0, 2, 2] == 108.0
    npt.assert_array_equal(out, conv2d_reference(ramp, np.ones((1, 1, 3, 3)), np.zeros(1), 2))


@pytest.mark.parametrize("dilation", [1, 2, 4])
def test_conv2d_matches_bruteforce_oracle(dilation):
    # Integer-valued inputs keep every float64 sum exact, so the two routes
    # must agree bit for bit regardless of summation order.
    rng = np.random.default_rng(2000 + dilation)
    for _ in range(100):
        cin = int(rng.integers(1, 4))
        cout = int(rng.integers(1, 4))
        x = rng.integers(-9, 10, (cin, 6, 6)).astype(np.float64)
        kernels = rng.integers(-4, 5, (cout, cin, 3, 3)).astype(np.float64)
        bias = rng.integers(-3, 4, cout).astype(np.float64)
        got = conv2d(x, kernels, bias, dilation=dilation)
        want = conv2d_reference(x, kernels, bias, dilation)
        npt.assert_array_equal(got, want)


def test_conv2d_dilation_equals_zero_inflated_kernel():
    rng = np.random.default_rng(7)
    for dilation in (2, 4):
        x = rng.normal(size=(2, 12, 12))
        kernels = rng.normal(size=(3, 2, 3, 3))
        bias = rng.normal(size=3)
        size = 2 * dilation + 1
        inflated = np.zeros((3, 2, size, size))
        inflated[:, :, ::dilation, ::dilation] = kernels
        got = conv2d(x, kernels, bias, dilation=dilation)
        want = conv2d(x, inflated, bias, dilation=1)
        npt.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_conv2d_linearity():
    rng = np.random.default_rng(8)
    kernels = rng.normal(size=(2, 2, 3, 3))
    zero_bias = np.zeros(2)
    for _ in range(20):
        x = rng.normal(size=(2, 5, 5))
        y = rng.normal(size=(2, 5, 5))
        a, b = rng.normal(size=2)
        lhs = conv2d(a * x + b * y, kernels, zero_bias, dilation=2)
        rhs = a * conv2d(x, kernels, zero_bias, 2) + b * conv2d(y, kernels, zero_bias, 2)
        npt.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-12)


def test_conv2d_validation():
    x = np.zeros((2, 4, 4))
    with pytest.raises(ConfigurationError):
        conv2d(x, np.zeros((1, 2, 2, 2)), np.zeros(1))  # even kernel
    with pytest.raises(ConfigurationError):
        conv2d(x, np.zeros((1, 2, 3, 3)), np.zeros(1), dilation=0)
    with pytest.raises(DimensionError):
        conv2d(x, np.zeros((1, 3, 3, 3)), np.zeros(1))  # channel mismatch
    with pytest.raises(DimensionError):
        conv2d(x, np.zeros((2, 2, 3, 3)), np.zeros(1))  # bias length


def test_conv2d_backward_matches_finite_differences():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 5, 5))
    kernels = rng.normal(size=(3, 2, 3, 3))
    bias = rng.normal(size=3)
    weight = rng.normal(size=(3, 5, 5))  # scalarizes the output
    grad_x, grad_k, grad_b = conv2d_backward(weight, x, kernels, dilation=2)

    def loss(xx, kk, bb):
        return float((conv2d(xx, kk, bb, dilation=2) * weight).sum())

    step = 1e-6
    for arr, grad, name in ((x, grad_x, "x"), (kernels, grad_k, "k"), (bias, grad_b, "b")):
        for index in range(arr.size):
            orig = arr.flat[index]
            arr.flat[index] = orig + step
            hi = loss(x, kernels, bias)
            arr.flat[index] = orig - step
            lo = loss(x, kernels, bias)
            arr.flat[index] = orig
            fd = (hi - lo) / (2 * step)
            assert abs(grad.flat[index] - fd) < 1e-6, name


# ---------------------------------------------------------------------------
# avg_smooth


def test_avg_smooth_unit_window_is_identity():
    x = np.random.default_rng(0).normal(size=(2, 4, 4))
    npt.assert_array_equal(avg_smooth(x, 1), x)


def test_avg_smooth_constant_preserved_exactly():
    x = np.full((1, 5, 7), 3.25)
    for d in (2, 3, 4, 5):
        npt.assert_array_equal(avg_smooth(x, d), x)


def test_avg_smooth_4x4_window2_frozen():
    x = np.arange(16.0).reshape(1, 4, 4)
    want = np.array([[0.0, 0.5, 1.5, 2.5],
                     [2.0, 2.5, 3.5, 4.5],
                     [6.0, 6.5, 7.5, 8.5],
                     [10.0, 10.5, 11.5, 12.5]])
    npt.assert_array_equal(avg_smooth(x, 2)[0], want)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_avg_smooth_matches_bruteforce_oracle(d):
    rng = np.random.default_rng(3000 + d)
    for _ in range(100):
        x = rng.integers(-9, 10, (2, 6, 6)).astype(np.float64)
        npt.assert_array_equal(avg_smooth(x, d), avg_smooth_reference(x, d))


def test_avg_smooth_output_within_input_range():
    rng = np.random.default_rng(13)
    for d in (2, 3, 4):
        x = rng.normal(size=(1, 8, 8))
        out = avg_smooth(x, d)
        assert out.min() >= x.min() - 1e-12
        assert out.max() <= x.max() + 1e-12


def test_avg_smooth_backward_is_adjoint():
    # <smooth(x), g> == <x, smooth_backward(g)> for all x, g.
    rng = np.random.default_rng(14)
    for d in (2, 3, 5):
        x = rng.normal(size=(2, 7, 6))
        g = rng.normal(size=(2, 7, 6))
        lhs = float((avg_smooth(x, d) * g).sum())
        rhs = float((x * avg_smooth_backward(g, d)).sum())
        npt.assert_allclose(lhs, rhs, rtol=1e-12)


def test_avg_smooth_validation():
    with pytest.raises(ConfigurationError):
        avg_smooth(np.zeros((1, 4, 4)), 0)
    with pytest.raises(ConfigurationError):
        avg_smooth_backward(np.zeros((1, 4, 4)), -1)


# ---------------------------------------------------------------------------
# upsample


def test_upsample_factor1_identity():
    x = np.random.default_rng(1).normal(size=(3, 4, 4))
    for mode in ("nearest", "bilinear"):
        npt.assert_array_equal(upsample(x, 1, mode), x)


def test_upsample_nearest_replicates_blocks():
    x = np.array([[[0.0, 1.0], [2.0, 3.0]]])
    want = np.array([[[0.0, 0.0, 1.0, 1.0],
                      [0.0, 0.0, 1.0, 1.0],
                      [2.0, 2.0, 3.0, 3.0],
                      [2.0, 2.0, 3.0, 3.0]]])
    npt.assert_array_equal(upsample(x, 2, "nearest"), want)


def test_upsample_bilinear_2x2_frozen():
    # Centers at (i + 0.5)/2 - 0.5 clamped to [0, 1]: 0, 0.25, 0.75, 1.
    # The map [[0,1],[2,3]] is the plane 2y + x, so values follow directly.
    x = np.array([[[0.0, 1.0], [2.0, 3.0]]])
    want = np.array([[0.0, 0.25, 0.75, 1.0],
                     [0.5, 0.75, 1.25, 1.5],
                     [1.5, 1.75, 2.25, 2.5],
                     [2.0, 2.25, 2.75, 3.0]])
    npt.assert_array_equal(upsample(x, 2, "bilinear")[0], want)


@pytest.mark.parametrize("mode", ["nearest", "bilinear"])
def test_upsample_matches_per_pixel_oracle(mode):
    rng = np.random.default_rng(4000 if mode == "nearest" else 4001)
    for _ in range(100):
        factor = int(rng.integers(1, 5))
        x = rng.integers(-9, 10, (2, 6, 6)).astype(np.float64)
        got = upsample(x, factor, mode)
        npt.assert_array_equal(got, upsample_reference(x, factor, mode))


def test_upsample_nearest_preserves_population_variance_exactly():
    # Integer inputs with power-of-two counts: both variances are exact.
    rng = np.random.default_rng(15)
    x = rng.integers(-8, 9, (1, 2, 2)).astype(np.float64)
    up = upsample(x, 4, "nearest")
    assert np.var(up) == np.var(x)
    assert up.min() == x.min() and up.max() == x.max()


def test_upsample_bilinear_never_increases_variance():
    rng = np.random.default_rng(16)
    for _ in range(200):
        factor = int(rng.integers(2, 6))
        x = rng.normal(size=(1, int(rng.integers(2, 5)), int(rng.integers(2, 5))))
        up = upsample(x, factor, "bilinear")
        assert np.var(up) <= np.var(x) + 1e-12


def test_upsample_validation():
    with pytest.raises(ConfigurationError):
        upsample(np.zeros((1, 2, 2)), 0)
    with pytest.raises(ConfigurationError):
        upsample(np.zeros((1, 2, 2)), 2, "cubic")


# ---------------------------------------------------------------------------
# batch_norm


def test_batch_norm_train_moments():
    rng = np.random.default_rng(17)
    x = rng.normal(size=(2, 1, 2, 2))
    # Tiny epsilon isolates the normalization itself.
    state = NormState.initial(1, epsilon=1e-12)
    out, cache = batch_norm(x, state, mode="train")
    assert abs(out.mean()) < 1e-9
    assert abs(out.var() - 1.0) < 1e-6
    assert cache is not None
    # With the default epsilon the variance deficit is eps / (var + eps).
    out_default, _ = batch_norm(x, NormState.initial(1), mode="train")
    assert abs(out_default.var() - 1.0) < 1e-4


def test_batch_norm_constant_channel_becomes_zero():
    x = np.full((1, 2, 3, 3), 7.5)
    out, _ = batch_norm(x, NormState.initial(2), mode="train")
    npt.assert_array_equal(out, np.zeros_like(x))


def test_batch_norm_running_statistics_update():
    x = np.array([[[[1.0, 3.0], [5.0, 7.0]]]])  # mean 4, population var 5
    state = NormState.initial(1)
    batch_norm(x, state, mode="train")
    npt.assert_allclose(state.running_mean, [0.9 * 0.0 + 0.1 * 4.0], rtol=1e-12)
    npt.assert_allclose(state.running_var, [0.9 * 1.0 + 0.1 * 5.0], rtol=1e-12)


def test_batch_norm_eval_uses_running_statistics():
    state = NormState.initial(1)
    state.running_mean = np.array([2.0])
    state.running_var = np.array([4.0])
    state.gamma = np.array([3.0])
    state.beta = np.array([-1.0])
    x = np.full((1, 1, 1, 1), 6.0)
    out, cache = batch_norm(x, state, mode="eval")
    want = 3.0 * (6.0 - 2.0) / np.sqrt(4.0 + 1e-5) - 1.0
    npt.assert_allclose(out, [[[[want]]]], rtol=1e-15)
    assert cache is None


def test_batch_norm_degenerate_batch_rejected():
    with pytest.raises(DegenerateStatisticsError):
        batch_norm(np.zeros((1, 3, 1, 1)), NormState.initial(3), mode="train")
    with pytest.raises(UsageError):
        batch_norm(np.zeros((1, 1, 2, 2)), NormState.initial(1), mode="test")


def test_batch_norm_backward_matches_finite_differences():
    rng = np.random.default_rng(18)
    x = rng.normal(size=(2, 2, 2, 2))
    state = NormState.initial(2)
    state.gamma = rng.normal(size=2)
    state.beta = rng.normal(size=2)
    weight = rng.normal(size=x.shape)

    def loss(xx):
        fresh = NormState(gamma=state.gamma, beta=state.beta,
                          running_mean=np.zeros(2), running_var=np.ones(2))
        out, _ = batch_norm(xx, fresh, mode="train")
        return float((out * weight).sum())

    out, cache = batch_norm(x, NormState(gamma=state.gamma, beta=state.beta,
                                         running_mean=np.zeros(2),
                                         running_var=np.ones(2)), mode="train")
    grad_x, grad_gamma, grad_beta = batch_norm_backward(weight, cache, state)

    step = 1e-6
    for index in range(x.size):
        orig = x.flat[index]
        x.flat[index] = orig + step
        hi = loss(x)
        x.flat[index] = orig - step
        lo = loss(x)
        x.flat[index] = orig
        assert abs(grad_x.flat[index] - (hi - lo) / (2 * step)) < 1e-6

    xhat = cache[0]
    npt.assert_allclose(grad_gamma, (weight * xhat).sum(axis=(0, 2, 3)), rtol=1e-12)
    npt.assert_allclose(grad_beta, weight.sum(axis=(0, 2, 3)), rtol=1e-12)


def test_batch_norm_backward_needs_train_cache():
    with pytest.raises(UsageError):
        batch_norm_backward(np.zeros((1, 1, 2, 2)), None, NormState.initial(1))


# ---------------------------------------------------------------------------
# Elementwise pieces


def test_relu_idempotent_and_sigmoid_range():
    x = np.linspace(-40.0, 40.0, 201)
    npt.assert_array_equal(relu(relu(x)), relu(x))
    assert sigmoid(np.zeros(1))[0] == 0.5
    s = sigmoid(x)
    assert np.all((s > 0.0) & (s < 1.0))


def test_dropout_rate_zero_and_eval_are_identity():
    x = np.random.default_rng(19).normal(size=(3, 4, 4))
    out, scale = dropout(x, 0.0, SeededRng(1), mode="train")
    npt.assert_array_equal(out, x)
    assert scale is None
    out, scale = dropout(x, 0.5, SeededRng(1), mode="eval")
    npt.assert_array_equal(out, x)
    assert scale is None


def test_dropout_monte_carlo_mean():
    x = np.ones(1_000_000)
    out, scale = dropout(x, 0.1, SeededRng(99), mode="train")
    assert abs(out.mean() - 1.0) < 0.01
    npt.assert_array_equal(out, x * scale)


def test_dropout_deterministic_per_stream():
    x = np.ones((2, 8, 8))
    a, _ = dropout(x, 0.3, SeededRng(5).derive(2), mode="train")
    b, _ = dropout(x, 0.3, SeededRng(5).derive(2), mode="train")
    c, _ = dropout(x, 0.3, SeededRng(5).derive(3), mode="train")
    npt.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_dropout_validation():
    x = np.ones(4)
    with pytest.raises(ConfigurationError):
        dropout(x, 1.0, SeededRng(0), mode="train")
    with pytest.raises(ConfigurationError):
        dropout(x, -0.1, SeededRng(0), mode="train")
    with pytest.raises(UsageError):
        dropout(x, 0.5, None, mode="train")
    with pytest.raises(UsageError):
        dropout(x, 0.5, SeededRng(0), mode="off")
