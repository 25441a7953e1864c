import numpy as np
import pytest

from demesh.layers import (Conv2d, Dense, FrozenParameterError, MaxFeatureMap,
                           MaxPool2x2, MaxUnpool2x2, NonFiniteGradientError,
                           Param, ReLU, ShapeError, Sigmoid, adam_step,
                           gather_pool_indices, grad_check, maxpool2_indices,
                           mfm, mfm_backward, softmax_cross_entropy,
                           unpool_indices)


def scalar_through(layer, x, weights):
    """Build fn(x) = <weights, layer(x)> with its analytic input gradient."""
    def fn(inp):
        out = layer.forward(inp)
        for p in layer.params():
            p.zero_grad()
        grad_in = layer.backward(weights)
        return float(np.sum(out * weights)), grad_in
    return fn


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def test_conv_identity_kernel_copies_input():
    conv = Conv2d(1, 1, 1)
    conv.weight.value[:] = 1.0
    x = np.arange(12.0).reshape(1, 1, 3, 4)
    np.testing.assert_array_equal(conv.forward(x), x)

def test_conv_single_window_dot_product():
    # [[1,2],[3,4]] against a 2x2 kernel of ones: 1+2+3+4 = 10
    conv = Conv2d(1, 1, 2)
    conv.weight.value[:] = 1.0
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    out = conv.forward(x)
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 10.0

def test_conv_output_extent_formula():
    rng = np.random.default_rng(0)
    for h, w, k, s, p in [(5, 7, 3, 1, 0), (8, 8, 3, 2, 1), (9, 6, 5, 2, 2),
                          (4, 4, 1, 1, 0)]:
        conv = Conv2d(2, 3, k, stride=s, pad=p, rng=rng)
        out = conv.forward(rng.normal(size=(1, 2, h, w)))
        assert out.shape[2] == (h + 2 * p - k) // s + 1
        assert out.shape[3] == (w + 2 * p - k) // s + 1

def test_conv_channel_mismatch_names_dimensions():
    conv = Conv2d(3, 4, 3, name="enc1")
    with pytest.raises(ShapeError, match="enc1.*2 channels.*expects 3"):
        conv.forward(np.zeros((1, 2, 8, 8)))

def test_conv_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    conv = Conv2d(4, 3, 3, stride=1, pad=1, rng=rng)
    x = rng.normal(size=(1, 4, 5, 5))
    weights = rng.normal(size=(1, 3, 5, 5))
    report = grad_check(scalar_through(conv, x, weights), x)
    assert report.passed, report

def test_conv_parameter_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    conv = Conv2d(2, 3, 3, stride=2, pad=1, rng=rng)
    x = rng.normal(size=(2, 2, 6, 6))
    weights = rng.normal(size=(2, 3, 3, 3))

    def fn_of_weight(w):
        conv.weight.value = w
        conv.weight.zero_grad()
        out = conv.forward(x)
        conv.backward(weights)
        return float(np.sum(out * weights)), conv.weight.grad.copy()

    def fn_of_bias(b):
        conv.bias.value = b
        conv.bias.zero_grad()
        out = conv.forward(x)
        conv.backward(weights)
        return float(np.sum(out * weights)), conv.bias.grad.copy()

    assert grad_check(fn_of_weight, conv.weight.value.copy()).passed
    assert grad_check(fn_of_bias, conv.bias.value.copy()).passed


# ---------------------------------------------------------------------------
# pooling / unpooling
# ---------------------------------------------------------------------------

def test_pool_single_window_takes_max_and_records_position():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    out, idx = maxpool2_indices(x)
    assert out[0, 0, 0, 0] == 4.0
    assert idx[0, 0, 0, 0] == 3  # window position (1, 1) = 2*1 + 1

def test_pool_constant_ties_break_to_first_scan_position():
    out, idx = maxpool2_indices(np.full((1, 2, 4, 4), 5.0))
    np.testing.assert_array_equal(out, np.full((1, 2, 2, 2), 5.0))
    np.testing.assert_array_equal(idx, np.zeros((1, 2, 2, 2), dtype=idx.dtype))

def test_pool_rejects_odd_extents():
    with pytest.raises(ShapeError, match="even"):
        maxpool2_indices(np.zeros((1, 1, 3, 4)))

def test_unpool_single_window_scatter():
    pooled = np.array(4.0).reshape(1, 1, 1, 1)
    idx = np.array(3, dtype=np.int64).reshape(1, 1, 1, 1)
    out = unpool_indices(pooled, idx, (2, 2))
    np.testing.assert_array_equal(out[0, 0], [[0.0, 0.0], [0.0, 4.0]])

def test_unpool_zero_input_gives_zero_output():
    idx = np.zeros((1, 1, 2, 2), dtype=np.int64)
    out = unpool_indices(np.zeros((1, 1, 2, 2)), idx, (4, 4))
    assert not out.any()

def test_unpool_rejects_out_of_range_indices():
    idx = np.full((1, 1, 1, 1), 4, dtype=np.int64)
    with pytest.raises(ValueError, match="out of bounds"):
        unpool_indices(np.ones((1, 1, 1, 1)), idx, (2, 2))

def test_pool_unpool_round_trip_is_sparse_identity():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 8, 8))
    pooled, idx = maxpool2_indices(x)
    restored = unpool_indices(pooled, idx, (8, 8))
    # plain-loop oracle: the recorded position of every window holds the
    # pooled value, everything else is zero
    expected = np.zeros_like(x)
    for n, c, i, j in np.ndindex(pooled.shape):
        r, col = divmod(int(idx[n, c, i, j]), 2)
        expected[n, c, 2 * i + r, 2 * j + col] = pooled[n, c, i, j]
    np.testing.assert_array_equal(restored, expected)

def test_pool_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    pool = MaxPool2x2()
    x = rng.normal(size=(1, 2, 6, 6))
    weights = rng.normal(size=(1, 2, 3, 3))
    assert grad_check(scalar_through(pool, x, weights), x).passed

def test_unpool_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    pool = MaxPool2x2()
    pool.forward(rng.normal(size=(1, 2, 8, 8)))
    unpool = MaxUnpool2x2(pool)
    x = rng.normal(size=(1, 2, 4, 4))
    weights = rng.normal(size=(1, 2, 8, 8))
    assert grad_check(scalar_through(unpool, x, weights), x).passed

def test_gather_is_adjoint_of_unpool_scatter():
    rng = np.random.default_rng(6)
    _, idx = maxpool2_indices(rng.normal(size=(1, 2, 8, 8)))
    u = rng.normal(size=(1, 2, 4, 4))
    v = rng.normal(size=(1, 2, 8, 8))
    lhs = np.sum(unpool_indices(u, idx, (8, 8)) * v)
    rhs = np.sum(u * gather_pool_indices(v, idx))
    assert abs(lhs - rhs) < 1e-12


# ---------------------------------------------------------------------------
# max-feature-map
# ---------------------------------------------------------------------------

def test_mfm_takes_channelwise_max():
    x = np.zeros((1, 2, 1, 1))
    x[0, 0] = 1.0
    x[0, 1] = 3.0
    assert mfm(x)[0, 0, 0, 0] == 3.0

def test_mfm_rejects_odd_channel_count():
    with pytest.raises(ShapeError, match="even channel"):
        mfm(np.zeros((1, 3, 2, 2)))

def test_mfm_tie_routes_gradient_to_first_half():
    x = np.ones((1, 4, 2, 2))
    out = mfm(x)
    np.testing.assert_array_equal(out, np.ones((1, 2, 2, 2)))
    grad = mfm_backward(np.ones((1, 2, 2, 2)), x)
    np.testing.assert_array_equal(grad[:, :2], np.ones((1, 2, 2, 2)))
    np.testing.assert_array_equal(grad[:, 2:], np.zeros((1, 2, 2, 2)))

def test_mfm_gradient_matches_finite_differences_away_from_ties():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(1, 4, 3, 3))
    # keep every pairwise comparison far from the tie so fd stays one-sided
    gaps = np.abs(x[:, :2] - x[:, 2:])
    x[:, :2] += np.where(gaps < 1e-3, 0.1, 0.0)
    layer = MaxFeatureMap()
    weights = rng.normal(size=(1, 2, 3, 3))
    assert grad_check(scalar_through(layer, x, weights), x).passed

def test_mfm_works_on_flat_feature_vectors():
    x = np.array([[1.0, 5.0, 2.0, 0.5]])
    np.testing.assert_array_equal(mfm(x), [[2.0, 5.0]])


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------

def test_dense_identity_weight_copies_flattened_input():
    fc = Dense(6, 6)
    fc.weight.value = np.eye(6)
    x = np.arange(6.0).reshape(1, 2, 3)
    np.testing.assert_array_equal(fc.forward(x)[0], np.arange(6.0))

def test_dense_ones_weight_sums_input():
    fc = Dense(5, 4)
    fc.weight.value[:] = 1.0
    out = fc.forward(np.ones((2, 5)))
    np.testing.assert_array_equal(out, np.full((2, 4), 5.0))

def test_dense_length_mismatch():
    fc = Dense(6, 2, name="head")
    with pytest.raises(ShapeError, match="head.*length 4"):
        fc.forward(np.zeros((1, 4)))

def test_dense_gradients_match_finite_differences():
    rng = np.random.default_rng(10)
    fc = Dense(6, 3, rng=rng)
    x = rng.normal(size=(2, 6))
    weights = rng.normal(size=(2, 3))
    assert grad_check(scalar_through(fc, x, weights), x).passed

    def fn_of_weight(w):
        fc.weight.value = w
        fc.weight.zero_grad()
        out = fc.forward(x)
        fc.backward(weights)
        return float(np.sum(out * weights)), fc.weight.grad.copy()

    assert grad_check(fn_of_weight, fc.weight.value.copy()).passed


# ---------------------------------------------------------------------------
# adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_parameters_and_moments_untouched():
    p = Param("w", np.array([1.0, -2.0]))
    adam_step(p, np.zeros(2), lr=0.1)
    np.testing.assert_array_equal(p.value, [1.0, -2.0])
    assert not p.m.any() and not p.v.any()
    assert p.step == 1

def test_adam_single_step_matches_hand_computed_update():
    # one step at g=1, lr=0.1, defaults: m=0.1, v=0.001, m^=1, v^=1,
    # delta = lr * 1 / (sqrt(1) + eps)
    p = Param("w", np.array([0.0]))
    adam_step(p, np.array([1.0]), lr=0.1)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = (1 - beta1) * 1.0
    v = (1 - beta2) * 1.0
    expected = -0.1 * (m / (1 - beta1)) / (np.sqrt(v / (1 - beta2)) + eps)
    np.testing.assert_allclose(p.value, [expected], rtol=0, atol=0)

def test_adam_constant_gradient_update_magnitude_approaches_lr():
    p = Param("w", np.array([0.0]))
    lr = 0.01
    prev = p.value.copy()
    for _ in range(400):
        prev = p.value.copy()
        adam_step(p, np.array([1.0]), lr=lr)
    assert abs(abs((p.value - prev)[0]) - lr) < 1e-4 * lr

def test_adam_step_counter_increments_by_one():
    p = Param("w", np.zeros(3))
    for expected in range(1, 5):
        adam_step(p, np.ones(3), lr=0.1)
        assert p.step == expected

def test_adam_rejects_non_finite_gradient():
    p = Param("w", np.zeros(2))
    with pytest.raises(NonFiniteGradientError, match="'w'"):
        adam_step(p, np.array([1.0, np.nan]), lr=0.1)

def test_adam_rejects_shape_mismatch_and_frozen_params():
    p = Param("w", np.zeros(2))
    with pytest.raises(ShapeError):
        adam_step(p, np.zeros(3), lr=0.1)
    p.frozen = True
    with pytest.raises(FrozenParameterError):
        adam_step(p, np.zeros(2), lr=0.1)


# ---------------------------------------------------------------------------
# grad_check itself
# ---------------------------------------------------------------------------

def test_grad_check_accepts_correct_gradient():
    def sum_of_squares(x):
        return float(np.sum(x * x)), 2.0 * x

    x = np.random.default_rng(11).normal(size=(3, 4))
    report = grad_check(sum_of_squares, x)
    assert report.passed and report.max_rel_err < 1e-6

def test_grad_check_through_conv_mfm_dense_stack():
    rng = np.random.default_rng(12)
    conv = Conv2d(1, 4, 3, pad=1, rng=rng)
    act = MaxFeatureMap()
    fc = Dense(2 * 6 * 6, 3, rng=rng)
    weights = rng.normal(size=(1, 3))

    def fn(x):
        out = fc.forward(act.forward(conv.forward(x)))
        for layer in (conv, fc):
            for p in layer.params():
                p.zero_grad()
        grad = conv.backward(act.backward(fc.backward(weights)))
        return float(np.sum(out * weights)), grad

    x = rng.normal(size=(1, 1, 6, 6))
    assert grad_check(fn, x).passed

def test_grad_check_flags_corrupted_backward():
    def wrong(x):
        return float(np.sum(x * x)), -2.0 * x  # sign flipped on purpose

    report = grad_check(wrong, np.random.default_rng(13).normal(size=(2, 2)))
    assert not report.passed


# ---------------------------------------------------------------------------
# shared engine properties
# ---------------------------------------------------------------------------

def test_forward_and_backward_stay_finite_on_random_stacks():
    rng = np.random.default_rng(14)
    for trial in range(5):
        conv = Conv2d(2, 8, 3, pad=1, rng=rng)
        layers = [conv, MaxFeatureMap(), MaxPool2x2(), ReLU(), Sigmoid()]
        x = rng.normal(size=(2, 2, 8, 8)) * 10.0 ** trial
        out = x
        for layer in layers:
            out = layer.forward(out)
        assert np.all(np.isfinite(out))
        grad = rng.normal(size=out.shape)
        for layer in reversed(layers):
            grad = layer.backward(grad)
        assert np.all(np.isfinite(grad))
        assert all(np.all(np.isfinite(p.grad)) for p in conv.params())

def test_forward_is_deterministic_for_identical_inputs():
    rng = np.random.default_rng(15)
    conv1 = Conv2d(1, 4, 3, pad=1, rng=np.random.default_rng(42))
    conv2 = Conv2d(1, 4, 3, pad=1, rng=np.random.default_rng(42))
    x = rng.normal(size=(1, 1, 6, 6))
    np.testing.assert_array_equal(conv1.forward(x), conv2.forward(x))

def test_softmax_cross_entropy_gradient_matches_finite_differences():
    rng = np.random.default_rng(16)
    labels = np.array([0, 2, 1])

    def fn(logits):
        loss, grad = softmax_cross_entropy(logits, labels)
        return loss, grad

    assert grad_check(fn, rng.normal(size=(3, 4))).passed
