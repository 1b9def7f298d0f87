import numpy as np
import pytest

from checks import wrap_input
from oracles import naive_conv2d, naive_matmul, naive_maxpool2
from papnet.optim import finite_difference_check
from papnet.tensor import (LayerParams, conv2d_backward, conv2d_forward, conv_params,
                           dense_backward, dense_forward, dense_params, dropout,
                           maxpool2_backward, maxpool2_forward, relu, relu_backward,
                           sigmoid, sigmoid_backward, upsample2_backward, upsample2_forward)


def params_from(w, b):
    return LayerParams(np.asarray(w, dtype=np.float32), np.asarray(b, dtype=np.float32))


class TestConvForward:
    def test_identity_shaped_kernel(self):
        x = np.ones((1, 1, 3, 3), dtype=np.float32)
        p = params_from([[[[2.0]]]], [0.0])
        out = conv2d_forward(x, p, stride=1, padding=0)
        assert out.shape == (1, 1, 3, 3)
        assert np.array_equal(out, np.full((1, 1, 3, 3), 2.0, dtype=np.float32))

    def test_ramp_window_sums(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        p = params_from(np.ones((1, 1, 3, 3)), [0.0])
        out = conv2d_forward(x, p)
        # frozen from the nested-loop oracle: sums of the four 3x3 windows
        assert np.array_equal(out[0, 0], np.array([[45.0, 54.0], [81.0, 90.0]]))
        oracle = naive_conv2d(x, p.weights, p.bias)
        assert np.allclose(out, oracle, atol=1e-5)

    def test_shape_arithmetic_same_padding(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
        p = conv_params(3, 16, 3, rng)
        assert conv2d_forward(x, p, stride=1, padding=1).shape == (2, 16, 8, 8)

    def test_matches_oracle_on_random_tensors(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            b, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
            k = int(rng.choice([1, 3]))
            h = int(rng.integers(k, 8))
            w = int(rng.integers(k, 8))
            stride = int(rng.choice([1, 2]))
            pad = int(rng.integers(0, 2))
            x = rng.normal(size=(b, cin, h, w)).astype(np.float32)
            p = conv_params(cin, cout, k, rng)
            got = conv2d_forward(x, p, stride, pad)
            want = naive_conv2d(x, p.weights, p.bias, stride, pad)
            assert got.shape == want.shape
            assert np.abs(got - want).max() <= 1e-5

    def test_channel_mismatch_names_both_shapes(self):
        x = np.zeros((1, 2, 4, 4), dtype=np.float32)
        p = conv_params(3, 4, 3, np.random.default_rng(0))
        with pytest.raises(ValueError, match=r"\(1, 2, 4, 4\).*\(4, 3, 3, 3\)"):
            conv2d_forward(x, p)

    def test_input_not_mutated(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 2, 4, 4)).astype(np.float32)
        before = x.copy()
        conv2d_forward(x, conv_params(2, 3, 3, rng), padding=1)
        assert np.array_equal(x, before)


class TestConvBackward:
    def test_zero_upstream_gives_zero_grads(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 2, 4, 4)).astype(np.float32)
        p = conv_params(2, 3, 3, rng)
        out = conv2d_forward(x, p, padding=1)
        gx = conv2d_backward(x, p, np.zeros_like(out), padding=1)
        assert not p.weight_grad.any() and not p.bias_grad.any() and not gx.any()

    def test_weight_grad_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 1, 4, 4)).astype(np.float64)
        p = conv_params(1, 1, 3, rng, dtype=np.float64)

        def loss():
            p.zero_grads()
            y = conv2d_forward(x, p)
            conv2d_backward(x, p, np.ones_like(y))
            return float(y.sum())

        assert finite_difference_check(loss, [p], eps=1e-3) <= 1e-3

    def test_bias_grad_is_per_filter_upstream_sum(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 2, 6, 6)).astype(np.float32)
        p = conv_params(2, 4, 3, rng)
        out = conv2d_forward(x, p, padding=1)
        g = rng.normal(size=out.shape).astype(np.float32)
        conv2d_backward(x, p, g, padding=1)
        assert np.allclose(p.bias_grad, g.sum(axis=(0, 2, 3)), atol=1e-4)

    def test_upstream_shape_mismatch_rejected(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(1, 2, 4, 4)).astype(np.float32)
        p = conv_params(2, 3, 3, rng)
        with pytest.raises(ValueError, match="does not match"):
            conv2d_backward(x, p, np.zeros((1, 3, 4, 4), dtype=np.float32), padding=0)

    def test_input_grad_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(1, 2, 5, 5))
        p = conv_params(2, 3, 3, rng, dtype=np.float64)
        xw = wrap_input(x)

        def loss():
            xw.zero_grads()
            p.zero_grads()
            y = conv2d_forward(xw.weights, p, padding=1)
            gx = conv2d_backward(xw.weights, p, 2.0 * y, padding=1)
            xw.weight_grad += gx
            xw.has_grads = True
            return float((y ** 2).sum())

        assert finite_difference_check(loss, [xw, p], eps=1e-5) <= 1e-3

    def test_grads_accumulate_across_calls(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(1, 1, 4, 4)).astype(np.float32)
        p = conv_params(1, 2, 3, rng)
        out = conv2d_forward(x, p)
        g = np.ones_like(out)
        conv2d_backward(x, p, g)
        once = p.weight_grad.copy()
        conv2d_backward(x, p, g)
        assert np.allclose(p.weight_grad, 2 * once, atol=1e-5)


class TestMaxPool:
    def test_single_window(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32).reshape(1, 1, 2, 2)
        out, idx = maxpool2_forward(x)
        assert out.reshape(()) == 4.0
        assert idx.reshape(()) == 3

    def test_constant_input_tie_breaks_to_first_position(self):
        x = np.full((1, 2, 4, 4), 7.0, dtype=np.float32)
        out, idx = maxpool2_forward(x)
        assert np.all(out == 7.0)
        assert np.all(idx == 0)

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(1, 1, 8, 8)).astype(np.float32)
        out, idx = maxpool2_forward(x)
        o_out, o_idx = naive_maxpool2(x)
        assert np.array_equal(out, o_out)
        assert np.array_equal(idx.astype(np.int64), o_idx)

    def test_odd_extent_rejected(self):
        with pytest.raises(ValueError, match="even"):
            maxpool2_forward(np.zeros((1, 1, 3, 4), dtype=np.float32))

    def test_backward_zero_upstream(self):
        x = np.random.default_rng(0).normal(size=(1, 1, 4, 4)).astype(np.float32)
        _, idx = maxpool2_forward(x)
        g = maxpool2_backward(idx, np.zeros((1, 1, 2, 2), dtype=np.float32), x.shape)
        assert not g.any()

    def test_backward_routes_to_max_position(self):
        x = np.array([[1.0, 9.0], [3.0, 4.0]], dtype=np.float32).reshape(1, 1, 2, 2)
        _, idx = maxpool2_forward(x)
        g = maxpool2_backward(idx, np.array([[[[5.0]]]], dtype=np.float32), x.shape)
        assert np.array_equal(g.reshape(2, 2), np.array([[0.0, 5.0], [0.0, 0.0]]))

    def test_backward_matches_finite_differences_away_from_ties(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(1, 2, 4, 4))
        xw = wrap_input(x)

        def loss():
            xw.zero_grads()
            y, idx = maxpool2_forward(xw.weights)
            xw.weight_grad += maxpool2_backward(idx, 2.0 * y, xw.weights.shape)
            xw.has_grads = True
            return float((y ** 2).sum())

        assert finite_difference_check(loss, [xw], eps=1e-5) <= 1e-3


class TestDense:
    def test_identity_weights(self):
        x = np.array([[1.0, 2.0, 3.0]], dtype=np.float32)
        p = params_from(np.eye(3), np.zeros(3))
        assert np.array_equal(dense_forward(x, p), x)

    def test_zero_input_yields_bias_rows(self):
        p = params_from(np.ones((3, 4)), [1.0, 2.0, 3.0, 4.0])
        out = dense_forward(np.zeros((2, 3), dtype=np.float32), p)
        assert np.array_equal(out, np.tile([1.0, 2.0, 3.0, 4.0], (2, 1)).astype(np.float32))

    def test_matches_naive_matmul(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(2, 3)).astype(np.float32)
        p = dense_params(3, 4, rng)
        got = dense_forward(x, p)
        want = naive_matmul(x, p.weights) + p.bias
        assert np.abs(got - want).max() <= 1e-5

    def test_feature_mismatch_rejected(self):
        p = dense_params(3, 4, np.random.default_rng(0))
        with pytest.raises(ValueError, match="mismatch"):
            dense_forward(np.zeros((1, 5), dtype=np.float32), p)

    def test_backward_zero_upstream(self):
        p = dense_params(2, 2, np.random.default_rng(0))
        x = np.ones((1, 2), dtype=np.float32)
        dense_backward(x, p, np.zeros((1, 2), dtype=np.float32))
        assert not p.weight_grad.any() and not p.bias_grad.any()

    def test_backward_hand_worked_case(self):
        # x = [[1,2]], W = [[3,4],[5,6]], upstream = [[7,8]]
        x = np.array([[1.0, 2.0]], dtype=np.float32)
        p = params_from([[3.0, 4.0], [5.0, 6.0]], [0.0, 0.0])
        gx = dense_backward(x, p, np.array([[7.0, 8.0]], dtype=np.float32))
        assert np.array_equal(p.weight_grad, np.array([[7.0, 8.0], [14.0, 16.0]], dtype=np.float32))
        assert np.array_equal(p.bias_grad, np.array([7.0, 8.0], dtype=np.float32))
        assert np.array_equal(gx, np.array([[53.0, 83.0]], dtype=np.float32))


class TestActivations:
    def test_relu_all_negative(self):
        assert not relu(np.array([-3.0, -1.0], dtype=np.float32)).any()

    def test_relu_all_positive_identity(self):
        x = np.array([0.5, 2.0], dtype=np.float32)
        assert np.array_equal(relu(x), x)

    def test_relu_mixed_and_backward(self):
        x = np.array([-1.0, 0.0, 2.0], dtype=np.float32)
        assert np.array_equal(relu(x), np.array([0.0, 0.0, 2.0], dtype=np.float32))
        g = relu_backward(x, np.array([5.0, 5.0, 5.0], dtype=np.float32))
        assert np.array_equal(g, np.array([0.0, 0.0, 5.0], dtype=np.float32))

    def test_sigmoid_at_zero(self):
        assert sigmoid(np.array([0.0], dtype=np.float32))[0] == 0.5

    def test_sigmoid_large_inputs_no_overflow(self):
        with np.errstate(over="raise"):
            out = sigmoid(np.array([88.0, -88.0, 500.0, -500.0], dtype=np.float32))
        assert out[0] > 0.9999 and out[2] == 1.0
        assert out[1] < 1e-4 and np.isfinite(out).all()

    def test_sigmoid_derivative_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(8,))
        xw = wrap_input(x)

        def loss():
            xw.zero_grads()
            y = sigmoid(xw.weights)
            xw.weight_grad += sigmoid_backward(y, np.ones_like(y))
            xw.has_grads = True
            return float(y.sum(dtype=np.float64))

        assert finite_difference_check(loss, [xw], eps=1e-5) <= 1e-3


class TestDropout:
    def test_rate_zero_identity(self):
        x = np.random.default_rng(0).normal(size=(5, 5)).astype(np.float32)
        out, mask = dropout(x, 0.0, np.random.default_rng(1), training=True)
        assert np.array_equal(out, x) and np.all(mask == 1.0)

    def test_inference_identity_regardless_of_rate(self):
        x = np.random.default_rng(0).normal(size=(5, 5)).astype(np.float32)
        out, mask = dropout(x, 0.9, np.random.default_rng(1), training=False)
        assert np.array_equal(out, x) and np.all(mask == 1.0)

    def test_rate_one_rejected(self):
        with pytest.raises(ValueError, match="rate"):
            dropout(np.zeros(3, dtype=np.float32), 1.0, np.random.default_rng(0), True)

    def test_statistics_at_half_rate(self):
        rng = np.random.default_rng(13)
        x = np.ones(100_000, dtype=np.float32)
        out, mask = dropout(x, 0.5, rng, training=True)
        survivors = np.count_nonzero(out) / x.size
        assert abs(survivors - 0.5) <= 0.01
        assert abs(out.mean() - 1.0) <= 0.02  # inverted scaling preserves the mean
        assert np.array_equal(out, x * mask)


class TestUpsample:
    def test_forward_repeats_blocks(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32).reshape(1, 1, 2, 2)
        out = upsample2_forward(x)
        assert np.array_equal(out[0, 0], np.array(
            [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=np.float32))

    def test_backward_sums_blocks(self):
        g = np.ones((1, 1, 4, 4), dtype=np.float32)
        back = upsample2_backward(g)
        assert np.array_equal(back, np.full((1, 1, 2, 2), 4.0, dtype=np.float32))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(14)
        xw = wrap_input(rng.normal(size=(1, 2, 3, 3)))

        def loss():
            xw.zero_grads()
            y = upsample2_forward(xw.weights)
            xw.weight_grad += upsample2_backward(2.0 * y)
            xw.has_grads = True
            return float((y ** 2).sum())

        assert finite_difference_check(loss, [xw], eps=1e-5) <= 1e-3


def test_all_ops_finite_on_finite_inputs():
    rng = np.random.default_rng(15)
    x = (rng.normal(size=(2, 3, 8, 8)) * 30).astype(np.float32)
    p = conv_params(3, 4, 3, rng)
    y = conv2d_forward(x, p, padding=1)
    pooled, _ = maxpool2_forward(relu(y))
    s = sigmoid(pooled * 50)
    for t in (y, pooled, s):
        assert np.isfinite(t).all()
