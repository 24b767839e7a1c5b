import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import histoseg.nn as nn
from oracles import conv2d_direct, fd_gradient, rel_err


def scalar_probe(out, rng):
    """Project an op output to a scalar with a fixed random weighting."""
    r = rng.standard_normal(out.shape)
    return nn.mean_all(nn.mul(out, r))


def check_layer_gradient(build, params, tol=1e-4, h=1e-3):
    """FD-check every tensor in `params` against the analytic gradient of
    the scalar built by `build()` (64-bit)."""
    for t in params:
        t.grad[...] = 0
    loss = build()
    nn.backward(loss)
    for t in params:
        analytic = t.grad.copy()
        numeric = fd_gradient(lambda: float(build().data), t.data, h=h)
        assert rel_err(analytic, numeric) < tol


class TestConv2d:
    def test_identity_1x1(self):
        x = nn.Tensor(np.random.default_rng(0).standard_normal((2, 3, 5, 5)).astype(np.float32))
        w = nn.Tensor(np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1))
        out = nn.conv2d(x, w, stride=1)
        np.testing.assert_allclose(out.data, x.data, rtol=1e-6)

    def test_ones_kernel_counts_neighbors(self):
        x = nn.Tensor(np.ones((1, 1, 5, 5), dtype=np.float32))
        w = nn.Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        out = nn.conv2d(x, w, stride=1).data[0, 0]
        assert out[2, 2] == 9.0
        assert out[0, 0] == 4.0
        assert out[0, 2] == 6.0

    def test_7x7_stride2_halves(self):
        x = nn.Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32))
        w = nn.Tensor(np.zeros((8, 3, 7, 7), dtype=np.float32))
        assert nn.conv2d(x, w, stride=2).data.shape == (1, 8, 32, 32)

    def test_matches_direct_oracle(self):
        rng = np.random.default_rng(1)
        for k, s in [(1, 1), (3, 1), (3, 2), (7, 2), (1, 2)]:
            x = rng.standard_normal((2, 3, 9, 8))
            w = rng.standard_normal((4, 3, k, k))
            got = nn.conv2d(nn.Tensor(x), nn.Tensor(w), stride=s).data
            np.testing.assert_allclose(got, conv2d_direct(x, w, s, k // 2), atol=1e-10)

    def test_channel_mismatch_raises(self):
        x = nn.Tensor(np.zeros((1, 3, 8, 8), dtype=np.float32))
        w = nn.Tensor(np.zeros((4, 2, 3, 3), dtype=np.float32))
        with pytest.raises(ValueError, match="channel mismatch"):
            nn.conv2d(x, w)

    def test_linearity(self):
        rng = np.random.default_rng(2)
        w = nn.Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
        x = rng.standard_normal((1, 3, 6, 6)).astype(np.float32)
        y = rng.standard_normal((1, 3, 6, 6)).astype(np.float32)
        a, b = np.float32(1.7), np.float32(-0.4)
        lhs = nn.conv2d(nn.Tensor(a * x + b * y), w).data
        rhs = a * nn.conv2d(nn.Tensor(x), w).data + b * nn.conv2d(nn.Tensor(y), w).data
        assert np.abs(lhs - rhs).max() <= 1e-5

    def test_gradient(self):
        rng = np.random.default_rng(3)
        for k, s in [(1, 1), (3, 1), (3, 2), (7, 2)]:
            x = nn.Tensor(rng.standard_normal((2, 2, 4, 4)), requires_grad=True)
            x.grad = np.zeros_like(x.data)
            w = nn.Tensor(rng.standard_normal((3, 2, k, k)) * 0.5, requires_grad=True)
            w.grad = np.zeros_like(w.data)
            check_layer_gradient(
                lambda: scalar_probe(nn.conv2d(x, w, stride=s), np.random.default_rng(7)),
                [x, w])


class TestBatchNorm:
    def _gb(self, c, rng=None):
        g = nn.Tensor(np.ones(c), requires_grad=True)
        b = nn.Tensor(np.zeros(c), requires_grad=True)
        if rng is not None:
            g.data[:] = rng.uniform(0.5, 1.5, c)
            b.data[:] = rng.standard_normal(c)
        g.grad, b.grad = np.zeros_like(g.data), np.zeros_like(b.data)
        return g, b

    def test_train_identity_on_normalized_input(self):
        # bounded values keep the epsilon-in-denominator effect below 1e-5
        rng = np.random.default_rng(4)
        x = rng.uniform(-1.0, 1.0, (8, 3, 16, 16))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        g, b = self._gb(3)
        rm, rv = np.zeros(3), np.ones(3)
        out = nn.batch_norm(nn.Tensor(x), g, b, rm, rv, training=True)
        assert np.abs(out.data - x).max() <= 1e-5

    def test_constant_channel_returns_beta(self):
        g = nn.Tensor(np.ones(2))
        b = nn.Tensor(np.array([0.3, -0.7]))
        x = nn.Tensor(np.full((4, 2, 5, 5), 3.0))
        out = nn.batch_norm(x, g, b, np.zeros(2), np.ones(2), training=True)
        np.testing.assert_allclose(out.data[:, 0], 0.3, atol=1e-6)
        np.testing.assert_allclose(out.data[:, 1], -0.7, atol=1e-6)

    def test_eval_uses_running_stats(self):
        g = nn.Tensor(np.ones(1))
        b = nn.Tensor(np.zeros(1))
        x = nn.Tensor(np.full((1, 1, 1, 1), 4.0))
        out = nn.batch_norm(x, g, b, np.array([2.0]), np.array([4.0]), training=False)
        assert abs(out.data[0, 0, 0, 0] - 1.0) < 1e-5

    def test_zero_batch_raises(self):
        g = nn.Tensor(np.ones(1))
        b = nn.Tensor(np.zeros(1))
        x = nn.Tensor(np.zeros((0, 1, 4, 4)))
        with pytest.raises(ValueError, match="empty batch"):
            nn.batch_norm(x, g, b, np.zeros(1), np.ones(1), training=True)

    @pytest.mark.parametrize("training", [True, False])
    def test_gradient(self, training):
        rng = np.random.default_rng(5)
        x = nn.Tensor(rng.standard_normal((3, 2, 4, 4)), requires_grad=True)
        x.grad = np.zeros_like(x.data)
        g, b = self._gb(2, rng)
        rm = rng.standard_normal(2)
        rv = rng.uniform(0.5, 2.0, 2)

        def build():
            return scalar_probe(
                nn.batch_norm(x, g, b, rm.copy(), rv.copy(), training=training),
                np.random.default_rng(11))

        check_layer_gradient(build, [x, g, b])


class TestSimpleOps:
    def test_relu_values(self):
        out = nn.relu(nn.Tensor(np.array([-1.0, 0.0, 2.0])))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_max_pool_constant_halves(self):
        x = nn.Tensor(np.full((1, 1, 8, 8), 3.5, dtype=np.float32))
        out = nn.max_pool3x3(x)
        assert out.data.shape == (1, 1, 4, 4)
        assert (out.data == 3.5).all()

    def test_concat_channel_arithmetic(self):
        a = nn.Tensor(np.zeros((2, 64, 4, 4), dtype=np.float32))
        b = nn.Tensor(np.ones((2, 64, 4, 4), dtype=np.float32))
        assert nn.concat_channels(a, b).data.shape == (2, 128, 4, 4)

    def test_concat_mismatch_raises(self):
        a = nn.Tensor(np.zeros((1, 3, 4, 4)))
        b = nn.Tensor(np.zeros((1, 3, 5, 4)))
        with pytest.raises(ValueError, match="mismatch"):
            nn.concat_channels(a, b)

    def test_relu_maxpool_concat_gradients(self):
        # keep values away from the relu kink so central differences are valid
        rng = np.random.default_rng(6)
        raw = rng.standard_normal((2, 2, 4, 4))
        x = nn.Tensor(raw + np.sign(raw) * 0.1, requires_grad=True)
        x.grad = np.zeros_like(x.data)
        y = nn.Tensor(rng.standard_normal((2, 2, 4, 4)), requires_grad=True)
        y.grad = np.zeros_like(y.data)
        probe_rng = np.random.default_rng(13)
        check_layer_gradient(
            lambda: scalar_probe(nn.relu(x), np.random.default_rng(13)), [x])
        check_layer_gradient(
            lambda: scalar_probe(nn.max_pool3x3(x), np.random.default_rng(14)), [x],
            h=1e-4)
        check_layer_gradient(
            lambda: scalar_probe(nn.concat_channels(x, y), np.random.default_rng(15)),
            [x, y])


class TestBilinearUpsample:
    def test_constant_stays_constant(self):
        x = nn.Tensor(np.full((1, 1, 3, 5), 7.0))
        out = nn.bilinear_upsample(x, (9, 10))
        np.testing.assert_allclose(out.data, 7.0, atol=1e-12)

    def test_1d_doubling_values(self):
        x = nn.Tensor(np.array([1.0, 3.0]).reshape(1, 1, 1, 2))
        out = nn.bilinear_upsample(x, (1, 4))
        np.testing.assert_allclose(out.data[0, 0, 0], [1.0, 1.5, 2.5, 3.0], atol=1e-12)

    def test_bounds_preserved_4_to_512(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 2, 4, 4))
        out = nn.bilinear_upsample(nn.Tensor(x), (512, 512)).data
        assert out.min() >= x.min() - 1e-9 and out.max() <= x.max() + 1e-9

    def test_factor2_preserves_mean(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 3, 6, 8))
        out = nn.bilinear_upsample(nn.Tensor(x), (12, 16)).data
        assert abs(out.mean() - x.mean()) < 1e-5

    def test_identity_when_same_size(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((1, 2, 5, 5))
        out = nn.bilinear_upsample(nn.Tensor(x), (5, 5)).data
        np.testing.assert_array_equal(out, x)

    def test_shrink_raises(self):
        with pytest.raises(ValueError, match="smaller"):
            nn.bilinear_upsample(nn.Tensor(np.zeros((1, 1, 4, 4))), (2, 4))

    def test_gradient(self):
        rng = np.random.default_rng(10)
        x = nn.Tensor(rng.standard_normal((1, 2, 3, 4)), requires_grad=True)
        x.grad = np.zeros_like(x.data)
        check_layer_gradient(
            lambda: scalar_probe(nn.bilinear_upsample(x, (7, 9)),
                                 np.random.default_rng(16)), [x])


class TestSoftmax:
    def test_uniform_logits(self):
        out = nn.softmax_channels(nn.Tensor(np.zeros((1, 2, 1, 1))))
        np.testing.assert_allclose(out.data.ravel(), [0.5, 0.5])

    def test_large_logits_no_overflow(self):
        x = np.zeros((1, 2, 1, 1))
        x[0, 0] = 1000.0
        out = nn.softmax_channels(nn.Tensor(x)).data.ravel()
        assert np.isfinite(out).all()
        assert out[0] > 0.999999 and out[1] < 1e-6

    def test_known_values(self):
        x = np.zeros((1, 2, 1, 1))
        x[0, 0], x[0, 1] = 1.0, -1.0
        out = nn.softmax_channels(nn.Tensor(x)).data.ravel()
        assert abs(out[0] - 0.8808) < 1e-4 and abs(out[1] - 0.1192) < 1e-4

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(min_value=-50, max_value=50), min_size=8, max_size=8))
    def test_channel_sums_one(self, vals):
        x = np.array(vals).reshape(1, 2, 2, 2)
        out = nn.softmax_channels(nn.Tensor(x)).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)

    def test_gradient(self):
        rng = np.random.default_rng(11)
        x = nn.Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
        x.grad = np.zeros_like(x.data)
        check_layer_gradient(
            lambda: scalar_probe(nn.softmax_channels(x), np.random.default_rng(17)), [x])


class TestBackward:
    def test_weighted_sum_gradient_is_input(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((3, 4))
        w = nn.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        w.grad = np.zeros_like(w.data)
        loss = nn.mul(nn.mean_all(nn.mul(w, x)), float(x.size))  # = sum(w*x)
        nn.backward(loss)
        np.testing.assert_allclose(w.grad, x, atol=1e-12)

    def test_composite_graph_matches_fd(self):
        rng = np.random.default_rng(13)
        w = nn.Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        w.grad = np.zeros_like(w.data)
        c = rng.standard_normal((2, 3))

        def build():
            h = nn.clamp(nn.mul(w, c), -0.8, 0.8)
            return nn.mean_all(nn.mul(nn.pow_const(nn.add(h, 1.2), 2.0), 0.5))

        loss = build()
        nn.backward(loss)
        numeric = fd_gradient(lambda: float(build().data), w.data)
        assert rel_err(w.grad, numeric) < 1e-4

    def test_unused_parameter_gets_zero(self):
        used = nn.Tensor(np.array([2.0]), requires_grad=True)
        used.grad = np.zeros_like(used.data)
        unused = nn.Tensor(np.array([5.0]), requires_grad=True)
        unused.grad = np.zeros_like(unused.data)
        nn.backward(nn.mean_all(nn.mul(used, 3.0)))
        assert unused.grad[0] == 0.0
        assert used.grad[0] == 3.0

    def test_non_scalar_loss_raises(self):
        t = nn.Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            nn.backward(nn.mul(t, 1.0))

    def test_index_scalar_gradient(self):
        v = nn.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        v.grad = np.zeros_like(v.data)
        nn.backward(nn.mul(nn.index_scalar(v, 1), 4.0))
        np.testing.assert_array_equal(v.grad, [0.0, 4.0, 0.0])


class TestAdam:
    def test_first_step_magnitude(self):
        store = nn.ParamStore(dtype=np.float64)
        p = store.parameter("w", np.array([1.0]))
        p.grad[:] = 1.0
        nn.adam_step(store, lr=1e-3)
        assert abs((1.0 - p.data[0]) - 1e-3) < 1e-9
        assert store.step == 1

    def test_zero_gradient_no_move(self):
        store = nn.ParamStore()
        p = store.parameter("w", np.array([1.0], dtype=np.float32))
        nn.adam_step(store, lr=1e-2)
        assert p.data[0] == 1.0

    def test_identical_params_stay_identical(self):
        store = nn.ParamStore(dtype=np.float64)
        a = store.parameter("a", np.array([0.5, -0.5]))
        b = store.parameter("b", np.array([0.5, -0.5]))
        rng = np.random.default_rng(14)
        for _ in range(10):
            g = rng.standard_normal(2)
            a.grad[:] = g
            b.grad[:] = g
            nn.adam_step(store, lr=1e-2)
        np.testing.assert_array_equal(a.data, b.data)

    def test_duplicate_name_rejected(self):
        store = nn.ParamStore()
        store.parameter("w", np.zeros(1))
        with pytest.raises(ValueError, match="duplicate"):
            store.parameter("w", np.zeros(1))
