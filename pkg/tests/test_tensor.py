"""Autograd core: op semantics, gradients vs finite differences, and the
determinism/finiteness invariants."""

import numpy as np
import pytest

from acar import tensor as T
from acar.tensor import NonFiniteError, Tensor, grad_check


class TestConv2d:
    def test_one_by_one_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 5, 5))
        w = np.eye(3).reshape(3, 3, 1, 1)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_weight_and_bias(self):
        x = np.random.default_rng(1).normal(size=(2, 4, 6))
        out = T.conv2d(Tensor(x), Tensor(np.zeros((5, 2, 3, 3))), Tensor(np.zeros(5)))
        assert out.shape == (5, 4, 6)
        assert not out.data.any()

    def test_default_padding_preserves_size(self):
        x = np.random.default_rng(2).normal(size=(1, 2, 7, 9))
        w = np.random.default_rng(3).normal(size=(4, 2, 5, 5))
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(4)))
        assert out.shape == (1, 4, 7, 9)

    def test_input_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        proj = rng.normal(size=(3, 4, 4))

        def f(xt):
            return T.sum_over_axes(T.mul(T.conv2d(xt, Tensor(w), Tensor(b)), Tensor(proj)))

        assert grad_check(f, rng.normal(size=(2, 4, 4))) <= 1e-4

    def test_weight_and_bias_gradients(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 2, 4, 4))
        proj = rng.normal(size=(2, 3, 4, 4))
        w_fixed = rng.normal(size=(3, 2, 3, 3))

        def fw(wt):
            return T.sum_over_axes(T.mul(T.conv2d(Tensor(x), wt, Tensor(np.zeros(3))),
                                         Tensor(proj)))

        def fb(bt):
            return T.sum_over_axes(T.mul(T.conv2d(Tensor(x), Tensor(w_fixed), bt),
                                         Tensor(proj)))

        assert grad_check(fw, rng.normal(size=(3, 2, 3, 3))) <= 1e-4
        assert grad_check(fb, rng.normal(size=3)) <= 1e-4

    def test_channel_mismatch_raises(self):
        with pytest.raises(ValueError):
            T.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))),
                     Tensor(np.zeros(3)))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            T.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((3, 2, 2, 2))),
                     Tensor(np.zeros(3)))


class TestLinear:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(4, 3))
        out = T.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_weight_gives_bias(self):
        b = np.array([1.0, -2.0])
        out = T.linear(Tensor(np.ones((5, 3))), Tensor(np.zeros((2, 3))), Tensor(b))
        np.testing.assert_array_equal(out.data, np.tile(b, (5, 1)))

    def test_gradient(self):
        rng = np.random.default_rng(1)
        w = rng.normal(size=(4, 3))
        b = rng.normal(size=4)
        proj = rng.normal(size=(2, 5, 4))

        def f(xt):
            return T.sum_over_axes(T.mul(T.linear(xt, Tensor(w), Tensor(b)), Tensor(proj)))

        assert grad_check(f, rng.normal(size=(2, 5, 3))) <= 1e-4

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            T.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), Tensor(np.zeros(4)))


class TestSoftmax:
    def test_equal_logits(self):
        out = T.softmax(Tensor(np.full((2, 5), 3.7)), axis=1)
        np.testing.assert_allclose(out.data, 0.2, atol=1e-15)

    def test_analytic_pair(self):
        out = T.softmax(Tensor(np.array([0.0, np.log(3.0)])), axis=0)
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)

    def test_single_entry_axis(self):
        out = T.softmax(Tensor(np.array([[123.0], [-456.0]])), axis=1)
        np.testing.assert_array_equal(out.data, [[1.0], [1.0]])

    def test_sums_to_one_for_extreme_logits(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(4, 7, 3)) * 300.0
        out = T.softmax(Tensor(x), axis=1)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(3)
        proj = rng.normal(size=(3, 4))

        def f(xt):
            return T.sum_over_axes(T.mul(T.softmax(xt, axis=1), Tensor(proj)))

        assert grad_check(f, rng.normal(size=(3, 4))) <= 1e-4


class TestLayerNorm:
    def test_constant_input_gives_zeros(self):
        out = T.layer_norm(Tensor(np.full((6,), 4.2)), axis=0)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_plus_minus_one(self):
        out = T.layer_norm(Tensor(np.array([1.0, -1.0])), axis=0)
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-4)

    def test_zero_mean_unit_variance(self):
        rng = np.random.default_rng(4)
        out = T.layer_norm(Tensor(rng.normal(size=(3, 8, 2))), axis=1)
        np.testing.assert_allclose(out.data.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=1), 1.0, atol=1e-4)

    def test_gradient(self):
        rng = np.random.default_rng(5)
        proj = rng.normal(size=(2, 6, 3))

        def f(xt):
            return T.sum_over_axes(T.mul(T.layer_norm(xt, axis=1), Tensor(proj)))

        assert grad_check(f, rng.normal(size=(2, 6, 3))) <= 1e-4

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            T.layer_norm(Tensor(np.ones(3)), axis=0, eps=0.0)


class TestDropout:
    def test_p_zero_is_identity(self):
        x = np.random.default_rng(0).normal(size=(4, 4))
        out = T.dropout(Tensor(x), 0.0, training=True, rng=np.random.default_rng(1))
        np.testing.assert_array_equal(out.data, x)

    def test_inference_is_identity(self):
        x = np.random.default_rng(0).normal(size=(4, 4))
        out = T.dropout(Tensor(x), 0.9, training=False, rng=np.random.default_rng(1))
        np.testing.assert_array_equal(out.data, x)

    def test_keep_rate_statistics(self):
        rng = np.random.default_rng(123)
        out = T.dropout(Tensor(np.ones(1_000_000)), 0.5, training=True, rng=rng)
        keep = np.count_nonzero(out.data) / out.size
        assert abs(keep - 0.5) <= 0.01
        # surviving values carry the 1/(1-p) scale
        assert np.allclose(out.data[out.data != 0], 2.0)

    def test_p_out_of_range(self):
        with pytest.raises(ValueError):
            T.dropout(Tensor(np.ones(3)), 1.0, training=True, rng=np.random.default_rng(0))

    def test_same_seed_bitwise_identical(self):
        x = np.random.default_rng(0).normal(size=(64,))
        a = T.dropout(Tensor(x), 0.3, True, np.random.default_rng(7))
        b = T.dropout(Tensor(x), 0.3, True, np.random.default_rng(7))
        np.testing.assert_array_equal(a.data, b.data)


class TestElementwiseAndReductions:
    def test_relu(self):
        out = T.relu(Tensor(np.array([-1.0, 2.0])))
        np.testing.assert_array_equal(out.data, [0.0, 2.0])

    def test_add_zero_exact(self):
        x = np.random.default_rng(0).normal(size=(3, 3))
        out = T.add(Tensor(x), Tensor(np.zeros((3, 3))))
        np.testing.assert_array_equal(out.data, x)

    def test_concat_preserves_order_and_split_recovers(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(4, 3, 3)), rng.normal(size=(4, 3, 3))
        cat = T.concat_channels([Tensor(a), Tensor(b)])
        assert cat.shape == (8, 3, 3)
        np.testing.assert_array_equal(cat.data[:4], a)
        np.testing.assert_array_equal(cat.data[4:], b)

    def test_mean_over_singleton_axis(self):
        x = np.random.default_rng(2).normal(size=(1, 5, 2))
        out = T.mean_over_axis(Tensor(x), 0)
        np.testing.assert_array_equal(out.data, x[0])

    def test_max_over_axes_and_gradient(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 4)) * 3.0

        def f(xt):
            return T.sum_over_axes(T.max_over_axes(xt, (1, 2)))

        np.testing.assert_array_equal(T.max_over_axes(Tensor(x), (1, 2)).data,
                                      x.max(axis=(1, 2)))
        assert grad_check(f, x) <= 1e-4

    def test_max_tie_routes_to_first(self):
        x = Tensor(np.array([[1.0, 3.0, 3.0]]), requires_grad=True)
        out = T.sum_over_axes(T.max_over_axes(x, (1,)))
        out.backward()
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])

    def test_sigmoid_log_exp_gradients(self):
        rng = np.random.default_rng(6)
        proj = rng.normal(size=(3, 3))
        for op in (T.sigmoid, T.exp):
            def f(xt, op=op):
                return T.sum_over_axes(T.mul(op(xt), Tensor(proj)))
            assert grad_check(f, rng.normal(size=(3, 3))) <= 1e-4

        def flog(xt):
            return T.sum_over_axes(T.mul(T.log(xt), Tensor(proj)))
        assert grad_check(flog, rng.random((3, 3)) + 0.5) <= 1e-4

    def test_clip_gradient_masks_outside(self):
        x = Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
        T.sum_over_axes(T.clip_values(x, 0.0, 1.0)).backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


class TestFiniteness:
    def test_log_of_negative_raises(self):
        with pytest.raises(NonFiniteError):
            T.log(Tensor(np.array([-1.0])))

    def test_overflowing_exp_raises(self):
        with pytest.raises(NonFiniteError):
            T.exp(Tensor(np.array([1e4])))

    def test_nan_input_rejected_at_creation(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([np.nan]))


class TestAutogradEngine:
    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = T.add(T.mul(x, x), x)   # x^2 + x -> dy/dx = 2x + 1
        y.backward()
        np.testing.assert_allclose(x.grad, [7.0])

    def test_broadcast_add_unbroadcasts_gradient(self):
        x = Tensor(np.ones((1, 4)), requires_grad=True)
        y = T.add(x, Tensor(np.ones((3, 4))))
        T.sum_over_axes(y).backward()
        np.testing.assert_array_equal(x.grad, np.full((1, 4), 3.0))

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            T.mul(x, 2.0).backward()

    def test_no_grad_suppresses_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = T.mul(x, 2.0)
        assert y._parents == () and not y.requires_grad

    def test_slice_gradient(self):
        x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        T.sum_over_axes(x[1:, :2]).backward()
        expect = np.zeros((3, 4))
        expect[1:, :2] = 1.0
        np.testing.assert_array_equal(x.grad, expect)

    def test_determinism_bitwise(self):
        def run():
            rng = np.random.default_rng(99)
            x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
            h = T.relu(T.linear(x, Tensor(rng.normal(size=(5, 6))), Tensor(rng.normal(size=5))))
            out = T.sum_over_axes(T.softmax(h, axis=1))
            out.backward()
            return out.data.copy(), x.grad.copy()

        (o1, g1), (o2, g2) = run(), run()
        np.testing.assert_array_equal(o1, o2)
        np.testing.assert_array_equal(g1, g2)
