"""Tensor core: forward oracles, backward rules, gradient checking."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kcalnet import tensor as T
from kcalnet.errors import DimensionError
from kcalnet.tensor import Tensor, backward, gradcheck


from oracles import naive_conv2d, naive_depthwise, naive_matmul


def t64(arr, grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        b = rng.normal(size=(3, 3))
        out = T.matmul(t64(np.eye(3)), t64(b))
        np.testing.assert_array_equal(out.data, b)

    def test_zeros_annihilate(self):
        rng = np.random.default_rng(1)
        out = T.matmul(t64(np.zeros((2, 4))), t64(rng.normal(size=(4, 5))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 5)))

    def test_against_naive_oracle(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(7, 5))
        b = rng.normal(size=(5, 3))
        out = T.matmul(t64(a), t64(b))
        assert np.max(np.abs(out.data - naive_matmul(a, b))) <= 1e-12

    def test_randomized_oracle_cases(self):
        rng = np.random.default_rng(3)
        for _ in range(120):
            m, k, n = rng.integers(1, 7, size=3)
            a = rng.normal(size=(m, k))
            b = rng.normal(size=(k, n))
            out = T.matmul(t64(a), t64(b))
            assert np.max(np.abs(out.data - naive_matmul(a, b))) <= 1e-10

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            T.matmul(t64(np.zeros((2, 3))), t64(np.zeros((4, 5))))

    def test_batched_matches_per_item(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(3, 4, 5))
        b = rng.normal(size=(3, 5, 2))
        out = T.matmul(t64(a), t64(b))
        for i in range(3):
            np.testing.assert_allclose(out.data[i], a[i] @ b[i], atol=1e-12)


class TestConv2d:
    def test_one_by_one_channel_identity(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 4, 4, 3))
        kernel = np.eye(3).reshape(1, 1, 3, 3)
        out = T.conv2d(t64(x), t64(kernel), 1, "same")
        np.testing.assert_allclose(out.data, x, atol=1e-14)

    def test_zero_kernel(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(1, 5, 5, 2))
        out = T.conv2d(t64(x), t64(np.zeros((3, 3, 2, 4))), 1, "same")
        np.testing.assert_array_equal(out.data, np.zeros_like(out.data))

    def test_against_naive_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(1, 8, 8, 3))
        k = rng.normal(size=(3, 3, 3, 4))
        out = T.conv2d(t64(x), t64(k), 1, "same")
        assert np.max(np.abs(out.data - naive_conv2d(x, k, 1, "same"))) <= 1e-10

    @pytest.mark.parametrize("padding", ["same", "valid"])
    def test_randomized_oracle_cases(self, padding):
        rng = np.random.default_rng(8)
        for _ in range(60):
            h, w = rng.integers(3, 9, size=2)
            kh, kw = rng.integers(1, 4, size=2)
            cin, cout = rng.integers(1, 4, size=2)
            stride = int(rng.integers(1, 3))
            if padding == "valid" and (kh > h or kw > w):
                continue
            x = rng.normal(size=(2, h, w, cin))
            k = rng.normal(size=(kh, kw, cin, cout))
            out = T.conv2d(t64(x), t64(k), stride, padding)
            oracle = naive_conv2d(x, k, stride, padding)
            assert out.shape == oracle.shape
            assert np.max(np.abs(out.data - oracle)) <= 1e-10

    def test_kernel_larger_than_input_valid(self):
        with pytest.raises(DimensionError):
            T.conv2d(t64(np.zeros((1, 3, 3, 1))), t64(np.zeros((5, 5, 1, 1))), 1, "valid")


class TestDepthwiseConv2d:
    def test_ones_1x1_identity(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(1, 4, 4, 3))
        out = T.depthwise_conv2d(t64(x), t64(np.ones((1, 1, 3))), 1, "same")
        np.testing.assert_allclose(out.data, x, atol=1e-14)

    def test_zero_kernel(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(1, 4, 4, 2))
        out = T.depthwise_conv2d(t64(x), t64(np.zeros((3, 3, 2))), 1, "same")
        np.testing.assert_array_equal(out.data, np.zeros_like(out.data))

    def test_equals_block_diagonal_full_conv(self):
        # depthwise == full conv with a kernel that zeroes all cross-channel taps
        rng = np.random.default_rng(11)
        x = rng.normal(size=(1, 4, 4, 2))
        dk = rng.normal(size=(3, 3, 2))
        full = np.zeros((3, 3, 2, 2))
        for c in range(2):
            full[:, :, c, c] = dk[:, :, c]
        a = T.depthwise_conv2d(t64(x), t64(dk), 1, "same")
        b = T.conv2d(t64(x), t64(full), 1, "same")
        assert np.max(np.abs(a.data - b.data)) <= 1e-12

    def test_randomized_oracle_cases(self):
        rng = np.random.default_rng(12)
        for _ in range(110):
            h, w = rng.integers(3, 9, size=2)
            kh, kw = rng.integers(1, 4, size=2)
            c = int(rng.integers(1, 5))
            stride = int(rng.integers(1, 3))
            x = rng.normal(size=(2, h, w, c))
            k = rng.normal(size=(kh, kw, c))
            out = T.depthwise_conv2d(t64(x), t64(k), stride, "same")
            oracle = naive_depthwise(x, k, stride, "same")
            assert np.max(np.abs(out.data - oracle)) <= 1e-10

    def test_stride_two_halves_dims_ceil(self):
        out = T.depthwise_conv2d(t64(np.zeros((1, 7, 7, 2))), t64(np.ones((3, 3, 2))),
                                 2, "same")
        assert out.shape == (1, 4, 4, 2)


class TestSoftmax:
    def test_constant_row(self):
        out = T.softmax(t64([[3.0, 3.0, 3.0]]), axis=-1)
        np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)

    def test_forced_two_point(self):
        out = T.softmax(t64([0.0, np.log(3.0)]), axis=0)
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)

    def test_large_inputs_stable(self):
        out = T.softmax(t64([1000.0, 1001.0]), axis=0)
        assert np.all(np.isfinite(out.data))
        assert abs(out.data.sum() - 1.0) <= 1e-12

    @given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 1))
    @settings(max_examples=40, deadline=None)
    def test_rows_sum_to_one_nonnegative(self, rows, cols, axis):
        rng = np.random.default_rng(rows * 100 + cols)
        out = T.softmax(t64(rng.normal(scale=5, size=(rows, cols))), axis=axis)
        assert np.all(out.data >= 0)
        np.testing.assert_allclose(out.data.sum(axis=axis), 1.0, atol=1e-12)


class TestElementwise:
    def test_relu_definition(self):
        out = T.relu(t64([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_relu6_definition(self):
        out = T.relu6(t64([-1.0, 3.0, 9.0]))
        np.testing.assert_array_equal(out.data, [0.0, 3.0, 6.0])

    def test_add_zeros_identity(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(3, 4))
        out = T.add(t64(x), t64(np.zeros((3, 4))))
        np.testing.assert_array_equal(out.data, x)

    def test_trailing_broadcast_bias(self):
        x = np.ones((2, 3))
        bias = np.array([1.0, 2.0, 3.0])
        out = T.add(t64(x), t64(bias))
        np.testing.assert_array_equal(out.data, x + bias)

    def test_incompatible_shapes(self):
        with pytest.raises(DimensionError):
            T.add(t64(np.zeros((2, 3))), t64(np.zeros((2, 4))))

    def test_leading_broadcast_rejected(self):
        with pytest.raises(DimensionError):
            T.mul(t64(np.zeros((3, 2))), t64(np.zeros((3, 1))))


class TestReduceMean:
    def test_constant(self):
        out = T.reduce_mean(t64(np.full((2, 3), 7.5)))
        assert out.shape == ()
        assert out.item() == 7.5

    def test_forced_arithmetic(self):
        out = T.reduce_mean(t64([1.0, 2.0, 3.0, 4.0]), axes=(0,))
        assert out.item() == 2.5

    def test_spatial_reduction_matches_flat_mean(self):
        rng = np.random.default_rng(14)
        x = rng.normal(size=(2, 5, 6, 3))
        out = T.reduce_mean(t64(x), axes=(1, 2))
        oracle = x.reshape(2, 30, 3).mean(axis=1)
        assert np.max(np.abs(out.data - oracle)) <= 1e-12

    def test_repeated_axis_rejected(self):
        with pytest.raises(ValueError, match="repeated"):
            T.reduce_mean(t64(np.zeros((2, 3))), axes=(0, 0))


class TestBackward:
    def test_sum_gives_ones(self):
        p = t64(np.random.default_rng(15).normal(size=(3, 4)), grad=True)
        grads = backward(T.reduce_sum(p), [p])
        np.testing.assert_array_equal(grads[p], np.ones((3, 4)))

    def test_forced_quadratic(self):
        # d/dp mean((p - t)^2) at p=3, t=1 is 2*(3-1) = 4
        p = t64(3.0, grad=True)
        t = t64(1.0)
        diff = T.sub(p, t)
        grads = backward(T.reduce_mean(T.mul(diff, diff)), [p])
        assert abs(float(grads[p]) - 4.0) <= 1e-12

    def test_unused_parameter_gets_zero_gradient(self):
        p = t64(np.ones(3), grad=True)
        q = t64(np.ones(2), grad=True)
        grads = backward(T.reduce_sum(p), [p, q])
        np.testing.assert_array_equal(grads[q], np.zeros(2))

    def test_non_scalar_loss_rejected(self):
        p = t64(np.ones(3), grad=True)
        with pytest.raises(ValueError, match="scalar"):
            backward(T.relu(p), [p])

    def test_named_params_return_named_grads(self):
        p = t64(2.0, grad=True)
        grads = backward(T.mul(p, p), {"p": p})
        assert set(grads) == {"p"}
        assert abs(float(grads["p"]) - 4.0) <= 1e-12

    def test_gradient_linearity(self):
        # grad of (loss1 + loss2) equals grad(loss1) + grad(loss2)
        rng = np.random.default_rng(16)
        p_data = rng.normal(size=(4,))

        def grads_for(fn):
            p = t64(p_data, grad=True)
            return backward(fn(p), [p])[p]

        f1 = lambda p: T.reduce_sum(T.mul(p, p))
        f2 = lambda p: T.reduce_mean(T.scale(p, 3.0))
        combined = grads_for(lambda p: T.add(f1(p), f2(p)))
        assert np.max(np.abs(combined - (grads_for(f1) + grads_for(f2)))) <= 1e-12

    def test_two_layer_composition_matches_finite_differences(self):
        rng = np.random.default_rng(17)
        w1 = t64(rng.normal(size=(4, 5)), grad=True)
        w2 = t64(rng.normal(size=(5, 2)), grad=True)
        x = t64(rng.normal(size=(3, 4)) + 2.0)

        def fn(a, b):
            h = T.relu(T.matmul(x, a))
            return T.reduce_mean(T.matmul(h, b))

        assert gradcheck(fn, [w1, w2], eps=1e-5) <= 1e-6


class TestGradcheck:
    def test_linear_function_is_exact(self):
        p = t64(np.arange(4.0), grad=True)
        assert gradcheck(lambda q: T.reduce_sum(T.scale(q, 2.5)), [p]) <= 1e-10

    def test_dense_relu_chain_away_from_kinks(self):
        rng = np.random.default_rng(18)
        w = t64(rng.normal(size=(3, 3)), grad=True)
        x = t64(rng.uniform(1.0, 2.0, size=(2, 3)))
        fn = lambda wt: T.reduce_mean(T.relu(T.matmul(x, wt)))
        assert gradcheck(fn, [w], eps=1e-5) <= 1e-6

    def test_rejects_single_precision(self):
        p = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        with pytest.raises(ValueError, match="float64"):
            gradcheck(lambda q: T.reduce_sum(q), [p])

    @pytest.mark.parametrize("op,shapes", [
        ("matmul", ((3, 4), (4, 2))),
        ("add", ((3, 4), (4,))),
        ("sub", ((3, 4), (3, 4))),
        ("mul", ((2, 3), (3,))),
    ])
    def test_primitive_gradients(self, op, shapes):
        rng = np.random.default_rng(hash(op) % 2**32)
        tensors = [t64(rng.normal(size=s) + 1.5, grad=True) for s in shapes]
        fn = lambda *ts: T.reduce_mean(T.mul(getattr(T, op)(*ts), getattr(T, op)(*ts)))
        assert gradcheck(fn, tensors, eps=1e-5) <= 1e-6

    @pytest.mark.parametrize("unary", ["softmax", "rsqrt", "reduce_mean", "reduce_sum"])
    def test_unary_gradients(self, unary):
        rng = np.random.default_rng(hash(unary) % 2**32)
        x = t64(rng.uniform(0.5, 2.0, size=(3, 4)), grad=True)
        if unary == "softmax":
            fn = lambda q: T.reduce_mean(T.mul(T.softmax(q, axis=-1), q))
        elif unary == "rsqrt":
            fn = lambda q: T.reduce_mean(T.mul(T.rsqrt(q), T.rsqrt(q)))
        else:
            op = getattr(T, unary)
            fn = lambda q: T.mul(op(q), op(q))
        assert gradcheck(fn, [x], eps=1e-5) <= 1e-6

    def test_conv_gradients(self):
        rng = np.random.default_rng(19)
        x = t64(rng.normal(size=(1, 5, 5, 2)), grad=True)
        k = t64(rng.normal(size=(3, 3, 2, 3)), grad=True)
        fn = lambda a, b: T.reduce_mean(T.mul(T.conv2d(a, b, 2, "same"),
                                              T.conv2d(a, b, 2, "same")))
        assert gradcheck(fn, [x, k], eps=1e-5) <= 1e-6

    def test_concat_and_reshape_gradients(self):
        rng = np.random.default_rng(20)
        a = t64(rng.normal(size=(2, 3)), grad=True)
        b = t64(rng.normal(size=(2, 4)), grad=True)

        def fn(u, v):
            joined = T.concat([u, v], axis=-1)
            return T.reduce_mean(T.mul(joined, joined))

        assert gradcheck(fn, [a, b], eps=1e-5) <= 1e-6


class TestShapeProperties:
    """Output shape must be a pure function of input shapes."""

    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5))
    @settings(max_examples=30, deadline=None)
    def test_matmul_shape(self, m, k, n):
        rng = np.random.default_rng(0)
        for _ in range(2):
            out = T.matmul(t64(rng.normal(size=(m, k))), t64(rng.normal(size=(k, n))))
            assert out.shape == (m, n)

    @given(st.integers(3, 10), st.integers(1, 3), st.integers(1, 2),
           st.sampled_from(["same", "valid"]))
    @settings(max_examples=40, deadline=None)
    def test_conv_shape(self, h, kh, stride, padding):
        rng = np.random.default_rng(1)
        x = t64(rng.normal(size=(1, h, h, 2)))
        k = t64(rng.normal(size=(kh, kh, 2, 3)))
        out = T.conv2d(x, k, stride, padding)
        if padding == "same":
            expected = -(-h // stride)
        else:
            expected = (h - kh) // stride + 1
        assert out.shape == (1, expected, expected, 3)

    def test_concat_shape(self):
        parts = [t64(np.zeros((2, d))) for d in (1, 4, 2)]
        assert T.concat(parts, axis=-1).shape == (2, 7)


class TestFiniteness:
    def test_ops_preserve_finiteness(self):
        rng = np.random.default_rng(21)
        x = t64(rng.normal(scale=100, size=(4, 8)))
        outs = [
            T.softmax(x, axis=-1),
            T.relu(x), T.relu6(x),
            T.reduce_mean(x, axes=(0,)),
            T.add(x, x), T.mul(x, x),
        ]
        for out in outs:
            assert np.all(np.isfinite(out.data))
