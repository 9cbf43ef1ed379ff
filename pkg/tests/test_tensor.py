"""Autodiff engine tests: forward values against independent oracles,
gradients against central finite differences."""

import numpy as np
import pytest

from mrenet import tensor as T
from mrenet.tensor import ConfigError, Tensor

from helpers import (check_grads, conv3d_reference, conv_transpose3d_reference)


def rng(seed=0):
    return np.random.default_rng(seed)


class TestArithmetic:
    def test_add_mul_values_match_numpy(self):
        a = rng(1).normal(size=(3, 4))
        b = rng(2).normal(size=(4,))
        out = T.add(Tensor(a), Tensor(b))
        np.testing.assert_array_equal(out.data, a + b)
        out = T.mul(Tensor(a), Tensor(b))
        np.testing.assert_array_equal(out.data, a * b)

    def test_broadcast_grads(self):
        a = rng(3).normal(size=(2, 3, 4))
        b = rng(4).normal(size=(3, 1))
        check_grads(lambda x, y: T.reduce_sum(T.mul(T.add(x, y), x)), [a, b])

    def test_div_grads(self):
        a = rng(5).normal(size=(3, 3))
        b = rng(6).normal(size=(3, 3)) + 3.0
        check_grads(lambda x, y: T.reduce_sum(T.div(x, y)), [a, b])

    def test_scalar_operator_sugar(self):
        a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        out = T.reduce_sum((2.0 * a + 1.0) / 2.0 - a)
        out.backward()
        np.testing.assert_allclose(out.data, 1.0)
        np.testing.assert_allclose(a.grad, [0.0, 0.0], atol=1e-15)

    def test_exp_log_square_grads(self):
        a = rng(7).normal(size=(4,)) * 0.5
        check_grads(lambda x: T.reduce_sum(T.exp(x)), [a])
        check_grads(lambda x: T.reduce_sum(T.log(T.exp(x) + 1.0)), [a])
        check_grads(lambda x: T.reduce_sum(T.square(x)), [a])

    def test_relu_sigmoid_grads(self):
        # keep inputs away from the ReLU kink
        a = rng(8).normal(size=(20,))
        a = np.where(np.abs(a) < 0.05, 0.2, a)
        check_grads(lambda x: T.reduce_sum(T.relu(x)), [a])
        check_grads(lambda x: T.reduce_sum(T.sigmoid(x)), [a])

    def test_sigmoid_extreme_inputs_are_stable(self):
        a = Tensor(np.array([-1000.0, 0.0, 1000.0]))
        out = T.sigmoid(a)
        np.testing.assert_allclose(out.data, [0.0, 0.5, 1.0], atol=1e-12)


class TestStructural:
    def test_reshape_transpose_grads(self):
        a = rng(9).normal(size=(2, 3, 4))
        check_grads(lambda x: T.reduce_sum(
            T.mul(T.transpose(T.reshape(x, (6, 4)), (1, 0)),
                  Tensor(rng(10).normal(size=(4, 6))))), [a])

    def test_getitem_slice_grads(self):
        a = rng(11).normal(size=(4, 5))
        check_grads(lambda x: T.reduce_sum(T.square(x[1:3, ::2])), [a])

    def test_getitem_fancy_duplicate_indices(self):
        # duplicate gather indices must accumulate, not overwrite
        a = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        idx = np.array([0, 0, 2])
        out = T.reduce_sum(a[idx])
        out.backward()
        np.testing.assert_array_equal(a.grad, [2.0, 0.0, 1.0])

    def test_getitem_fancy_grads(self):
        a = rng(12).normal(size=(3, 4, 2, 2))
        ii = np.array([0, 2, 1, 0])
        jj = np.array([1, 3, 0, 1])
        check_grads(lambda x: T.reduce_sum(T.square(x[ii, jj])), [a])

    def test_concat_grads_and_values(self):
        a = rng(13).normal(size=(2, 3))
        b = rng(14).normal(size=(2, 2))
        out = T.concat([Tensor(a), Tensor(b)], axis=1)
        np.testing.assert_array_equal(out.data, np.concatenate([a, b], axis=1))
        check_grads(lambda x, y: T.reduce_sum(
            T.square(T.concat([x, y], axis=1))), [a, b])

    def test_matmul_grads(self):
        a = rng(15).normal(size=(5, 3))
        b = rng(16).normal(size=(3, 4))
        check_grads(lambda x, y: T.reduce_sum(T.square(T.matmul(x, y))), [a, b])

    def test_matmul_batched_left(self):
        a = rng(17).normal(size=(2, 5, 3))
        b = rng(18).normal(size=(3, 4))
        out = T.matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, a @ b, rtol=1e-13)
        check_grads(lambda x, y: T.reduce_sum(T.square(T.matmul(x, y))), [a, b])

    def test_matmul_shape_errors(self):
        with pytest.raises(ConfigError):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


class TestReductionsAndNorms:
    def test_reduce_sum_axis_tuple(self):
        a = rng(19).normal(size=(2, 3, 4))
        out = T.reduce_sum(Tensor(a), axis=(0, 2))
        np.testing.assert_allclose(out.data, a.sum(axis=(0, 2)), rtol=1e-14)
        check_grads(lambda x: T.reduce_sum(
            T.square(T.reduce_sum(x, axis=(0, 2)))), [a])

    def test_reduce_mean_matches_numpy(self):
        a = rng(20).normal(size=(3, 4))
        out = T.reduce_mean(Tensor(a), axis=1)
        np.testing.assert_allclose(out.data, a.mean(axis=1), rtol=1e-14)
        check_grads(lambda x: T.reduce_sum(T.square(T.reduce_mean(x, axis=1))), [a])

    def test_softmax_rows_sum_to_one(self):
        a = rng(21).normal(size=(5, 7)) * 10
        out = T.softmax(Tensor(a), axis=1)
        np.testing.assert_allclose(out.data.sum(axis=1), np.ones(5), rtol=1e-12)

    def test_softmax_shift_invariance(self):
        a = rng(22).normal(size=(4, 6))
        s1 = T.softmax(Tensor(a), axis=1).data
        s2 = T.softmax(Tensor(a + 1000.0), axis=1).data
        np.testing.assert_allclose(s1, s2, atol=1e-12)

    def test_softmax_grads(self):
        a = rng(23).normal(size=(3, 5))
        w = rng(24).normal(size=(3, 5))
        check_grads(lambda x: T.reduce_sum(
            T.mul(T.softmax(x, axis=1), Tensor(w))), [a])

    def test_l2_normalize_unit_norm(self):
        a = rng(25).normal(size=(6, 4))
        out = T.l2_normalize(Tensor(a), axis=0)
        np.testing.assert_allclose(
            np.linalg.norm(out.data, axis=0), np.ones(4), rtol=1e-10)

    def test_l2_normalize_grads(self):
        a = rng(26).normal(size=(5, 3))
        w = rng(27).normal(size=(5, 3))
        check_grads(lambda x: T.reduce_sum(
            T.mul(T.l2_normalize(x, axis=0), Tensor(w))), [a])

    def test_l2_normalize_zero_vector_is_finite(self):
        a = Tensor(np.zeros((4,)), requires_grad=True)
        out = T.reduce_sum(T.l2_normalize(a, axis=0))
        out.backward()
        assert np.all(np.isfinite(out.data))
        assert np.all(np.isfinite(a.grad))


class TestConv3d:
    @pytest.mark.parametrize("stride,padding,dilation", [
        ((1, 1, 1), (0, 0, 0), (1, 1, 1)),
        ((1, 1, 1), (1, 1, 1), (1, 1, 1)),
        ((2, 2, 2), (1, 1, 1), (1, 1, 1)),
        ((1, 2, 2), (0, 1, 1), (1, 1, 1)),
        ((1, 1, 1), (2, 2, 2), (2, 2, 2)),
        ((2, 1, 2), (3, 0, 3), (3, 1, 3)),
    ])
    def test_forward_matches_nested_loop_oracle(self, stride, padding, dilation):
        x = rng(30).normal(size=(3, 7, 8, 9))
        w = rng(31).normal(size=(4, 3, 3, 2, 3))
        b = rng(32).normal(size=(4,))
        got = T.conv3d(Tensor(x), Tensor(w), Tensor(b),
                       stride=stride, padding=padding, dilation=dilation)
        want = conv3d_reference(x, w, b, stride, padding, dilation)
        assert got.data.shape == want.shape
        np.testing.assert_allclose(got.data, want, atol=1e-12)

    def test_forward_1x1x1_kernel(self):
        x = rng(33).normal(size=(5, 3, 4, 2))
        w = rng(34).normal(size=(2, 5, 1, 1, 1))
        got = T.conv3d(Tensor(x), Tensor(w))
        want = conv3d_reference(x, w)
        np.testing.assert_allclose(got.data, want, atol=1e-12)

    def test_batched_input(self):
        x = rng(35).normal(size=(2, 3, 5, 6, 4))
        w = rng(36).normal(size=(4, 3, 3, 3, 3))
        b = rng(37).normal(size=(4,))
        got = T.conv3d(Tensor(x), Tensor(w), Tensor(b), padding=(1, 1, 1))
        for i in range(2):
            want = conv3d_reference(x[i], w, b, (1, 1, 1), (1, 1, 1), (1, 1, 1))
            np.testing.assert_allclose(got.data[i], want, atol=1e-12)

    def test_grads(self):
        x = rng(38).normal(size=(2, 4, 5, 4))
        w = rng(39).normal(size=(3, 2, 3, 3, 3))
        b = rng(40).normal(size=(3,))
        check_grads(
            lambda xx, ww, bb: T.reduce_sum(T.square(
                T.conv3d(xx, ww, bb, stride=(1, 2, 1), padding=(1, 1, 1)))),
            [x, w, b], max_entries=25)

    def test_grads_with_dilation(self):
        x = rng(41).normal(size=(1, 6, 6, 6))
        w = rng(42).normal(size=(2, 1, 2, 2, 2))
        check_grads(
            lambda xx, ww: T.reduce_sum(T.square(
                T.conv3d(xx, ww, padding=(2, 2, 2), dilation=(2, 2, 2)))),
            [x, w], max_entries=25)

    def test_channel_mismatch_names_both_shapes(self):
        x = Tensor(np.zeros((3, 4, 4, 4)))
        w = Tensor(np.zeros((2, 5, 3, 3, 3)))
        with pytest.raises(ConfigError) as exc:
            T.conv3d(x, w)
        assert "(1, 3, 4, 4, 4)" in str(exc.value)
        assert "(2, 5, 3, 3, 3)" in str(exc.value)

    def test_kernel_larger_than_padded_input_rejected(self):
        x = Tensor(np.zeros((1, 2, 8, 8)))
        w = Tensor(np.zeros((1, 1, 5, 3, 3)))
        with pytest.raises(ConfigError):
            T.conv3d(x, w)


class TestConvTranspose3d:
    def test_forward_matches_nested_loop_oracle(self):
        x = rng(43).normal(size=(3, 2, 3, 4))
        w = rng(44).normal(size=(3, 2, 2, 2, 2))
        b = rng(45).normal(size=(2,))
        got = T.conv_transpose3d(Tensor(x), Tensor(w), Tensor(b), stride=(2, 2, 2))
        want = conv_transpose3d_reference(x, w, b, (2, 2, 2))
        np.testing.assert_allclose(got.data, want, atol=1e-12)

    def test_anisotropic_stride(self):
        x = rng(46).normal(size=(2, 3, 2, 2))
        w = rng(47).normal(size=(2, 4, 1, 2, 2))
        got = T.conv_transpose3d(Tensor(x), Tensor(w), stride=(1, 2, 2))
        want = conv_transpose3d_reference(x, w, None, (1, 2, 2))
        np.testing.assert_allclose(got.data, want, atol=1e-12)

    def test_adjoint_of_conv3d(self):
        # <conv(x), y> == <x, conv_transpose(y)> when kernels are shared
        x = rng(48).normal(size=(1, 3, 4, 6, 6))
        w = rng(49).normal(size=(2, 3, 2, 2, 2))
        y = rng(50).normal(size=(1, 2, 2, 3, 3))
        fwd = T.conv3d(Tensor(x), Tensor(w), stride=(2, 2, 2)).data
        # the conv kernel [O, I, k...] reads as a transpose kernel [in=O, out=I, k...]
        back = T.conv_transpose3d(Tensor(y), Tensor(w), stride=(2, 2, 2)).data
        np.testing.assert_allclose(
            float((fwd * y).sum()), float((x * back).sum()), rtol=1e-12)

    def test_grads(self):
        x = rng(51).normal(size=(2, 2, 3, 3))
        w = rng(52).normal(size=(2, 3, 2, 2, 2))
        b = rng(53).normal(size=(3,))
        check_grads(
            lambda xx, ww, bb: T.reduce_sum(T.square(
                T.conv_transpose3d(xx, ww, bb, stride=(2, 2, 2)))),
            [x, w, b], max_entries=25)


class TestPoolingAndResize:
    def test_avg_pool_matches_block_mean(self):
        x = rng(54).normal(size=(2, 3, 4, 6, 8))
        got = T.avg_pool3d(Tensor(x), stride=(2, 2, 2))
        want = x.reshape(2, 3, 2, 2, 3, 2, 4, 2).mean(axis=(3, 5, 7))
        np.testing.assert_allclose(got.data, want, rtol=1e-14)

    def test_avg_pool_anisotropic(self):
        x = rng(55).normal(size=(1, 4, 6, 6))
        got = T.avg_pool3d(Tensor(x), stride=(1, 2, 2))
        want = x.reshape(1, 1, 4, 1, 3, 2, 3, 2).mean(axis=(3, 5, 7))[0]
        np.testing.assert_allclose(got.data, want, rtol=1e-14)

    def test_avg_pool_grads(self):
        x = rng(56).normal(size=(2, 4, 4, 2))
        check_grads(lambda xx: T.reduce_sum(T.square(
            T.avg_pool3d(xx, stride=(2, 2, 2)))), [x])

    def test_avg_pool_indivisible_extent_names_axis(self):
        x = Tensor(np.zeros((1, 4, 5, 4)))
        with pytest.raises(ConfigError) as exc:
            T.avg_pool3d(x, stride=(2, 2, 2))
        assert "H" in str(exc.value) and "5" in str(exc.value)

    def test_global_avg_pool(self):
        x = rng(57).normal(size=(2, 3, 2, 3, 4))
        got = T.global_avg_pool(Tensor(x))
        assert got.data.shape == (2, 3, 1, 1, 1)
        np.testing.assert_allclose(
            got.data[..., 0, 0, 0], x.mean(axis=(2, 3, 4)), rtol=1e-14)

    def test_upsample_nearest_integer_factor(self):
        x = rng(58).normal(size=(1, 2, 2, 3))
        got = T.upsample_nearest(Tensor(x), (4, 4, 6))
        want = x.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)
        np.testing.assert_array_equal(got.data, want)

    def test_upsample_nearest_from_singleton_broadcasts(self):
        x = rng(59).normal(size=(2, 3, 1, 1, 1))
        got = T.upsample_nearest(Tensor(x), (2, 3, 4))
        want = np.broadcast_to(x, (2, 3, 2, 3, 4))
        np.testing.assert_array_equal(got.data, want)

    def test_upsample_index_rule(self):
        # output voxel i samples input voxel floor(i * n / m)
        x = np.arange(5.0).reshape(1, 1, 1, 5)
        got = T.upsample_nearest(Tensor(x), (1, 1, 8))
        idx = np.arange(8) * 5 // 8
        np.testing.assert_array_equal(got.data[0, 0, 0], x[0, 0, 0, idx])

    def test_upsample_grads(self):
        x = rng(60).normal(size=(2, 2, 2, 2))
        check_grads(lambda xx: T.reduce_sum(T.square(
            T.upsample_nearest(xx, (3, 4, 5)))), [x])


class TestBatchNorm:
    def test_train_mode_matches_manual(self):
        x = rng(61).normal(size=(3, 4, 2, 3, 2)) * 2 + 1
        gamma = rng(62).normal(size=(4,))
        beta = rng(63).normal(size=(4,))
        rm = np.zeros(4)
        rv = np.ones(4)
        got = T.batch_norm(Tensor(x), Tensor(gamma), Tensor(beta), rm, rv,
                           training=True)
        mu = x.mean(axis=(0, 2, 3, 4))
        var = x.var(axis=(0, 2, 3, 4))
        want = ((x - mu.reshape(1, -1, 1, 1, 1))
                / np.sqrt(var.reshape(1, -1, 1, 1, 1) + 1e-5)
                * gamma.reshape(1, -1, 1, 1, 1) + beta.reshape(1, -1, 1, 1, 1))
        np.testing.assert_allclose(got.data, want, rtol=1e-12)
        np.testing.assert_allclose(rm, 0.1 * mu, rtol=1e-12)
        np.testing.assert_allclose(rv, 0.9 + 0.1 * var, rtol=1e-12)

    def test_single_value_per_channel_rejected_in_train_mode(self):
        # With one value per channel the normalised activation is always
        # zero, which silently kills upstream gradients.
        x = Tensor(rng(69).normal(size=(1, 4, 1, 1, 1)))
        gamma, beta = Tensor(np.ones(4)), Tensor(np.zeros(4))
        rm, rv = np.zeros(4), np.ones(4)
        with pytest.raises(ConfigError, match="more than one value"):
            T.batch_norm(x, gamma, beta, rm, rv, training=True)
        # eval mode is fine
        T.batch_norm(x, gamma, beta, rm, rv, training=False)

    def test_eval_mode_uses_running_stats(self):
        x = rng(64).normal(size=(2, 3, 2, 2, 2))
        gamma = np.ones(3)
        beta = np.zeros(3)
        rm = np.array([0.5, -0.5, 0.0])
        rv = np.array([2.0, 1.0, 0.5])
        got = T.batch_norm(Tensor(x), Tensor(gamma), Tensor(beta), rm, rv,
                           training=False)
        want = (x - rm.reshape(1, -1, 1, 1, 1)) / np.sqrt(
            rv.reshape(1, -1, 1, 1, 1) + 1e-5)
        np.testing.assert_allclose(got.data, want, rtol=1e-12)
        # eval mode must not touch the buffers
        np.testing.assert_array_equal(rm, [0.5, -0.5, 0.0])

    def test_train_mode_grads(self):
        x = rng(65).normal(size=(2, 3, 2, 2, 2))
        gamma = rng(66).normal(size=(3,)) + 1.5
        beta = rng(67).normal(size=(3,))
        w = rng(68).normal(size=(2, 3, 2, 2, 2))

        def build(xx, gg, bb):
            rm = np.zeros(3)
            rv = np.ones(3)
            return T.reduce_sum(T.mul(
                T.batch_norm(xx, gg, bb, rm, rv, training=True), Tensor(w)))

        check_grads(build, [x, gamma, beta], max_entries=30)

    def test_eval_mode_grads(self):
        x = rng(69).normal(size=(1, 2, 2, 2, 2))
        gamma = rng(70).normal(size=(2,)) + 1.0
        beta = rng(71).normal(size=(2,))
        rm = np.array([0.3, -0.2])
        rv = np.array([1.5, 0.7])
        check_grads(
            lambda xx, gg, bb: T.reduce_sum(T.square(
                T.batch_norm(xx, gg, bb, rm.copy(), rv.copy(), training=False))),
            [x, gamma, beta])


class TestGraphMechanics:
    def test_backward_requires_scalar(self):
        a = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ValueError):
            T.mul(a, a).backward()

    def test_backward_twice_rejected(self):
        a = Tensor(np.array(2.0), requires_grad=True)
        out = T.square(a)
        out.backward()
        with pytest.raises(RuntimeError):
            out.backward()

    def test_reused_tensor_accumulates(self):
        a = Tensor(np.array(3.0), requires_grad=True)
        out = T.add(T.square(a), T.mul(a, a))  # a^2 + a^2
        out.backward()
        np.testing.assert_allclose(a.grad, 12.0)

    def test_no_grad_records_nothing(self):
        a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with T.no_grad():
            out = T.reduce_sum(T.square(a))
        assert not out.requires_grad
        assert out._parents == ()

    def test_constant_inputs_get_no_grad(self):
        a = Tensor(np.array([1.0]))
        out = T.square(a)
        assert not out.requires_grad

    def test_diamond_graph_topological_order(self):
        # f = (a*b) + (a+b)*(a*b); checks each node fires once, after users
        a = Tensor(np.array(2.0), requires_grad=True)
        b = Tensor(np.array(5.0), requires_grad=True)
        p = T.mul(a, b)
        s = T.add(a, b)
        out = T.add(p, T.mul(s, p))
        out.backward()
        # d/da = b + b*(a+b) + a*b = 5 + 35 + 10
        np.testing.assert_allclose(a.grad, 5.0 + 5.0 * 7.0 + 10.0)
        np.testing.assert_allclose(b.grad, 2.0 + 2.0 * 7.0 + 10.0)

    def test_deep_chain_does_not_recurse(self):
        a = Tensor(np.array(1.0), requires_grad=True)
        out = a
        for _ in range(5000):
            out = T.add(out, a)
        T.reduce_sum(out).backward()
        np.testing.assert_allclose(a.grad, 5001.0)

    def test_float32_graphs_stay_float32(self):
        a = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
        out = T.reduce_sum(T.mul(T.relu(a + 1.0), a))
        assert out.dtype == np.float32
        out.backward()
        assert a.grad.dtype == np.float32
