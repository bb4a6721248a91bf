import numpy as np
import pytest

from mkunet.ops import (BatchNorm2d, Conv2d, activation, batch_norm,
                        bilinear_resize, channel_shuffle, channel_stats,
                        concat_channels, conv2d, global_pool, max_pool_2x2,
                        relu, relu6, sigmoid)
from mkunet.tensor import (ShapeError, Tensor4, finite_diff_check, from_values,
                           full, hadamard, sum_all, uniform_random, zeros)


def naive_conv2d(x, w, bias=None, stride=1, padding=1, groups=1):
    """Loop reference for cross-correlation with zero padding."""
    n, c_in, h, wd = x.shape
    c_out, cpg, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    opg = c_out // groups
    out = np.zeros((n, c_out, oh, ow))
    for b in range(n):
        for o in range(c_out):
            g = o // opg
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, g * cpg:(g + 1) * cpg,
                               i * stride:i * stride + k, j * stride:j * stride + k]
                    out[b, o, i, j] = (patch * w[o]).sum()
            if bias is not None:
                out[b, o] += bias[o]
    return out


class TestConv2d:
    def test_1x1_scalar_scale(self):
        x = full((1, 1, 3, 3), 1.0)
        w = from_values((1, 1, 1, 1), [2.0])
        out = conv2d(x, w)
        assert out.shape == (1, 1, 3, 3)
        assert np.all(out.data == 2.0)

    def test_depthwise_box_filter_padding(self):
        c = 5.0
        x = full((1, 1, 4, 4), c)
        w = full((1, 1, 3, 3), 1.0 / 9.0)
        out = conv2d(x, w, padding=1, groups=1)
        assert out.data[0, 0, 1, 1] == pytest.approx(c)
        assert out.data[0, 0, 0, 0] == pytest.approx(4 * c / 9)

    def test_grouped_identity(self):
        x = uniform_random((1, 2, 3, 3), -1, 1, seed=0)
        w = from_values((2, 1, 1, 1), [1.0, 1.0])
        out = conv2d(x, w, groups=2)
        np.testing.assert_allclose(out.data, x.data, rtol=1e-6)

    @pytest.mark.parametrize("groups", [1, 2, 4])
    @pytest.mark.parametrize("k,stride", [(1, 1), (3, 1), (3, 2), (5, 1)])
    def test_against_naive_reference(self, groups, k, stride):
        rng = np.random.default_rng(groups * 10 + k)
        x = rng.normal(size=(2, 4, 6, 6))
        w = rng.normal(size=(4, 4 // groups, k, k))
        b = rng.normal(size=4)
        got = conv2d(Tensor4(x.astype(np.float64)),
                     Tensor4(w.astype(np.float64)),
                     Tensor4(b.reshape(1, 4, 1, 1).astype(np.float64)),
                     stride=stride, padding=(k - 1) // 2, groups=groups)
        want = naive_conv2d(x, w, b, stride=stride, padding=(k - 1) // 2, groups=groups)
        np.testing.assert_allclose(got.data, want, rtol=1e-10)

    @pytest.mark.parametrize("groups", [1, 2, 4])
    def test_grouped_equals_per_group_dense(self, groups):
        rng = np.random.default_rng(groups)
        c = 4
        x = rng.normal(size=(1, c, 5, 5))
        w = rng.normal(size=(c, c // groups, 3, 3))
        full_out = conv2d(Tensor4(x), Tensor4(w), padding=1, groups=groups)
        cpg, opg = c // groups, c // groups
        pieces = []
        for g in range(groups):
            xs = Tensor4(np.ascontiguousarray(x[:, g * cpg:(g + 1) * cpg]))
            ws = Tensor4(np.ascontiguousarray(w[g * opg:(g + 1) * opg]))
            pieces.append(conv2d(xs, ws, padding=1).data)
        np.testing.assert_allclose(full_out.data, np.concatenate(pieces, axis=1),
                                   rtol=1e-6)

    def test_linearity_without_bias(self):
        rng = np.random.default_rng(5)
        x = Tensor4(rng.normal(size=(1, 3, 5, 5)))
        y = Tensor4(rng.normal(size=(1, 3, 5, 5)))
        w = Tensor4(rng.normal(size=(2, 3, 3, 3)))
        lhs = conv2d(Tensor4(2.0 * x.data + 3.0 * y.data), w, padding=1)
        rhs = 2.0 * conv2d(x, w, padding=1).data + 3.0 * conv2d(y, w, padding=1).data
        np.testing.assert_allclose(lhs.data, rhs, rtol=1e-5)

    def test_group_divisibility_error(self):
        with pytest.raises(ShapeError):
            conv2d(zeros((1, 3, 4, 4)), zeros((2, 1, 1, 1)), groups=2)

    def test_channel_mismatch_error(self):
        with pytest.raises(ShapeError):
            conv2d(zeros((1, 3, 4, 4)), zeros((2, 4, 1, 1)))

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(ShapeError):
            conv2d(zeros((1, 1, 2, 2)), zeros((1, 1, 5, 5)))


class TestBatchNorm:
    def test_eval_identity_up_to_epsilon(self):
        bn = BatchNorm2d(2)
        x = uniform_random((1, 2, 3, 3), -1, 1, seed=1)
        out = batch_norm(x, bn, mode="eval")
        np.testing.assert_allclose(out.data, x.data / np.sqrt(1 + 1e-5), rtol=1e-6)

    def test_zero_gamma_gives_beta(self):
        bn = BatchNorm2d(2)
        bn.gamma.data[:] = 0.0
        bn.beta.data[:] = 7.0
        out = batch_norm(uniform_random((2, 2, 3, 3), -1, 1, seed=2), bn, "train")
        assert np.all(out.data == 7.0)

    def test_train_moments_by_hand(self):
        bn = BatchNorm2d(1)
        x = from_values((1, 1, 1, 2), [1.0, 3.0])
        out = batch_norm(x, bn, "train")
        # mean 2, biased var 1
        np.testing.assert_allclose(out.data[0, 0, 0], [-1.0, 1.0], atol=1e-4)

    def test_running_stats_update(self):
        bn = BatchNorm2d(1)
        x = from_values((1, 1, 1, 2), [1.0, 3.0])
        batch_norm(x, bn, "train")
        assert bn.running_mean[0, 0, 0, 0] == pytest.approx(0.9 * 0 + 0.1 * 2)
        assert bn.running_var[0, 0, 0, 0] == pytest.approx(0.9 * 1 + 0.1 * 1)

    def test_train_normalizes_batch(self):
        bn = BatchNorm2d(3)
        x = uniform_random((4, 3, 5, 5), -2, 2, seed=3)
        out = batch_norm(x, bn, "train").data
        assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-5
        assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-4

    def test_single_element_train_error(self):
        bn = BatchNorm2d(1)
        with pytest.raises(ShapeError):
            batch_norm(zeros((1, 1, 1, 1)), bn, "train")


class TestActivations:
    def test_relu6_definition(self):
        x = from_values((1, 1, 1, 3), [-1.0, 3.0, 9.0])
        np.testing.assert_array_equal(activation(x, "relu6").data[0, 0, 0], [0, 3, 6])

    def test_sigmoid_symmetry(self):
        assert sigmoid(zeros((1, 1, 1, 1))).item() == pytest.approx(0.5)

    def test_relu_negative(self):
        assert relu(full((1, 1, 1, 1), -5.0)).item() == 0

    def test_sigmoid_extreme_values_stay_finite(self):
        x = from_values((1, 1, 1, 2), [-200.0, 200.0])
        out = sigmoid(x).data
        assert np.all(np.isfinite(out))
        assert out[0, 0, 0, 0] == pytest.approx(0.0, abs=1e-30)
        assert out[0, 0, 0, 1] == pytest.approx(1.0)


class TestPooling:
    def test_2x2_window_max(self):
        x = from_values((1, 1, 2, 2), [1, 2, 3, 4])
        assert max_pool_2x2(x).item() == 4

    def test_constant_input(self):
        out = max_pool_2x2(full((1, 2, 4, 4), 3.5))
        assert out.shape == (1, 2, 2, 2)
        assert np.all(out.data == 3.5)

    def test_single_hot_pixel(self):
        data = np.zeros((1, 1, 4, 4), dtype=np.float32)
        data[0, 0, 1, 2] = 9.0
        out = max_pool_2x2(Tensor4(data))
        assert (out.data == 9).sum() == 1
        assert out.data[0, 0, 0, 1] == 9

    def test_odd_dims_error(self):
        with pytest.raises(ShapeError):
            max_pool_2x2(zeros((1, 1, 3, 4)))

    def test_global_pool_constant(self):
        x = full((1, 2, 3, 3), 2.0)
        assert np.all(global_pool(x, "avg").data == 2.0)
        assert np.all(global_pool(x, "max").data == 2.0)

    def test_global_pool_values(self):
        x = from_values((1, 1, 2, 2), [1, 2, 3, 4])
        assert global_pool(x, "avg").item() == pytest.approx(2.5)
        assert global_pool(x, "max").item() == 4

    def test_global_pool_per_channel(self):
        x = Tensor4(np.stack([np.zeros((2, 2)), np.ones((2, 2))])[None].astype(np.float32))
        out = global_pool(x, "max").data
        assert out[0, 0, 0, 0] == 0 and out[0, 1, 0, 0] == 1


class TestBilinearResize:
    def test_constant_preserved(self):
        out = bilinear_resize(full((1, 2, 3, 3), 4.2), 7, 5)
        np.testing.assert_allclose(out.data, 4.2, rtol=1e-6)

    def test_single_sample_clamp(self):
        out = bilinear_resize(full((1, 1, 1, 1), 3.0), 2, 2)
        assert np.all(out.data == 3.0)

    def test_half_pixel_formula(self):
        x = from_values((1, 1, 1, 2), [0.0, 1.0])
        out = bilinear_resize(x, 1, 4)
        np.testing.assert_allclose(out.data[0, 0, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-6)

    def test_same_size_identity(self):
        x = uniform_random((1, 2, 5, 5), -1, 1, seed=4)
        out = bilinear_resize(x, 5, 5)
        np.testing.assert_allclose(out.data, x.data, atol=1e-7)

    def test_bounds_preserved(self):
        x = uniform_random((1, 1, 6, 6), -2, 3, seed=5)
        out = bilinear_resize(x, 13, 4).data
        assert out.min() >= x.data.min() - 1e-6
        assert out.max() <= x.data.max() + 1e-6


class TestChannelShuffle:
    def test_single_group_identity(self):
        x = uniform_random((1, 4, 2, 2), -1, 1, seed=6)
        assert np.array_equal(channel_shuffle(x, 1).data, x.data)

    def test_index_map(self):
        planes = np.stack([np.full((2, 2), v) for v in [1.0, 2.0, 3.0, 4.0]])[None]
        out = channel_shuffle(Tensor4(planes.astype(np.float32)), 2)
        got = [out.data[0, c, 0, 0] for c in range(4)]
        assert got == [1, 3, 2, 4]  # [a, c, b, d]

    def test_inverse_property(self):
        x = uniform_random((2, 6, 3, 3), -1, 1, seed=7)
        again = channel_shuffle(channel_shuffle(x, 2), 3)
        np.testing.assert_array_equal(again.data, x.data)

    def test_preserves_plane_multiset_and_sum(self):
        x = uniform_random((1, 6, 4, 4), -1, 1, seed=8)
        out = channel_shuffle(x, 3)
        assert out.data.sum() == pytest.approx(x.data.sum(), rel=1e-6)
        before = {x.data[0, c].tobytes() for c in range(6)}
        after = {out.data[0, c].tobytes() for c in range(6)}
        assert before == after

    def test_nondivisible_error(self):
        with pytest.raises(ShapeError):
            channel_shuffle(zeros((1, 5, 2, 2)), 2)


class TestChannelStats:
    def test_single_channel_identity(self):
        x = uniform_random((1, 1, 3, 3), -1, 1, seed=9)
        assert np.array_equal(channel_stats(x, "max").data, x.data)
        assert np.array_equal(channel_stats(x, "mean").data, x.data)

    def test_pixelwise_values(self):
        x = Tensor4(np.stack([np.full((2, 2), 2.0), np.full((2, 2), 4.0)])[None]
                    .astype(np.float32))
        assert np.all(channel_stats(x, "max").data == 4)
        assert np.all(channel_stats(x, "mean").data == 3)

    def test_constant_per_channel(self):
        x = Tensor4(np.stack([np.full((2, 2), v) for v in [0.0, 1.0, 2.0]])[None]
                    .astype(np.float32))
        assert np.all(channel_stats(x, "max").data == 2)
        assert np.all(channel_stats(x, "mean").data == 1)


class TestConcat:
    def test_shape(self):
        out = concat_channels(zeros((1, 1, 2, 2)), zeros((1, 1, 2, 2)))
        assert out.shape == (1, 2, 2, 2)

    def test_duplication(self):
        x = uniform_random((1, 1, 2, 2), -1, 1, seed=10)
        out = concat_channels(x, x)
        assert np.array_equal(out.data[:, 0], out.data[:, 1])

    def test_ordering(self):
        out = concat_channels(zeros((1, 1, 2, 2)), full((1, 1, 2, 2), 1.0))
        assert np.all(out.data[:, 0] == 0)
        assert np.all(out.data[:, 1] == 1)

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            concat_channels(zeros((1, 1, 2, 2)), zeros((1, 1, 3, 3)))


class TestOpGradients:
    """Every primitive matches central differences at (1,3,6,6), tol 1e-3."""

    SHAPE = (1, 3, 6, 6)

    def _x(self, seed=0, lo=-1.0, hi=1.0):
        return uniform_random(self.SHAPE, lo, hi, seed=seed, dtype=np.float64)

    def _proj(self, shape, seed=99):
        return Tensor4(np.random.default_rng(seed).normal(size=shape))

    def _check(self, f, x=None, **kw):
        report = finite_diff_check(f, x if x is not None else self._x(), **kw)
        assert report.passed, str(report)
        return report

    def test_conv_dense(self):
        rng = np.random.default_rng(1)
        w = Tensor4(rng.normal(size=(4, 3, 3, 3)))
        b = Tensor4(rng.normal(size=(1, 4, 1, 1)))
        proj = self._proj((1, 4, 6, 6))
        self._check(lambda t: sum_all(hadamard(conv2d(t, w, b, padding=1), proj)))
        # weight and bias gradients
        x0 = self._x(3)
        self._check(lambda wt: sum_all(hadamard(conv2d(x0, wt, b, padding=1), proj)), w)
        self._check(lambda bt: sum_all(hadamard(conv2d(x0, w, bt, padding=1), proj)), b)

    def test_conv_depthwise(self):
        rng = np.random.default_rng(2)
        w = Tensor4(rng.normal(size=(3, 1, 3, 3)))
        proj = self._proj(self.SHAPE)
        self._check(lambda t: sum_all(hadamard(conv2d(t, w, padding=1, groups=3), proj)))
        x0 = self._x(4)
        self._check(lambda wt: sum_all(hadamard(conv2d(x0, wt, padding=1, groups=3), proj)), w)

    def test_conv_strided(self):
        rng = np.random.default_rng(3)
        w = Tensor4(rng.normal(size=(2, 3, 3, 3)))
        proj = self._proj((1, 2, 3, 3))
        self._check(lambda t: sum_all(hadamard(
            conv2d(t, w, stride=2, padding=1), proj)))

    def test_batch_norm_train(self):
        bn = BatchNorm2d(3, dtype=np.float64)
        rng = np.random.default_rng(5)
        bn.gamma.data = rng.normal(size=(1, 3, 1, 1))
        bn.beta.data = rng.normal(size=(1, 3, 1, 1))
        proj = self._proj(self.SHAPE)
        self._check(lambda t: sum_all(hadamard(batch_norm(t, bn, "train"), proj)))
        x0 = self._x(6)
        self._check(lambda g: sum_all(hadamard(batch_norm(x0, _with(bn, "gamma", g), "train"), proj)), bn.gamma)
        self._check(lambda b: sum_all(hadamard(batch_norm(x0, _with(bn, "beta", b), "train"), proj)), bn.beta)

    def test_batch_norm_eval(self):
        bn = BatchNorm2d(3, dtype=np.float64)
        rng = np.random.default_rng(7)
        bn.set_buffers(rng.normal(size=3) * 0.3, rng.uniform(0.5, 1.5, size=3))
        proj = self._proj(self.SHAPE)
        self._check(lambda t: sum_all(hadamard(batch_norm(t, bn, "eval"), proj)))

    def test_activations(self):
        proj = self._proj(self.SHAPE)
        self._check(lambda t: sum_all(hadamard(relu(t), proj)), self._x(8))
        self._check(lambda t: sum_all(hadamard(relu6(t), proj)), self._x(9, -2, 8))
        self._check(lambda t: sum_all(hadamard(sigmoid(t), proj)), self._x(10, -3, 3))

    def test_max_pool(self):
        proj = self._proj((1, 3, 3, 3))
        self._check(lambda t: sum_all(hadamard(max_pool_2x2(t), proj)), self._x(11))

    def test_global_pools(self):
        proj = self._proj((1, 3, 1, 1))
        self._check(lambda t: sum_all(hadamard(global_pool(t, "avg"), proj)), self._x(12))
        self._check(lambda t: sum_all(hadamard(global_pool(t, "max"), proj)), self._x(13))

    def test_bilinear(self):
        proj_up = self._proj((1, 3, 9, 7))
        self._check(lambda t: sum_all(hadamard(bilinear_resize(t, 9, 7), proj_up)),
                    self._x(14))
        proj_dn = self._proj((1, 3, 3, 3))
        self._check(lambda t: sum_all(hadamard(bilinear_resize(t, 3, 3), proj_dn)),
                    self._x(15))

    def test_channel_ops(self):
        proj = self._proj(self.SHAPE)
        self._check(lambda t: sum_all(hadamard(channel_shuffle(t, 3), proj)), self._x(16))
        proj1 = self._proj((1, 1, 6, 6))
        self._check(lambda t: sum_all(hadamard(channel_stats(t, "max"), proj1)), self._x(17))
        self._check(lambda t: sum_all(hadamard(channel_stats(t, "mean"), proj1)), self._x(18))

    def test_concat(self):
        other = self._x(19)
        proj = self._proj((1, 6, 6, 6))
        self._check(lambda t: sum_all(hadamard(concat_channels(t, other), proj)),
                    self._x(20))


def _with(bn, attr, tensor):
    setattr(bn, attr, tensor)
    return bn
