import numpy as np
import pytest

from segforge import ops
from segforge import tensor as tz
from segforge.tensor import ContractError, ShapeError, Tensor, backward, grad_check


def naive_conv2d(x, w, b=None, stride=1, padding=0, dilation=1):
    """Brute-force loop over output positions and kernel taps."""
    n, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, c_out, oh, ow))
    for s in range(n):
        for co in range(c_out):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for ci in range(c_in):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += (
                                    xp[s, ci, oy * stride + ky * dilation, ox * stride + kx * dilation]
                                    * w[co, ci, ky, kx]
                                )
                    out[s, co, oy, ox] = acc + (0.0 if b is None else b[co])
    return out


class TestConv2d:
    def test_shape_same_padding(self):
        x = Tensor(np.zeros((1, 3, 32, 32)))
        w = Tensor(np.zeros((8, 3, 3, 3)))
        assert ops.conv2d(x, w, stride=1, padding=1).shape == (1, 8, 32, 32)

    def test_identity_1x1(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(1, 4, 5, 5)))
        w = Tensor(np.eye(4).reshape(4, 4, 1, 1))
        np.testing.assert_allclose(ops.conv2d(x, w).data, x.data, atol=0)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(1)
        for stride, padding, dilation, k in [(1, 1, 1, 3), (2, 1, 1, 3), (1, 2, 2, 3), (1, 0, 1, 1)]:
            x = rng.normal(size=(2, 2, 5, 5))
            w = rng.normal(size=(3, 2, k, k))
            b = rng.normal(size=3)
            got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding, dilation=dilation)
            want = naive_conv2d(x, w, b, stride=stride, padding=padding, dilation=dilation)
            np.testing.assert_allclose(got.data, want, atol=1e-12)

    def test_dilation_equals_zero_upsampled_kernel(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 2, 9, 9))
        w = rng.normal(size=(2, 2, 3, 3))
        d = 2
        wz = np.zeros((2, 2, 5, 5))
        wz[:, :, ::d, ::d] = w
        dilated = ops.conv2d(Tensor(x), Tensor(w), padding=2, dilation=d)
        upsampled = ops.conv2d(Tensor(x), Tensor(wz), padding=2, dilation=1)
        np.testing.assert_allclose(dilated.data, upsampled.data, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ops.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))), padding=1)

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(ContractError):
            ops.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), dilation=4)

    def test_grad_check(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        err = grad_check(lambda x_, w_, b_: ops.conv2d(x_, w_, b_, stride=2, padding=1).sum(), [x, w, b])
        assert err < 1e-5

    def test_grad_check_dilated(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
        err = grad_check(lambda x_, w_: ops.conv2d(x_, w_, padding=2, dilation=2).sum(), [x, w])
        assert err < 1e-5


class TestConvTranspose2d:
    def test_final_layer_shape(self):
        x = Tensor(np.zeros((1, 16, 128, 128), dtype=np.float32))
        w = Tensor(np.zeros((16, 2, 2, 2), dtype=np.float32))
        assert ops.conv_transpose2d(x, w, stride=2).shape == (1, 2, 256, 256)

    def test_adjoint_identity(self):
        # <conv2d(x), y> == <x, conv_transpose2d(y)> with the same weight
        # array; conv2d reads it as (C_out, C_in, .), the transpose as
        # (C_in, C_out, .).
        rng = np.random.default_rng(5)
        # 7x7 inputs make (H + 2p - k) divisible by the stride in every
        # case below, so the strided geometry round-trips exactly.
        for stride, padding in [(1, 0), (2, 0), (2, 1), (1, 1)]:
            w = rng.normal(size=(4, 3, 3, 3))
            x = rng.normal(size=(2, 3, 7, 7))
            fwd = ops.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding)
            y = rng.normal(size=fwd.shape)
            back = ops.conv_transpose2d(Tensor(y), Tensor(w), stride=stride, padding=padding)
            lhs = float((fwd.data * y).sum())
            rhs = float((x * back.data).sum())
            assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))

    def test_stride1_k1_is_pointwise(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(1, 3, 4, 4))
        w = rng.normal(size=(3, 5, 1, 1))
        got = ops.conv_transpose2d(Tensor(x), Tensor(w))
        want = ops.conv2d(Tensor(x), Tensor(np.transpose(w, (1, 0, 2, 3))))
        np.testing.assert_allclose(got.data, want.data, atol=1e-12)

    def test_grad_check(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(1, 3, 4, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 2, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=2), requires_grad=True)
        err = grad_check(lambda x_, w_, b_: ops.conv_transpose2d(x_, w_, b_, stride=2).sum(), [x, w, b])
        assert err < 1e-5


class TestPooling:
    def test_shapes(self):
        x = Tensor(np.random.default_rng(8).normal(size=(1, 1, 256, 256)))
        pooled, idx = ops.maxpool2d(x)
        assert pooled.shape == (1, 1, 128, 128)
        assert idx.offsets.shape == (1, 1, 128, 128)

    def test_single_window(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        pooled, idx = ops.maxpool2d(x)
        assert pooled.item() == 4.0
        assert idx.offsets[0, 0, 0, 0] == 3  # flat offset of position (1, 1)

    def test_tie_breaks_row_major_first(self):
        x = Tensor(np.array([[7.0, 7.0], [7.0, 7.0]]).reshape(1, 1, 2, 2))
        _, idx = ops.maxpool2d(x)
        assert idx.offsets[0, 0, 0, 0] == 0

    def test_pool_unpool_pool_roundtrip(self):
        # Positive values: unpooled maps are zero off the argmax, so a
        # negative maximum would lose to the zero fill on re-pooling.
        rng = np.random.default_rng(9)
        x = Tensor(rng.uniform(0.5, 1.5, size=(2, 3, 8, 8)))
        pooled, idx = ops.maxpool2d(x)
        restored = ops.max_unpool2d(pooled, idx)
        pooled2, _ = ops.maxpool2d(restored)
        np.testing.assert_array_equal(pooled.data, pooled2.data)

    def test_odd_extent_rejected(self):
        with pytest.raises(ContractError):
            ops.maxpool2d(Tensor(np.zeros((1, 1, 5, 4))))

    def test_corrupt_index_rejected(self):
        x = Tensor(np.random.default_rng(10).normal(size=(1, 1, 4, 4)))
        pooled, idx = ops.maxpool2d(x)
        idx.offsets[0, 0, 0, 0] = 15  # outside the (0, 0) window
        with pytest.raises(ContractError):
            ops.max_unpool2d(pooled, idx)

    def test_grad_check_pool_and_unpool(self):
        rng = np.random.default_rng(11)
        # Distinct values avoid argmax ties, keeping the function smooth.
        base = rng.permutation(64).astype(np.float64).reshape(1, 1, 8, 8)
        x = Tensor(base, requires_grad=True)

        def f(t):
            pooled, idx = ops.maxpool2d(t)
            return ops.max_unpool2d(pooled * 2.0, idx).sum()

        assert grad_check(f, [x]) < 1e-6


class TestBatchNorm:
    def test_train_mode_normalizes(self):
        rng = np.random.default_rng(12)
        x = Tensor(rng.normal(3.0, 2.0, size=(4, 3, 8, 8)))
        state = ops.batchnorm_state(3)
        out = ops.batchnorm2d(x, state)
        mean = out.data.mean(axis=(0, 2, 3))
        var = out.data.var(axis=(0, 2, 3))
        np.testing.assert_allclose(mean, 0.0, atol=1e-6)
        np.testing.assert_allclose(var, 1.0, atol=1e-4)

    def test_eval_identity_with_init_stats(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        state = ops.batchnorm_state(3)
        state.mode = "eval"
        state.updates = 1  # silence the fresh-stats warning path
        out = ops.batchnorm2d(x, state)
        # Identity up to the 1e-5 epsilon inside the rsqrt.
        np.testing.assert_allclose(out.data, x.data, rtol=1e-4, atol=1e-6)

    def test_eval_before_train_warns(self):
        state = ops.batchnorm_state(2)
        state.mode = "eval"
        with pytest.warns(UserWarning):
            ops.batchnorm2d(Tensor(np.zeros((1, 2, 2, 2))), state)

    def test_running_stats_update(self):
        rng = np.random.default_rng(14)
        x = rng.normal(2.0, 1.0, size=(4, 2, 8, 8))
        state = ops.batchnorm_state(2)
        ops.batchnorm2d(Tensor(x), state)
        mu = x.mean(axis=(0, 2, 3))
        np.testing.assert_allclose(state.running_mean, 0.1 * mu, atol=1e-12)
        assert state.updates == 1

    def test_grad_check_train(self):
        # A fixed random projection keeps the loss sensitive to every
        # input element; plain sum/square losses are nearly invariant
        # under the normalization and drown in difference noise.
        rng = np.random.default_rng(15)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
        sc = Tensor(rng.normal(1.0, 0.2, size=3), requires_grad=True)
        sh = Tensor(rng.normal(size=3), requires_grad=True)
        proj = Tensor(rng.normal(size=(2, 3, 4, 4)))

        def f(x_, sc_, sh_):
            fresh = ops.BatchNormState(sc_, sh_, np.zeros(3), np.ones(3))
            z = ops.batchnorm2d(x_, fresh) * proj
            return (z * z).sum()

        err = grad_check(f, [x, sc, sh])
        assert err < 1e-5

    def test_grad_check_eval(self):
        rng = np.random.default_rng(16)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
        sc = Tensor(rng.normal(1.0, 0.1, size=3), requires_grad=True)
        sh = Tensor(rng.normal(size=3), requires_grad=True)
        rm = rng.normal(size=3)
        rv = rng.uniform(0.5, 2.0, size=3)
        proj = Tensor(rng.normal(size=(2, 3, 4, 4)))

        def f(x_, sc_, sh_):
            st = ops.BatchNormState(sc_, sh_, rm, rv, mode="eval", updates=1)
            z = ops.batchnorm2d(x_, st) * proj
            return (z * z).sum()

        assert grad_check(f, [x, sc, sh]) < 1e-5


class TestPRelu:
    def test_negative_slope(self):
        x = Tensor(np.full((1, 1, 1, 1), -2.0))
        s = Tensor(np.array([0.25]))
        assert ops.prelu(x, s).item() == -0.5

    def test_positive_passthrough(self):
        x = Tensor(np.full((1, 2, 2, 2), 3.0))
        s = Tensor(np.array([0.25, 0.5]))
        np.testing.assert_array_equal(ops.prelu(x, s).data, x.data)

    def test_grad_check(self):
        rng = np.random.default_rng(17)
        # Keep inputs away from the kink at zero.
        data = rng.normal(size=(2, 3, 4, 4))
        data[np.abs(data) < 0.1] = 0.5
        x = Tensor(data, requires_grad=True)
        s = Tensor(rng.uniform(0.1, 0.4, size=3), requires_grad=True)
        assert grad_check(lambda x_, s_: (ops.prelu(x_, s_) * ops.prelu(x_, s_)).sum(), [x, s]) < 1e-5


class TestSpatialDropout:
    def test_eval_is_identity(self):
        x = Tensor(np.random.default_rng(18).normal(size=(2, 3, 4, 4)))
        out = ops.spatial_dropout2d(x, 0.5, seed=0, mode="eval")
        assert out.data.tobytes() == x.data.tobytes()

    def test_p_out_of_range(self):
        x = Tensor(np.zeros((1, 1, 2, 2)))
        with pytest.raises(ContractError):
            ops.spatial_dropout2d(x, 1.0, seed=0, mode="train")

    def test_survivor_fraction(self):
        x = Tensor(np.ones((1, 10000, 1, 1)))
        out = ops.spatial_dropout2d(x, 0.5, seed=42, mode="train")
        frac = (out.data != 0).mean()
        assert abs(frac - 0.5) < 0.02

    def test_survivors_rescaled(self):
        x = Tensor(np.ones((1, 1000, 1, 1)))
        out = ops.spatial_dropout2d(x, 0.25, seed=1, mode="train")
        kept = out.data[out.data != 0]
        np.testing.assert_allclose(kept, 1.0 / 0.75)

    def test_grad_matches_mask(self):
        x = Tensor(np.ones((1, 50, 2, 2)), requires_grad=True)
        out = ops.spatial_dropout2d(x, 0.5, seed=3, mode="train")
        mask = (out.data != 0).astype(float) * 2.0
        backward(out.sum())
        np.testing.assert_array_equal(x.grad, mask)


class TestOpGradSuite:
    """Every differentiable op passes the finite-difference oracle."""

    def test_elementwise_ops(self):
        rng = np.random.default_rng(19)
        x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        y = Tensor(rng.normal(size=(2, 3)) + 3.0, requires_grad=True)
        for f in [
            lambda a, b: (a + b).sum(),
            lambda a, b: (a - b).sum(),
            lambda a, b: (a * b).sum(),
            lambda a, b: (a / b).sum(),
            lambda a, b: (tz.sigmoid(a) * b).sum(),
            lambda a, b: (tz.exp(a) + b).sum(),
        ]:
            assert grad_check(f, [x, y]) < 1e-5

    def test_structural_ops(self):
        rng = np.random.default_rng(20)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
        for f in [
            lambda a: tz.reshape(a, (6, 16)).sum(),
            lambda a: tz.slice_ranges(a, [None, (1, 3), (0, 2)]).sum(),
            lambda a: tz.pad_spatial(a, 2).sum(),
            lambda a: tz.concat_channels(a, a).sum(),
            lambda a: (tz.reduce_sum(a, axes=(0, 2, 3)) * tz.reduce_sum(a, axes=(0, 2, 3))).sum(),
        ]:
            assert grad_check(f, [x]) < 1e-5
