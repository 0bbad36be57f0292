"""Forward behavior of the tensor kernels against small oracles."""

import numpy as np
import pytest

from bitrunet import kernels, reference
from bitrunet.tensor import (
    ConvSpec,
    Tensor,
    concat,
    conv3d,
    conv_transpose3d,
    flip,
    global_avg_pool,
    global_max_pool,
    layer_norm,
    matmul,
    softmax,
    tmax,
)

rng = np.random.default_rng(1234)


class TestConv3d:
    def test_identity_kernel_preserves_input(self):
        x = Tensor(np.ones((1, 1, 4, 4, 4)))
        w = np.zeros((1, 1, 3, 3, 3))
        w[0, 0, 1, 1, 1] = 1.0
        spec = ConvSpec(1, 1, stride=1, padding=1)
        y = conv3d(x, spec, Tensor(w), Tensor(np.zeros(1)))
        assert np.array_equal(y.data, x.data)

    def test_stride2_halves_spatial(self):
        x = Tensor(rng.standard_normal((1, 1, 4, 4, 4)))
        spec = ConvSpec(1, 2, stride=2, padding=1)
        y = conv3d(x, spec, Tensor(rng.standard_normal((2, 1, 3, 3, 3))), Tensor(np.zeros(2)))
        assert y.shape == (1, 2, 2, 2, 2)

    def test_matches_naive_loop(self):
        x = rng.standard_normal((1, 2, 5, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3, 3))
        for stride in (1, 2):
            got = conv3d(
                Tensor(x), ConvSpec(2, 3, stride=stride, padding=1),
                Tensor(w), Tensor(np.zeros(3)),
            ).data
            ref = reference.naive_conv3d(x, w, stride, 1)
            rel = np.abs(got - ref).max() / np.abs(ref).max()
            assert rel < 1e-6

    def test_zero_input_gives_broadcast_bias(self):
        bias = rng.standard_normal(3)
        y = conv3d(
            Tensor(np.zeros((2, 2, 4, 4, 4))), ConvSpec(2, 3),
            Tensor(rng.standard_normal((3, 2, 3, 3, 3))), Tensor(bias),
        )
        assert np.array_equal(y.data, np.broadcast_to(bias[:, None, None, None], (2, 3, 4, 4, 4)))

    def test_channel_mismatch_names_axis(self):
        x = Tensor(np.zeros((1, 3, 4, 4, 4)))
        with pytest.raises(ValueError, match="axis 1.*size 3.*expected 2"):
            conv3d(x, ConvSpec(2, 1), Tensor(np.zeros((1, 2, 3, 3, 3))), None)

    def test_zero_spatial_rejected(self):
        x = Tensor(np.zeros((1, 2, 4, 0, 4)))
        with pytest.raises(ValueError, match="axis 3.*zero"):
            conv3d(x, ConvSpec(2, 1), Tensor(np.zeros((1, 2, 3, 3, 3))), None)


class TestConvTranspose3d:
    def test_stride2_doubles_spatial(self):
        x = Tensor(rng.standard_normal((1, 1, 2, 2, 2)))
        spec = ConvSpec(1, 1, stride=2, padding=1, transposed=True)
        y = conv_transpose3d(x, spec, Tensor(rng.standard_normal((1, 1, 3, 3, 3))), Tensor(np.zeros(1)))
        assert y.shape == (1, 1, 4, 4, 4)

    @pytest.mark.parametrize("stride,in_spatial", [(1, (3, 4, 5)), (2, (4, 4, 6))])
    def test_adjoint_of_conv3d(self, stride, in_spatial):
        # <conv(x), y> == <x, conv_transpose(y)> with a shared weight
        w = rng.standard_normal((3, 2, 3, 3, 3))
        x = rng.standard_normal((1, 2) + in_spatial)
        spec = ConvSpec(2, 3, stride=stride, padding=1)
        cx = conv3d(Tensor(x), spec, Tensor(w), None).data
        y = rng.standard_normal(cx.shape)
        tspec = ConvSpec(3, 2, stride=stride, padding=1, transposed=True)
        ty = conv_transpose3d(Tensor(y), tspec, Tensor(w), None, output_size=in_spatial).data
        lhs = float((cx * y).sum())
        rhs = float((x * ty).sum())
        assert abs(lhs - rhs) / abs(lhs) < 1e-6

    def test_zero_input_gives_bias(self):
        bias = rng.standard_normal(2)
        spec = ConvSpec(3, 2, stride=2, padding=1, transposed=True)
        y = conv_transpose3d(
            Tensor(np.zeros((1, 3, 2, 2, 2))), spec,
            Tensor(rng.standard_normal((3, 2, 3, 3, 3))), Tensor(bias),
        )
        assert np.array_equal(y.data, np.broadcast_to(bias[:, None, None, None], (1, 2, 4, 4, 4)))

    def test_requires_transposed_spec(self):
        with pytest.raises(ValueError, match="not transposed"):
            conv_transpose3d(
                Tensor(np.zeros((1, 1, 2, 2, 2))), ConvSpec(1, 1),
                Tensor(np.zeros((1, 1, 3, 3, 3))), None,
            )


class TestMatmul:
    def test_identity(self):
        b = rng.standard_normal((3, 2))
        assert np.allclose(matmul(Tensor(np.eye(3)), Tensor(b)).data, b)

    def test_known_2x2_product(self):
        a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        b = Tensor(np.array([[5.0, 6.0], [7.0, 8.0]]))
        assert np.array_equal(matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])

    def test_matches_triple_loop(self):
        a = rng.standard_normal((4, 5))
        b = rng.standard_normal((5, 3))
        got = matmul(Tensor(a), Tensor(b)).data
        assert np.abs(got - reference.naive_matmul(a, b)).max() < 1e-10

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="inner dimensions"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


class TestLayerNorm:
    def test_constant_row_collapses_to_zero(self):
        x = Tensor(np.full((2, 5), 3.7))
        y = layer_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)))
        assert np.abs(y.data).max() < 1e-3

    def test_already_normalized_row(self):
        x = Tensor(np.array([[1.0, -1.0]]))
        y = layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        assert np.allclose(y.data, [[1.0, -1.0]], atol=1e-6)

    def test_random_row_statistics(self):
        x = Tensor(rng.standard_normal((4, 32)))
        y = layer_norm(x, Tensor(np.ones(32)), Tensor(np.zeros(32))).data
        assert np.abs(y.mean(axis=-1)).max() < 1e-6
        assert np.abs(y.var(axis=-1) - 1.0).max() < 1e-4

    def test_affine_shape_check(self):
        with pytest.raises(ValueError, match="shape"):
            layer_norm(Tensor(np.zeros((2, 5))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


class TestPointwiseAndShape:
    def test_softmax_symmetry(self):
        y = softmax(Tensor(np.zeros((1, 3))), axis=-1)
        assert np.allclose(y.data, 1.0 / 3.0)

    def test_softmax_rows_are_probability_vectors(self):
        y = softmax(Tensor(rng.standard_normal((5, 7)) * 10), axis=-1).data
        assert (y >= 0).all()
        assert np.abs(y.sum(axis=-1) - 1.0).max() < 1e-6

    def test_softmax_invalid_axis(self):
        with pytest.raises(ValueError, match="axis"):
            softmax(Tensor(np.zeros((2, 2))), axis=5)

    def test_flip_involution_exact(self):
        x = rng.standard_normal((2, 3, 4, 5, 6))
        for axes in [(2,), (3, 4), (2, 3, 4)]:
            y = flip(flip(Tensor(x), axes), axes).data
            assert np.array_equal(y, x)

    def test_flip_rejects_non_spatial_axis(self):
        with pytest.raises(ValueError, match="spatial"):
            flip(Tensor(np.zeros((1, 2, 3, 3, 3))), (0,))

    def test_global_avg_pool_mean(self):
        x = Tensor(np.arange(1.0, 9.0).reshape(1, 1, 2, 2, 2))
        assert global_avg_pool(x).data.reshape(()) == pytest.approx(4.5)

    def test_global_max_pool(self):
        x = Tensor(np.arange(1.0, 9.0).reshape(1, 1, 2, 2, 2))
        assert global_max_pool(x).data.reshape(()) == 8.0
        assert global_max_pool(x).shape == (1, 1, 1, 1, 1)

    def test_concat_channels(self):
        a, b = np.zeros((1, 2, 3, 3, 3)), np.ones((1, 3, 3, 3, 3))
        y = concat([Tensor(a), Tensor(b)], axis=1)
        assert y.shape == (1, 5, 3, 3, 3)
        assert np.array_equal(y.data, np.concatenate([a, b], axis=1))

    def test_max_axis(self):
        x = rng.standard_normal((2, 5, 3))
        assert np.array_equal(tmax(Tensor(x), axis=1, keepdims=True).data, x.max(1, keepdims=True))


class TestAdjointness:
    """<K(x), y> == <x, K^T(y)> for the linear kernels, 64-bit."""

    def _check(self, fwd, adj, x_shape, y_shape):
        for _ in range(5):
            x = rng.standard_normal(x_shape)
            y = rng.standard_normal(y_shape)
            lhs = float((fwd(x) * y).sum())
            rhs = float((x * adj(y)).sum())
            assert abs(lhs - rhs) / max(abs(lhs), 1e-12) < 1e-6

    def test_conv_stride1(self):
        w = rng.standard_normal((3, 2, 3, 3, 3))
        spec = ConvSpec(2, 3)
        tspec = ConvSpec(3, 2, transposed=True)
        self._check(
            lambda x: conv3d(Tensor(x), spec, Tensor(w), None).data,
            lambda y: conv_transpose3d(Tensor(y), tspec, Tensor(w), None).data,
            (1, 2, 4, 4, 4), (1, 3, 4, 4, 4),
        )

    def test_conv_stride2(self):
        w = rng.standard_normal((3, 2, 3, 3, 3))
        spec = ConvSpec(2, 3, stride=2)
        tspec = ConvSpec(3, 2, stride=2, transposed=True)
        self._check(
            lambda x: conv3d(Tensor(x), spec, Tensor(w), None).data,
            lambda y: conv_transpose3d(Tensor(y), tspec, Tensor(w), None).data,
            (1, 2, 4, 4, 4), (1, 3, 2, 2, 2),
        )

    def test_matmul_fixed_left(self):
        a = rng.standard_normal((4, 6))
        self._check(
            lambda x: a @ x, lambda y: a.T @ y, (6, 3), (4, 3)
        )

    def test_flip_self_adjoint(self):
        self._check(
            lambda x: flip(Tensor(x), (2, 4)).data,
            lambda y: flip(Tensor(y), (2, 4)).data,
            (1, 2, 3, 3, 3), (1, 2, 3, 3, 3),
        )

    def test_avg_pool_vs_broadcast(self):
        n_sp = 2 * 3 * 4
        self._check(
            lambda x: global_avg_pool(Tensor(x)).data,
            lambda y: np.broadcast_to(y / n_sp, (1, 2, 2, 3, 4)).copy(),
            (1, 2, 2, 3, 4), (1, 2, 1, 1, 1),
        )


class TestKernelBackends:
    """The numba and numpy flavors must agree bit-for-bit in structure."""

    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("pad", [0, 1])
    def test_all_three_primitives(self, stride, pad):
        x = rng.standard_normal((2, 3, 6, 5, 7))
        w = rng.standard_normal((4, 3, 3, 3, 3))
        f_np = kernels.conv3d_forward_np(x, w, stride, pad)
        f_nb = kernels.conv3d_forward_nb(x, w, stride, pad)
        assert np.abs(f_np - f_nb).max() < 1e-10
        gy = rng.standard_normal(f_np.shape)
        gx_np = kernels.conv3d_input_grad_np(gy, w, stride, pad, x.shape[2:])
        gx_nb = kernels.conv3d_input_grad_nb(gy, w, stride, pad, x.shape[2:])
        assert np.abs(gx_np - gx_nb).max() < 1e-10
        gw_np = kernels.conv3d_weight_grad_np(x, gy, stride, pad, (3, 3, 3))
        gw_nb = kernels.conv3d_weight_grad_nb(x, gy, stride, pad, (3, 3, 3))
        assert np.abs(gw_np - gw_nb).max() < 1e-10

    def test_out_size_arithmetic(self):
        assert kernels.conv_out_size(4, 3, 2, 1) == 2
        assert kernels.conv_out_size(5, 3, 2, 1) == 3
        assert kernels.conv_out_size(7, 3, 1, 1) == 7
