import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdcnet import arch
from sdcnet import numerics as nx

from oracles import central_differences, conv2d_loops, max_rel_error


def rand_params(rng, o, c, k, dilation=1, stride=1, padding=nx.SAME, dtype=np.float32, bias=True):
    w = rng.normal(size=(o, c, k, k)).astype(dtype)
    b = (rng.normal(size=o) if bias else np.zeros(o)).astype(dtype)
    return nx.ConvParams(w, b, stride=stride, dilation=dilation, padding=padding)


class TestConvForward:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 6, 5)).astype(np.float32)
        w = np.eye(4, dtype=np.float32).reshape(4, 4, 1, 1)
        out = nx.conv2d_forward(x, nx.ConvParams(w, np.zeros(4, np.float32)))
        assert np.array_equal(out, x)

    def test_zero_weights(self):
        x = np.ones((3, 9, 9), np.float32)
        p = nx.ConvParams(np.zeros((5, 3, 3, 3), np.float32), np.zeros(5, np.float32), padding=nx.VALID)
        out = nx.conv2d_forward(x, p)
        assert out.shape == (5, 7, 7)
        assert not out.any()

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 7, 7)).astype(np.float32)
        p = rand_params(rng, 2, 1, 3, dilation=2)
        out = nx.conv2d_forward(x, p)
        ref = conv2d_loops(x, p.weights, p.bias, dilation=2)
        assert out.shape == (2, 7, 7)
        assert np.abs(out - ref).max() <= 1e-6

    @pytest.mark.parametrize("stride,dilation,padding", [(1, 1, nx.VALID), (2, 1, nx.SAME),
                                                          (3, 2, nx.VALID), (1, 3, nx.SAME)])
    def test_matches_loop_oracle_variants(self, stride, dilation, padding):
        rng = np.random.default_rng(stride * 10 + dilation)
        x = rng.normal(size=(3, 11, 10))
        p = rand_params(rng, 4, 3, 3, dilation, stride, padding, dtype=np.float64)
        out = nx.conv2d_forward(x, p)
        ref = conv2d_loops(x, p.weights, p.bias, stride, dilation, padding == nx.SAME)
        assert out.shape == ref.shape
        assert np.abs(out - ref).max() <= 1e-12

    def test_batch_matches_single(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 2, 8, 8))
        p = rand_params(rng, 3, 2, 3, dilation=2, dtype=np.float64)
        out = nx.conv2d_forward(x, p)
        for i in range(3):
            assert np.abs(out[i] - nx.conv2d_forward(x[i], p)).max() <= 1e-12

    def test_same_padding_geometry(self):
        p = nx.ConvParams(np.zeros((1, 1, 5, 5)), np.zeros(1), dilation=3)
        assert p.pad == 6
        assert p.extent == 13

    def test_rejects_channel_mismatch(self):
        p = nx.ConvParams(np.zeros((1, 2, 3, 3)), np.zeros(1))
        with pytest.raises(ValueError, match="channels"):
            nx.conv2d_forward(np.zeros((3, 5, 5)), p)

    def test_rejects_empty_valid_output(self):
        p = nx.ConvParams(np.zeros((1, 1, 3, 3)), np.zeros(1), dilation=3, padding=nx.VALID)
        with pytest.raises(ValueError):
            nx.conv2d_forward(np.zeros((1, 6, 6)), p)

    def test_rejects_even_kernel(self):
        with pytest.raises(ValueError, match="odd"):
            nx.ConvParams(np.zeros((1, 1, 2, 2)), np.zeros(1))


class TestConvBackward:
    def test_zero_grad(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 6, 6)).astype(np.float32)
        p = rand_params(rng, 3, 2, 3)
        gx, gw, gb = nx.conv2d_backward(x, p, np.zeros((3, 6, 6), np.float32))
        assert not gx.any() and not gw.any() and not gb.any()

    def test_identity_kernel_passes_gradient(self):
        rng = np.random.default_rng(4)
        g = rng.normal(size=(2, 5, 5))
        p = nx.ConvParams(np.eye(2).reshape(2, 2, 1, 1), np.zeros(2))
        gx, _, gb = nx.conv2d_backward(rng.normal(size=(2, 5, 5)), p, g)
        assert np.array_equal(gx, g)
        assert np.allclose(gb, g.sum(axis=(1, 2)))

    def test_grad_shape_mismatch(self):
        p = nx.ConvParams(np.zeros((3, 2, 3, 3)), np.zeros(3))
        with pytest.raises(ValueError):
            nx.conv2d_backward(np.zeros((2, 6, 6)), p, np.zeros((3, 5, 5)))

    @pytest.mark.parametrize("dtype,eps,tol", [(np.float32, 1e-3, 1e-3), (np.float64, 1e-6, 1e-6)])
    def test_finite_differences(self, dtype, eps, tol):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 7, 7)).astype(dtype)
        p = rand_params(rng, 2, 2, 3, dilation=3, dtype=dtype)
        g = rng.normal(size=(2, 7, 7)).astype(dtype)
        gx, gw, gb = nx.conv2d_backward(x, p, g)

        def loss_x(xx):
            return float(np.sum(nx.conv2d_forward(xx, p).astype(np.float64) * g))

        def loss_w(ww):
            return float(np.sum(nx.conv2d_forward(x, nx.ConvParams(ww, p.bias, dilation=3)) * g))

        def loss_b(bb):
            return float(np.sum(nx.conv2d_forward(x, nx.ConvParams(p.weights, bb, dilation=3)) * g))

        assert max_rel_error(gx, central_differences(loss_x, x.copy(), eps)) <= tol
        assert max_rel_error(gw, central_differences(loss_w, p.weights.copy(), eps)) <= tol
        assert max_rel_error(gb, central_differences(loss_b, p.bias.copy(), eps)) <= tol


class TestSparseConv:
    def test_full_mask_equals_dense(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(2, 9, 9))
        p = rand_params(rng, 3, 2, 5, dtype=np.float64)
        m = nx.SparseMask(np.ones((5, 5), bool))
        assert np.abs(nx.sparse_conv2d_forward(x, p, m) - nx.conv2d_forward(x, p)).max() <= 1e-12

    def test_center_only_equals_1x1(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 6, 6))
        p = rand_params(rng, 3, 2, 5, dtype=np.float64)
        mask = np.zeros((5, 5), bool)
        mask[2, 2] = True
        one = nx.ConvParams(p.weights[:, :, 2:3, 2:3].copy(), p.bias)
        out = nx.sparse_conv2d_forward(x, p, nx.SparseMask(mask))
        assert np.abs(out - nx.conv2d_forward(x, one)).max() <= 1e-12

    def test_union_mask_equals_sum_of_dilated_branches(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(2, 20, 20))
        dil = (1, 2, 3, 4)
        kernels = [rng.normal(size=(3, 2, 5, 5)) for _ in dil]
        big = arch.scatter_branch_kernels(kernels, dil, 17)
        m = arch.merged_sparse_mask(17, 5, dil)
        sparse = nx.sparse_conv2d_forward(x, nx.ConvParams(big, np.zeros(3)), m)
        total = sum(nx.conv2d_forward(x, nx.ConvParams(k, np.zeros(3), dilation=d)) for k, d in zip(kernels, dil))
        assert np.abs(sparse - total).max() <= 1e-10

    def test_masked_weight_gradients_are_zero(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(2, 10, 10))
        m = arch.merged_sparse_mask(5, 3, (1, 2))
        p = rand_params(rng, 2, 2, 5, dtype=np.float64)
        _, gw, _ = nx.sparse_conv2d_backward(x, p, m, rng.normal(size=(2, 10, 10)))
        assert not gw[:, :, ~m.mask].any()
        assert np.abs(gw[:, :, m.mask]).min() > 0

    def test_sparse_backward_matches_masked_dense(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(2, 10, 10))
        m = arch.merged_sparse_mask(5, 3, (1, 2))
        p = rand_params(rng, 2, 2, 5, dtype=np.float64)
        g = rng.normal(size=(2, 10, 10))
        masked = nx.ConvParams(p.weights * m.mask, p.bias)
        gx_s, gw_s, gb_s = nx.sparse_conv2d_backward(x, p, m, g)
        gx_d, gw_d, gb_d = nx.conv2d_backward(x, masked, g)
        assert np.allclose(gx_s, gx_d, atol=1e-12)
        assert np.allclose(gw_s, gw_d * m.mask, atol=1e-12)
        assert np.allclose(gb_s, gb_d)

    def test_mask_size_mismatch(self):
        p = nx.ConvParams(np.zeros((1, 1, 5, 5)), np.zeros(1))
        with pytest.raises(ValueError):
            nx.sparse_conv2d_forward(np.zeros((1, 6, 6)), p, nx.SparseMask(np.ones((3, 3), bool)))

    def test_mask_needs_center(self):
        mask = np.ones((3, 3), bool)
        mask[1, 1] = False
        with pytest.raises(ValueError):
            nx.SparseMask(mask)

    def test_nonzero_count(self):
        assert nx.SparseMask(np.eye(5, dtype=bool)).nonzero_count == 5


class TestActivations:
    def test_elu_values(self):
        assert nx.elu(np.array([0.0]))[0] == 0.0
        assert nx.elu(np.array([2.0]))[0] == 2.0
        assert abs(nx.elu(np.array([-1.0]))[0] - (np.exp(-1.0) - 1.0)) < 1e-15
        assert abs(nx.elu(np.array([-1.0]))[0] - (-0.632121)) < 1e-6

    def test_elu_alpha(self):
        assert abs(nx.elu(np.array([-2.0]), alpha=0.5)[0] - 0.5 * (np.exp(-2) - 1)) < 1e-15
        with pytest.raises(ValueError):
            nx.elu(np.zeros(1), alpha=0.0)

    def test_elu_derivative(self):
        x = np.array([-1.5, -0.2, 0.3, 2.0])
        g = nx.elu_backward(x, np.ones(4))
        assert np.allclose(g, np.where(x > 0, 1.0, np.exp(x)))
        assert np.allclose(nx.elu_backward(x, np.ones(4), out=nx.elu(x)), g)

    def test_elu_derivative_alpha(self):
        x = np.array([-1.5, -0.2, 0.0, 0.3, 2.0])
        g = nx.elu_backward(x, np.full(5, 2.0), alpha=0.5)
        assert np.allclose(g, 2.0 * np.where(x > 0, 1.0, 0.5 * np.exp(x)))
        assert g.dtype == np.float64
        assert nx.elu_backward(x.astype(np.float32), np.ones(5, np.float32)).dtype == np.float32

    def test_elu_rejects_nan(self):
        with pytest.raises(ValueError, match="NaN"):
            nx.elu(np.array([0.0, np.nan]))

    def test_relu(self):
        assert nx.relu(np.array([-3.0]))[0] == 0
        assert nx.relu(np.array([5.0]))[0] == 5
        assert nx.relu_backward(np.array([0.0]), np.array([1.0]))[0] == 0

    @pytest.mark.parametrize("fn,bwd", [(nx.elu, nx.elu_backward), (nx.relu, nx.relu_backward)])
    def test_gradient_check_away_from_zero(self, fn, bwd):
        rng = np.random.default_rng(11)
        x = rng.normal(size=20)
        x = np.where(np.abs(x) < 0.1, 0.5, x)
        g = rng.normal(size=20)
        num = central_differences(lambda v: float(np.sum(fn(v) * g)), x.copy(), 1e-6)
        assert max_rel_error(bwd(x, g), num) <= 1e-6


class TestConcat:
    def test_single_part_identity(self):
        a = np.arange(12.0).reshape(1, 3, 4)
        assert np.array_equal(nx.concat_channels([a]), a)

    def test_two_constant_maps(self):
        out = nx.concat_channels([np.zeros((1, 2, 2)), np.ones((1, 2, 2))])
        assert out.shape == (2, 2, 2)
        assert not out[0].any() and (out[1] == 1).all()

    def test_round_trip(self):
        rng = np.random.default_rng(12)
        parts = [rng.normal(size=(c, 3, 3)) for c in (1, 4, 2)]
        back = nx.split_channels_backward(nx.concat_channels(parts), [1, 4, 2])
        assert all(np.array_equal(a, b) for a, b in zip(parts, back))

    def test_spatial_mismatch(self):
        with pytest.raises(ValueError):
            nx.concat_channels([np.zeros((1, 2, 2)), np.zeros((1, 3, 2))])


class TestLinfNormalize:
    def test_example(self):
        out = nx.linf_normalize(np.array([0.5, -0.25]).reshape(2, 1, 1))
        assert np.allclose(out.ravel(), [1.0, -0.5])

    def test_zero_vector(self):
        assert not nx.linf_normalize(np.zeros((3, 1, 1))).any()

    def test_range_and_unit_component(self):
        rng = np.random.default_rng(13)
        out = nx.linf_normalize(rng.normal(size=(8, 5, 5)))
        assert np.abs(out).max() <= 1.0
        assert np.allclose(np.abs(out).max(axis=0), 1.0)

    @pytest.mark.parametrize("dtype,eps,tol", [(np.float32, 1e-3, 1e-3), (np.float64, 1e-6, 1e-6)])
    def test_gradient(self, dtype, eps, tol):
        f = np.array([0.3, -1.2, 0.7, 0.1], dtype=dtype).reshape(4, 1, 1)
        g = np.array([0.5, -0.4, 1.1, 0.2], dtype=dtype).reshape(4, 1, 1)
        num = central_differences(lambda v: float(np.sum(nx.linf_normalize(v).astype(np.float64) * g)),
                                  f.copy(), eps)
        assert max_rel_error(nx.linf_normalize_backward(f, g), num) <= tol

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=6))
    def test_idempotent(self, vals):
        v = np.array(vals).reshape(-1, 1, 1)
        if np.abs(v).max() < 1e-8:
            return
        once = nx.linf_normalize(v)
        assert np.allclose(nx.linf_normalize(once), once, rtol=0, atol=1e-15)


class TestSubsample:
    def test_factor_one(self):
        x = np.arange(16.0).reshape(1, 4, 4)
        assert np.array_equal(nx.subsample(x, 1), x)

    def test_even_grid(self):
        x = np.arange(16.0).reshape(1, 4, 4)
        assert np.array_equal(nx.subsample(x, 2), np.array([[[0.0, 2.0], [8.0, 10.0]]]))

    def test_composition(self):
        x = np.arange(17 * 19.0).reshape(1, 17, 19)
        for py in range(2):
            for px in range(2):
                two = nx.subsample(nx.subsample(x, 2, (py, px)), 2, (py, px))
                four = nx.subsample(x, 4, (3 * py, 3 * px))
                assert np.array_equal(two, four)

    def test_bad_phase(self):
        with pytest.raises(ValueError):
            nx.subsample(np.zeros((1, 4, 4)), 2, (2, 0))


class TestBilinear:
    def test_integer_is_exact(self):
        rng = np.random.default_rng(14)
        img = rng.random((2, 4, 5)).astype(np.float32)
        assert np.array_equal(nx.bilinear_sample(img, 2, 3), img[:, 2, 3])

    def test_midpoint(self):
        img = np.array([[[0.0, 1.0]]])
        assert nx.bilinear_sample(img, 0, 0.5)[0] == 0.5

    def test_hand_expanded(self):
        rng = np.random.default_rng(15)
        img = rng.random((1, 3, 3))
        i = img[0]
        y, x = 0.25, 0.75
        expected = (i[0, 0] * 0.75 * 0.25 + i[0, 1] * 0.75 * 0.75
                    + i[1, 0] * 0.25 * 0.25 + i[1, 1] * 0.25 * 0.75)
        assert abs(nx.bilinear_sample(img, y, x)[0] - expected) < 1e-15

    def test_reflection_outside(self):
        img = np.arange(4.0).reshape(1, 1, 4)
        # index -1 mirrors to 1, index 4 mirrors to 2
        assert nx.bilinear_sample(img, 0, -1)[0] == 1.0
        assert nx.bilinear_sample(img, 0, 4)[0] == 2.0

    def test_reflect_index(self):
        assert list(nx.reflect_index(np.arange(-3, 7), 4)) == [3, 2, 1, 0, 1, 2, 3, 2, 1, 0]
        assert list(nx.reflect_index(np.array([-2, 5]), 1)) == [0, 0]


class TestProperties:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([2, 3, 4]), st.sampled_from([1, 3]))
    def test_dilation_stride_equivalence(self, seed, r, k):
        rng = np.random.default_rng(seed)
        py, px = rng.integers(0, r, size=2)
        x = rng.normal(size=(2, 4 * r + 7, 4 * r + 9)).astype(np.float32)
        w = rng.normal(size=(3, 2, k, k)).astype(np.float32)
        b = rng.normal(size=3).astype(np.float32)
        dil = nx.conv2d_forward(x, nx.ConvParams(w, b, stride=1, dilation=r, padding=nx.VALID))
        sub = nx.conv2d_forward(nx.subsample(x, r, (py, px)), nx.ConvParams(w, b, padding=nx.VALID))
        ref = nx.subsample(dil, r, (py, px))
        n0, n1 = min(ref.shape[1], sub.shape[1]), min(ref.shape[2], sub.shape[2])
        assert np.abs(ref[:, :n0, :n1] - sub[:, :n0, :n1]).max() <= 1e-6

    def test_strided_dilated_phase_matches_subsampled(self):
        rng = np.random.default_rng(16)
        r = 3
        x = rng.normal(size=(1, 23, 23))
        p_strided = nx.ConvParams(rng.normal(size=(2, 1, 3, 3)), np.zeros(2), stride=r, dilation=r,
                                  padding=nx.VALID)
        strided = nx.conv2d_forward(x, p_strided)
        sub = nx.conv2d_forward(nx.subsample(x, r, (0, 0)),
                                nx.ConvParams(p_strided.weights, p_strided.bias, padding=nx.VALID))
        assert np.abs(strided - sub).max() <= 1e-12

    def test_linearity(self):
        rng = np.random.default_rng(17)
        X, Y = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
        p = rand_params(rng, 4, 3, 3, dilation=2, bias=False)
        lhs = nx.conv2d_forward(2.5 * X - 0.5 * Y, p)
        rhs = 2.5 * nx.conv2d_forward(X, p) - 0.5 * nx.conv2d_forward(Y, p)
        assert np.abs(lhs - rhs).max() <= 1e-5

    def test_adjointness(self):
        rng = np.random.default_rng(18)
        X = rng.normal(size=(3, 9, 9)).astype(np.float32)
        G = rng.normal(size=(4, 9, 9)).astype(np.float32)
        p = rand_params(rng, 4, 3, 3, dilation=2, bias=False)
        lhs = float(np.sum(nx.conv2d_forward(X, p).astype(np.float64) * G))
        rhs = float(np.sum(X.astype(np.float64) * nx.conv2d_backward(X, p, G)[0]))
        assert abs(lhs - rhs) <= 1e-4 * abs(lhs)

    def test_deterministic_mode_bit_reproducible(self):
        rng = np.random.default_rng(19)
        x = rng.normal(size=(8, 30, 30)).astype(np.float32)
        p = rand_params(rng, 16, 8, 3, dilation=2)
        with nx.deterministic():
            a = nx.conv2d_forward(x, p)
            b = nx.conv2d_forward(x, p)
        assert np.array_equal(a, b)
