"""Forward semantics of the tensor primitives against hand values and oracles."""

import concurrent.futures

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import rand_tensor, rel_err
from striprf import reference
from striprf.tensor import (ConvSpec, ShapeError, Tensor, activation, add,
                            avg_pool, broadcast_expand, concat_channels,
                            conv2d, conv_spec, grid_sample_bilinear, hadamard,
                            max_pool, pad2d, pixel_shuffle, relu, sigmoid,
                            slice_channels, sum_all, upsample_nearest)


class TestTensor:
    def test_rejects_non_rank4(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 3)))

    def test_buffer_is_read_only(self):
        t = Tensor(np.ones((1, 1, 2, 2)))
        with pytest.raises(ValueError):
            t.data[0, 0, 0, 0] = 5.0

    def test_does_not_share_caller_buffer(self):
        arr = np.ones((1, 1, 2, 2))
        t = Tensor(arr)
        arr[0, 0, 0, 0] = 99.0
        assert t.data[0, 0, 0, 0] == 1.0

    def test_default_dtype_is_float32(self):
        assert Tensor([[[[1, 2]]]]).dtype == np.float32
        assert Tensor(np.zeros((1, 1, 1, 1), np.float64)).dtype == np.float64


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rand_tensor(rng, (1, 1, 3, 3))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = conv2d(x, Tensor(w), None, conv_spec(3, padding=1))
        assert np.array_equal(out.data, x.data)

    def test_row_kernel(self):
        x = Tensor(np.array([[[[1.0, 2.0, 3.0, 4.0]]]]))
        w = Tensor(np.ones((1, 1, 1, 3)))
        out = conv2d(x, w, None, conv_spec((1, 3), padding=(0, 1)))
        assert np.array_equal(out.data.ravel(), [3.0, 6.0, 9.0, 7.0])

    def test_grouped_dilated_matches_naive(self):
        rng = np.random.default_rng(42)
        x = rand_tensor(rng, (2, 4, 9, 9))
        w = rand_tensor(rng, (4, 2, 3, 3))
        spec = conv_spec(3, padding=2, dilation=2, groups=2)
        out = conv2d(x, w, None, spec)
        ref = reference.naive_conv2d(x.data, w.data, None, (1, 1), (2, 2), (2, 2), 2)
        assert rel_err(out.data, ref) <= 1e-6

    def test_strided_output_size(self):
        rng = np.random.default_rng(1)
        out = conv2d(rand_tensor(rng, (1, 2, 8, 8)), rand_tensor(rng, (4, 2, 3, 3)),
                     None, conv_spec(3, stride=2, padding=1))
        assert out.dims == (1, 4, 4, 4)

    def test_channel_mismatch_names_dimension(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ShapeError, match="in-channel"):
            conv2d(rand_tensor(rng, (1, 3, 4, 4)), rand_tensor(rng, (2, 2, 3, 3)),
                   None, conv_spec(3, padding=1))

    def test_non_positive_output_rejected(self):
        rng = np.random.default_rng(3)
        with pytest.raises(ShapeError, match="non-positive"):
            conv2d(rand_tensor(rng, (1, 1, 2, 2)), rand_tensor(rng, (1, 1, 5, 5)),
                   None, conv_spec(5))

    def test_bias_flag_consistency(self):
        rng = np.random.default_rng(4)
        x = rand_tensor(rng, (1, 1, 4, 4))
        w = rand_tensor(rng, (1, 1, 1, 1))
        with pytest.raises(ShapeError, match="has_bias"):
            conv2d(x, w, None, conv_spec(1, has_bias=True))

    def test_mixed_dtype_rejected(self):
        x = Tensor(np.zeros((1, 1, 2, 2), np.float32))
        w = Tensor(np.zeros((1, 1, 1, 1), np.float64))
        with pytest.raises(ShapeError, match="dtype"):
            conv2d(x, w, None, conv_spec(1))

    def test_forward_is_pure(self):
        rng = np.random.default_rng(5)
        x = rand_tensor(rng, (1, 4, 8, 8))
        w = rand_tensor(rng, (8, 4, 3, 3))
        spec = conv_spec(3, padding=1)
        a = conv2d(x, w, None, spec)
        b = conv2d(x, w, None, spec)
        assert a.data.tobytes() == b.data.tobytes()

    def test_thread_safety(self):
        rng = np.random.default_rng(6)
        x = rand_tensor(rng, (1, 4, 10, 10))
        w = rand_tensor(rng, (4, 4, 3, 3))
        spec = conv_spec(3, padding=1)
        expected = conv2d(x, w, None, spec).data
        with concurrent.futures.ThreadPoolExecutor(max_workers=8) as pool:
            results = list(pool.map(lambda _: conv2d(x, w, None, spec).data, range(16)))
        assert all(np.array_equal(r, expected) for r in results)


class TestPooling:
    def test_avg_column_means(self):
        x = Tensor(np.array([[[[1.0, 2, 3], [5, 6, 7]]]]))
        assert np.array_equal(avg_pool(x, (2, 1), 1).data.ravel(), [3.0, 4.0, 5.0])

    def test_avg_row_means(self):
        x = Tensor(np.array([[[[1.0, 2, 3], [5, 6, 7]]]]))
        assert np.array_equal(avg_pool(x, (1, 3), 1).data.ravel(), [2.0, 6.0])

    def test_avg_constant(self):
        x = Tensor(np.full((1, 2, 4, 4), 3.5))
        out = avg_pool(x, (2, 2), 2)
        assert np.allclose(out.data, 3.5)

    def test_avg_window_too_large(self):
        with pytest.raises(ShapeError, match="window"):
            avg_pool(Tensor(np.zeros((1, 1, 2, 2))), (3, 1), 1)

    def test_max_basic(self):
        x = Tensor(np.array([[[[1.0, 2], [3, 4]]]]))
        assert max_pool(x, 2, 1).data.ravel()[0] == 4.0

    def test_max_running(self):
        ramp = Tensor(np.arange(1.0, 6.0).reshape(1, 1, 1, 5))
        out = max_pool(ramp, (1, 5), 1, (0, 2))
        assert np.array_equal(out.data.ravel(), [3.0, 4.0, 5.0, 5.0, 5.0])

    def test_window_one_is_identity(self):
        rng = np.random.default_rng(7)
        x = rand_tensor(rng, (2, 3, 5, 5))
        assert np.array_equal(avg_pool(x, (1, 1), 1).data, x.data)
        assert np.array_equal(max_pool(x, (1, 1), 1).data, x.data)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_max_pool_monotone(self, seed):
        rng = np.random.default_rng(seed)
        x = rand_tensor(rng, (1, 2, 6, 6))
        y = Tensor(x.data + np.abs(rng.standard_normal(x.dims)))
        assert np.all(max_pool(x, 3, 2, 1).data <= max_pool(y, 3, 2, 1).data)


class TestActivations:
    def test_relu_points(self):
        out = relu(Tensor(np.array([[[[-1.0, 2.0]]]])))
        assert np.array_equal(out.data.ravel(), [0.0, 2.0])

    def test_central_points(self):
        z = Tensor(np.zeros((1, 1, 1, 1)))
        assert activation(z, "gelu").item() == 0.0
        assert sigmoid(z).item() == 0.5

    def test_silu_equals_composition(self):
        rng = np.random.default_rng(8)
        x = rand_tensor(rng, (1, 1, 10, 10))
        composed = hadamard(x, sigmoid(x))
        assert np.array_equal(activation(x, "silu").data, composed.data)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            activation(Tensor(np.zeros((1, 1, 1, 1))), "softplus")


class TestElementwise:
    def test_hadamard_ones_zeros(self):
        rng = np.random.default_rng(9)
        x = rand_tensor(rng, (1, 2, 3, 3))
        assert np.array_equal(hadamard(x, Tensor(np.ones(x.dims))).data, x.data)
        assert np.all(hadamard(x, Tensor(np.zeros(x.dims))).data == 0.0)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_hadamard_commutes(self, seed):
        rng = np.random.default_rng(seed)
        x = rand_tensor(rng, (1, 2, 3, 3))
        y = rand_tensor(rng, (1, 2, 3, 3))
        assert np.array_equal(hadamard(x, y).data, hadamard(y, x).data)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            hadamard(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 3))))
        with pytest.raises(ShapeError):
            add(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 2, 2, 2))))

    def test_expand_row(self):
        row = Tensor(np.array([[[[1.0, 2.0]]]]))
        out = broadcast_expand(row, (1, 1, 2, 2))
        assert np.array_equal(out.data[0, 0], [[1.0, 2.0], [1.0, 2.0]])

    def test_expand_add_relu_micro_case(self):
        col = Tensor(np.array([[[[10.0], [20.0]]]]))
        row = Tensor(np.array([[[[1.0, 2.0]]]]))
        out = relu(add(broadcast_expand(col, (1, 1, 2, 2)), broadcast_expand(row, (1, 1, 2, 2))))
        assert np.array_equal(out.data[0, 0], [[11.0, 12.0], [21.0, 22.0]])

    def test_expand_requires_singleton(self):
        with pytest.raises(ShapeError, match="expand"):
            broadcast_expand(Tensor(np.zeros((1, 2, 2, 2))), (1, 2, 4, 2))

    def test_concat_keeps_left_block(self):
        rng = np.random.default_rng(10)
        a = rand_tensor(rng, (1, 2, 3, 3))
        b = rand_tensor(rng, (1, 3, 3, 3))
        out = concat_channels([a, b])
        assert out.dims == (1, 5, 3, 3)
        assert np.array_equal(out.data[:, :2], a.data)
        assert np.array_equal(slice_channels(out, 2, 5).data, b.data)

    def test_sum_all_scalar(self):
        assert sum_all(Tensor(np.ones((2, 3, 2, 2)))).item() == 24.0

    def test_pad_places_values(self):
        x = Tensor(np.ones((1, 1, 2, 2)))
        out = pad2d(x, (1, 0, 0, 2))
        assert out.dims == (1, 1, 3, 4)
        assert out.data[0, 0, 0].sum() == 0.0 and out.data[0, 0, 1, 3] == 0.0


class TestResampling:
    def test_upsample_identity_factor_one(self):
        rng = np.random.default_rng(11)
        x = rand_tensor(rng, (1, 2, 3, 3))
        assert np.array_equal(upsample_nearest(x, 1).data, x.data)

    def test_upsample_replicates(self):
        x = Tensor(np.array([[[[1.0, 2.0]]]]))
        out = upsample_nearest(x, 2)
        assert np.array_equal(out.data[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2]])

    def test_upsample_preserves_mean(self):
        rng = np.random.default_rng(12)
        x = rand_tensor(rng, (1, 3, 4, 5))
        assert np.isclose(upsample_nearest(x, 3).data.mean(), x.data.mean(), rtol=1e-12)

    def test_pixel_shuffle_layout(self):
        x = Tensor(np.arange(8.0).reshape(1, 8, 1, 1))
        out = pixel_shuffle(x, 2)
        assert out.dims == (1, 2, 2, 2)
        assert np.array_equal(out.data[0, 0], [[0.0, 1.0], [2.0, 3.0]])
        assert np.array_equal(out.data[0, 1], [[4.0, 5.0], [6.0, 7.0]])

    def test_grid_sample_integer_coords_gather(self):
        rng = np.random.default_rng(13)
        x = rand_tensor(rng, (1, 2, 4, 4))
        hh, ww = np.meshgrid(np.arange(4.0), np.arange(4.0), indexing="ij")
        coords = Tensor(np.stack([hh, ww])[None])
        assert np.array_equal(grid_sample_bilinear(x, coords).data, x.data)

    def test_grid_sample_midpoint(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        coords = Tensor(np.full((1, 2, 1, 1), 0.5))
        assert grid_sample_bilinear(x, coords).item() == 2.5

    def test_grid_sample_regular_grid_is_bilinear_upsample(self):
        rng = np.random.default_rng(14)
        x = rand_tensor(rng, (2, 3, 5, 4))
        s = 2
        base = np.empty((2, 2, 10, 8))
        base[:, 0] = ((np.arange(10) + 0.5) / s - 0.5)[:, None]
        base[:, 1] = ((np.arange(8) + 0.5) / s - 0.5)[None, :]
        out = grid_sample_bilinear(x, Tensor(base))
        assert rel_err(out.data, reference.bilinear_upsample(x.data, s)) <= 1e-6

    def test_grid_sample_clamps_to_border(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        coords = Tensor(np.array([[[[-5.0]], [[9.0]]]]))  # h << 0, w >> W
        assert grid_sample_bilinear(x, coords).item() == 2.0


class TestSeparability:
    @pytest.mark.parametrize("k", [3, 7, 11])
    def test_strip_cascade_equals_outer_product_kernel(self, k):
        rng = np.random.default_rng(k)
        C = 3
        x = rand_tensor(rng, (1, C, 13, 13))
        u = rand_tensor(rng, (C, 1, 1, k))
        v = rand_tensor(rng, (C, 1, k, 1))
        cascade = conv2d(conv2d(x, u, None, conv_spec((1, k), padding=(0, k // 2), groups=C)),
                         v, None, conv_spec((k, 1), padding=(k // 2, 0), groups=C))
        outer = np.einsum("ci,cj->cij", v.data[:, 0, :, 0], u.data[:, 0, 0, :])[:, None]
        full = conv2d(x, Tensor(outer), None, conv_spec(k, padding=k // 2, groups=C))
        assert rel_err(cascade.data, full.data) <= 1e-6
