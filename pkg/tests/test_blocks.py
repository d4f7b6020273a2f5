"""Attention cascade (LSKA) and the shape-perception pooling block."""

import numpy as np
import pytest

from helpers import rand_tensor, randomize_record, rel_err
from striprf import reference
from striprf.blocks import (LskaParams, SpmParams, lska_attention,
                            lska_forward, lska_kernel_sizes, spm_forward)
from striprf.model import KernelConfig, _lska, _spm
from striprf.tensor import ShapeError, Tensor, concat_channels, max_pool

F64 = np.float64


def impulse_kernels(p: LskaParams):
    for name in ("dwh", "dwv", "dwdh", "dwdv"):
        cp = getattr(p, name)
        w = np.zeros(cp.weight.dims)
        w[:, :, (w.shape[2] - 1) // 2, (w.shape[3] - 1) // 2] = 1.0
        cp.weight = Tensor(w)
        cp.bias = Tensor(np.zeros(cp.bias.dims))


def unit_attention(p: LskaParams):
    p.pw.weight = Tensor(np.zeros(p.pw.weight.dims))
    p.pw.bias = Tensor(np.ones(p.pw.bias.dims))


class TestLska:
    def test_impulse_and_unit_attention_is_identity(self):
        # odd-span configuration: local 5, dilated 3 at dilation 3
        p = _lska(3, 9, 3, F64)
        impulse_kernels(p)
        unit_attention(p)
        x = rand_tensor(np.random.default_rng(0), (2, 3, 7, 9))
        assert np.array_equal(lska_forward(x, p).data, x.data)

    def test_zero_input_gives_zero_output(self):
        p = _lska(2, 11, 3, F64)
        randomize_record(p, "lska", np.random.default_rng(1))
        out = lska_forward(Tensor(np.zeros((1, 2, 6, 6))), p)
        assert np.all(out.data == 0.0)

    def test_d1_cascade_equals_composed_2d_kernel(self):
        rng = np.random.default_rng(2)
        C = 3
        p = _lska(C, 5, 1, F64)  # local pair degenerates to 1x1
        for name in ("dwh", "dwv", "dwdh", "dwdv"):
            cp = getattr(p, name)
            cp.weight = rand_tensor(rng, cp.weight.dims)
            cp.bias = Tensor(np.zeros(cp.bias.dims))
        eye = np.zeros(p.pw.weight.dims)
        for c in range(C):
            eye[c, c, 0, 0] = 1.0
        p.pw.weight = Tensor(eye)
        p.pw.bias = Tensor(np.zeros(p.pw.bias.dims))
        x = rand_tensor(rng, (1, C, 9, 9))
        attn = lska_attention(x, p)
        K = reference.compose_1d_kernels(p.dwh.weight.data, p.dwv.weight.data,
                                         p.dwdh.weight.data, p.dwdv.weight.data)
        ref = reference.naive_conv2d(x.data, K, None, (1, 1),
                                     ((K.shape[2] - 1) // 2, (K.shape[3] - 1) // 2),
                                     (1, 1), C)
        assert rel_err(attn.data, ref) <= 1e-6

    def test_preserves_dims(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            C = int(rng.integers(1, 4))
            h, w = int(rng.integers(3, 9)), int(rng.integers(3, 9))
            p = _lska(C, 11, 3, F64)
            randomize_record(p, "lska", rng)
            x = rand_tensor(rng, (1, C, h, w))
            assert lska_forward(x, p).dims == x.dims

    def test_channel_mismatch(self):
        p = _lska(3, 11, 3, F64)
        with pytest.raises(ShapeError, match="channels"):
            lska_forward(Tensor(np.zeros((1, 2, 4, 4))), p)

    def test_spatial_weight_count_below_dense_kernel(self):
        # the separable cascade must beat a dense k x k depthwise kernel
        C, k, d = 8, 11, 3
        p = _lska(C, k, d, F64)
        assert p.spatial_weight_count() == C * (2 * (2 * d - 1) + 2 * int(np.ceil(k / d)))
        assert p.spatial_weight_count() < C * k * k

    def test_receptive_field_covers_k(self):
        for k, d in [(11, 3), (9, 3), (7, 2), (23, 3)]:
            local, dilated = lska_kernel_sizes(k, d)
            rf = local + (d * (dilated - 1) + 1) - 1
            assert rf >= k


class TestSpm:
    def _random_spm(self, C, rng):
        p = _spm(C, KernelConfig(), F64)
        randomize_record(p, "spm", rng)
        return p

    def test_unit_attention_equals_pool_aggregation_bit_exact(self):
        rng = np.random.default_rng(4)
        C = 3
        p = self._random_spm(C, rng)
        for name in ("lska1", "lska2", "lska3"):
            unit_attention(getattr(p, name))
        x = rand_tensor(rng, (1, C, 6, 7))
        got = spm_forward(x, p)
        y0 = p.entry(x)
        y1 = max_pool(y0, 5, 1, 2)
        y2 = max_pool(y1, 5, 1, 2)
        y3 = max_pool(y2, 5, 1, 2)
        baseline = p.fuse(concat_channels([y0, y1, y2, y3]))
        assert got.data.tobytes() == baseline.data.tobytes()

    def test_constant_input_stays_spatially_constant(self):
        rng = np.random.default_rng(5)
        p = self._random_spm(2, rng)
        for name in ("lska1", "lska2", "lska3"):
            unit_attention(getattr(p, name))
        out = spm_forward(Tensor(np.full((1, 2, 5, 5), 0.7)), p)
        for c in range(2):
            assert np.ptp(out.data[0, c]) == 0.0

    def test_preserves_dims_on_random_shapes(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            C = int(rng.integers(1, 4))
            h, w = int(rng.integers(2, 10)), int(rng.integers(2, 10))
            p = self._random_spm(C, rng)
            x = rand_tensor(rng, (1, C, h, w))
            assert spm_forward(x, p).dims == x.dims

    def test_pool_stages_preserve_spatial_dims(self):
        rng = np.random.default_rng(7)
        x = rand_tensor(rng, (1, 2, 4, 6))
        assert max_pool(x, SpmParams.POOL_WINDOW, 1, SpmParams.POOL_PAD).dims == x.dims
