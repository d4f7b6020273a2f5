"""Shared utilities for the test suite."""

import numpy as np

from striprf.layers import named_tensors, set_named_tensor
from striprf.tensor import Tensor


def rand_tensor(rng, shape, dtype=np.float64):
    return Tensor(rng.standard_normal(shape).astype(dtype))


def signed_tensor(rng, shape, lo=0.3, hi=1.0, dtype=np.float64):
    """Values with |v| in [lo, hi): keeps finite differences away from kinks."""
    mag = rng.uniform(lo, hi, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return Tensor((mag * sign).astype(dtype))


def randomize_record(record, prefix, rng, weight_scale=0.4):
    """Fill every tensor slot of a parameter record with random values."""
    for name, t in named_tensors(record, prefix):
        if name.endswith(".scale"):
            fresh = Tensor(rng.uniform(0.5, 1.2, size=t.dims))
        elif name.endswith(".weight"):
            fresh = signed_tensor(rng, t.dims, lo=0.05, hi=weight_scale)
        else:
            fresh = signed_tensor(rng, t.dims, lo=0.0, hi=0.2)
        set_named_tensor(record, name[len(prefix) + 1:], fresh)


def rel_err(got, want):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = max(float(np.abs(want).max()), 1e-12)
    return float(np.abs(got - want).max()) / denom
