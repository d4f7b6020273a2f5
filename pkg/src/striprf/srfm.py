"""Strip receptive field module, its residual sub-block, and the C3k2 composite.

The core module runs three branches over a depthwise-filtered input: a strip
feature extraction branch (horizontal then vertical large strip convs feeding
a pointwise attention map that gates the raw input), and two strip pooling
branches that collapse the horizontal feature over H and the vertical feature
over W, refine each with a small strip conv, re-expand, and add back through
a ReLU.  All strip convolutions are depthwise; cross-channel mixing happens
only in the pointwise conv.
"""

from __future__ import annotations

from dataclasses import dataclass

from .layers import ConvBlock, ConvParam, conv_same
from .tensor import (ShapeError, Tensor, activation, add, avg_pool,
                     broadcast_expand, concat_channels, hadamard, relu,
                     slice_channels)


@dataclass
class SrfmParams:
    """Kernels of the strip receptive field module, all channel-preserving.

    dw: depthwise k x k; convh / convv: depthwise 1 x kH and kV x 1 large
    strips; pw: 1x1 cross-channel mixer; smallh / smallv: depthwise 1 x k'H
    and k'V x 1 strips applied to the pooled rows / columns.
    """

    dw: ConvParam
    convh: ConvParam
    convv: ConvParam
    pw: ConvParam
    smallh: ConvParam
    smallv: ConvParam

    def __post_init__(self):
        for name in ("dw", "convh", "convv", "smallh", "smallv"):
            kh, kw = getattr(self, name).kernel
            if kh % 2 == 0 or kw % 2 == 0:
                raise ShapeError(f"srfm kernel {name} must have odd extents, got {(kh, kw)}")
        for name in ("convh", "smallh"):
            if getattr(self, name).kernel[0] != 1:
                raise ShapeError(f"{name} must be a horizontal strip (1 x k)")
        for name in ("convv", "smallv"):
            if getattr(self, name).kernel[1] != 1:
                raise ShapeError(f"{name} must be a vertical strip (k x 1)")


def srfm_forward(x: Tensor, p: SrfmParams) -> Tensor:
    """Three-branch strip module; input and output are both (N, C, H, W)."""
    n, c, h, w = x.dims
    if p.dw.weight.dims[0] != c:
        raise ShapeError(f"srfm expects {p.dw.weight.dims[0]} channels, got {c}")
    fsq = conv_same(x, p.dw)
    fh = conv_same(fsq, p.convh)
    fv = conv_same(fsq, p.convv)
    y = conv_same(fv, p.pw)
    gated = hadamard(x, y)
    ph = avg_pool(fh, (h, 1), 1)        # (N, C, 1, W)
    pv = avg_pool(fv, (1, w), 1)        # (N, C, H, 1)
    fph = conv_same(ph, p.smallh)
    fpv = conv_same(pv, p.smallv)
    z = relu(add(broadcast_expand(fph, x.dims), broadcast_expand(fpv, x.dims)))
    return add(gated, z)


@dataclass
class SrfmSubBlock:
    """conv -> GeLU -> strip module -> conv, with an identity skip.

    The pre/post conv blocks are linear (affine only); the one activation
    between them is the GeLU.
    """

    pre: ConvBlock
    srfm: SrfmParams
    post: ConvBlock


def srfm_subblock_forward(x: Tensor, b: SrfmSubBlock) -> Tensor:
    y = activation(b.pre(x), "gelu")
    y = b.post(srfm_forward(y, b.srfm))
    return add(x, y)


@dataclass
class C3k2SrfmParams:
    """C3k2 wiring with strip sub-blocks in place of bottlenecks.

    ``cv_split`` widens the input to two branch halves; ``m`` holds the chain
    of sub-blocks applied to the second half; ``cv_merge`` fuses the bypass
    half and the processed half down to the block width.
    """

    cv_split: ConvBlock
    m: list[SrfmSubBlock]
    cv_merge: ConvBlock


def c3k2_srfm_forward(x: Tensor, p: C3k2SrfmParams) -> Tensor:
    y = p.cv_split(x)
    half = y.dims[1] // 2
    bypass = slice_channels(y, 0, half)
    branch = slice_channels(y, half, y.dims[1])
    for sub in p.m:
        branch = srfm_subblock_forward(branch, sub)
    return p.cv_merge(concat_channels([bypass, branch]))
