"""Large separable kernel attention and the multi-scale shape perception block.

LSKA approximates one large 2-D depthwise kernel by four cascaded 1-D
depthwise convolutions (a local horizontal/vertical pair, then a dilated
pair), finishing with a pointwise conv; the result is an attention map
multiplied into the input.  The shape perception module (SPM) wraps a
three-stage stride-1 max-pool aggregation block and applies LSKA after each
pool stage before fusing the four streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .layers import ConvBlock, ConvParam, conv_same
from .tensor import ShapeError, Tensor, concat_channels, hadamard, max_pool


def lska_kernel_sizes(k: int, d: int) -> tuple[int, int]:
    """(local, dilated) 1-D kernel extents for receptive field k at dilation d."""
    return 2 * d - 1, math.ceil(k / d)


@dataclass
class LskaParams:
    """Four 1-D depthwise kernels plus the pointwise mixer.

    ``dwh``/``dwv`` are the local 1x(2d-1) and (2d-1)x1 pair; ``dwdh``/``dwdv``
    the dilated 1xceil(k/d) and ceil(k/d)x1 pair at dilation d; ``pw`` the
    1x1 cross-channel conv producing the attention map.
    """

    channels: int
    k: int
    d: int
    dwh: ConvParam
    dwv: ConvParam
    dwdh: ConvParam
    dwdv: ConvParam
    pw: ConvParam

    def spatial_weight_count(self) -> int:
        local, dilated = lska_kernel_sizes(self.k, self.d)
        return self.channels * (2 * local + 2 * dilated)


def lska_attention(x: Tensor, p: LskaParams) -> Tensor:
    """The 1-D cascade plus pointwise conv, before multiplying into the input."""
    if x.dims[1] != p.channels:
        raise ShapeError(f"lska expects {p.channels} channels, got {x.dims[1]}")
    a = conv_same(x, p.dwh)
    a = conv_same(a, p.dwv)
    a = conv_same(a, p.dwdh)
    a = conv_same(a, p.dwdv)
    return conv_same(a, p.pw)


def lska_forward(x: Tensor, p: LskaParams) -> Tensor:
    """x weighted by its large-receptive-field attention map; dims preserved."""
    return hadamard(x, lska_attention(x, p))


@dataclass
class SpmParams:
    """Entry 1x1 block, three 5x5 stride-1 max-pool stages each followed by
    its own LSKA instance, and a 1x1 block fusing the 4-way concat."""

    entry: ConvBlock
    lska1: LskaParams
    lska2: LskaParams
    lska3: LskaParams
    fuse: ConvBlock

    POOL_WINDOW = 5
    POOL_PAD = 2


def spm_forward(x: Tensor, p: SpmParams) -> Tensor:
    y0 = p.entry(x)
    y1 = lska_forward(max_pool(y0, SpmParams.POOL_WINDOW, 1, SpmParams.POOL_PAD), p.lska1)
    y2 = lska_forward(max_pool(y1, SpmParams.POOL_WINDOW, 1, SpmParams.POOL_PAD), p.lska2)
    y3 = lska_forward(max_pool(y2, SpmParams.POOL_WINDOW, 1, SpmParams.POOL_PAD), p.lska3)
    return p.fuse(concat_channels([y0, y1, y2, y3]))
