"""Parameter records and shared layer helpers built on the tensor primitives.

A ConvParam bundles one convolution's weights with its geometry; a ConvBlock
is the standard conv -> per-channel affine -> activation unit used all over
the network (inference-style affine, no batch statistics).  Parameter records
nest into dataclasses; ``named_tensors`` flattens any record tree into
dot-path names, which is also the naming scheme of the weight file.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator, Optional

from .tensor import (ConvSpec, Tensor, activation, add, broadcast_expand,
                     conv2d, hadamard, pad2d)


def same_pad_1d(k: int, d: int = 1) -> tuple[int, int]:
    """(before, after) zero padding that keeps a stride-1 axis length fixed."""
    span = d * (k - 1) + 1
    before = (span - 1) // 2
    return before, span - 1 - before


@dataclass
class ConvParam:
    """One convolution: weight (outC, inC/groups, kH, kW), optional bias, geometry."""

    weight: Tensor
    bias: Optional[Tensor] = None
    stride: tuple[int, int] = (1, 1)
    dilation: tuple[int, int] = (1, 1)
    groups: int = 1

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.dims[2], self.weight.dims[3]


def conv_same(x: Tensor, p: ConvParam) -> Tensor:
    """Apply a stride-1 convolution with "same" output size.

    Odd effective spans pad symmetrically inside conv2d; even spans (a
    dilated kernel of even extent) pre-pad asymmetrically.
    """
    kh, kw = p.kernel
    dh, dw = p.dilation
    (pt, pb) = same_pad_1d(kh, dh)
    (pl, pr) = same_pad_1d(kw, dw)
    y = x
    if pt != pb or pl != pr:
        y = pad2d(y, (pt, pb, pl, pr))
        pt = pb = pl = pr = 0
    spec = ConvSpec(kernel=(kh, kw), stride=(1, 1), padding=(pt, pl),
                    dilation=(dh, dw), groups=p.groups, has_bias=p.bias is not None)
    return conv2d(y, p.weight, p.bias, spec)


def conv_apply(x: Tensor, p: ConvParam, padding: tuple[int, int]) -> Tensor:
    """Apply a convolution with explicit symmetric padding (used by strided convs)."""
    spec = ConvSpec(kernel=p.kernel, stride=p.stride, padding=padding,
                    dilation=p.dilation, groups=p.groups, has_bias=p.bias is not None)
    return conv2d(x, p.weight, p.bias, spec)


@dataclass
class ConvBlock:
    """conv -> per-channel affine -> activation ("silu", "gelu", or "none")."""

    conv: ConvParam
    scale: Tensor   # 1xCx1x1
    shift: Tensor   # 1xCx1x1
    act: str = "silu"

    def __call__(self, x: Tensor) -> Tensor:
        if self.conv.stride != (1, 1):
            kh, kw = self.conv.kernel
            y = conv_apply(x, self.conv, (kh // 2, kw // 2))
        else:
            y = conv_same(x, self.conv)
        y = channel_affine(y, self.scale, self.shift)
        if self.act != "none":
            y = activation(y, self.act)
        return y


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """y = x * scale + shift with 1xCx1x1 scale/shift broadcast over N, H, W."""
    s = broadcast_expand(scale, x.dims)
    b = broadcast_expand(shift, x.dims)
    return add(hadamard(x, s), b)


def named_tensors(record, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield (dot-path name, tensor) for every Tensor field reachable from a record."""
    if isinstance(record, Tensor):
        yield prefix, record
        return
    if dataclasses.is_dataclass(record):
        for f in dataclasses.fields(record):
            value = getattr(record, f.name)
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_tensors(value, name)
        return
    if isinstance(record, (list, tuple)):
        for i, item in enumerate(record):
            yield from named_tensors(item, f"{prefix}{i}")
        return
    # plain config values (ints, strings, floats) carry no tensors


def set_named_tensor(record, name: str, value: Tensor):
    """Replace one Tensor field addressed by its dot-path name."""
    head, _, rest = name.partition(".")
    if dataclasses.is_dataclass(record) and not isinstance(record, Tensor):
        field_names = {f.name for f in dataclasses.fields(record)}
        if head in field_names:
            child = getattr(record, head)
            if isinstance(child, Tensor) and not rest:
                setattr(record, head, value)
                return
            set_named_tensor(child, rest, value)
            return
        # list fields are addressed as <field><index>
        for f in dataclasses.fields(record):
            if head.startswith(f.name) and head[len(f.name):].isdigit():
                idx = int(head[len(f.name):])
                set_named_tensor(getattr(record, f.name)[idx], rest, value)
                return
    raise KeyError(f"no tensor field {name!r} in {type(record).__name__}")
