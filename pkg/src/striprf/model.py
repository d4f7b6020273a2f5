"""Assembly of the four-head detection graph.

Backbone stages emit P2..P5 at strides 4/8/16/32, with the shape perception
block at the tail of P5.  A top-down pathway upsamples (DySample by default)
and fuses into F4/F3/F2; a bottom-up pathway downsamples back through
T3/T4/T5.  T2 = F2 feeds both the stride-4 head and the downsample path.
Each head emits num_classes + 4 raw channels per cell (class logits and
l/t/r/b distances in stride units).

The graph is a flat, topologically ordered node list over named parameter
records; ``init_params`` draws every tensor from a counter-based generator
keyed by parameter name, so initialization does not depend on traversal
order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .blocks import LskaParams, SpmParams, lska_kernel_sizes, spm_forward
from .layers import ConvBlock, ConvParam, conv_same, named_tensors, set_named_tensor
from .srfm import C3k2SrfmParams, SrfmParams, SrfmSubBlock, c3k2_srfm_forward
from .tensor import (ConvSpec, ShapeError, Tensor, add, concat_channels,
                     conv2d, grid_sample_bilinear, pixel_shuffle, scale,
                     upsample_nearest)


class ConfigError(ValueError):
    """Model configuration violates an invariant."""


class WeightMismatchError(ValueError):
    """A weight store does not exactly cover the graph's parameters."""


@dataclass
class KernelConfig:
    k: int = 5          # depthwise square kernel
    kh: int = 11        # horizontal large strip
    kv: int = 11        # vertical large strip
    ksmall: int = 3     # small strips on pooled maps
    lska_k: int = 11    # attention receptive field
    lska_d: int = 3     # attention dilation


@dataclass
class ModelConfig:
    num_classes: int = 4
    base_width: int = 16
    depth: int = 1
    kernels: KernelConfig = field(default_factory=KernelConfig)
    input_size: int = 640
    seed: int = 0
    use_p2: bool = True
    use_dysample: bool = True

    def validate(self):
        problems = []
        if self.input_size % 32 != 0:
            problems.append(f"input_size {self.input_size} not divisible by 32")
        if self.base_width < 4:
            problems.append(f"base_width {self.base_width} < 4")
        if self.num_classes < 1:
            problems.append(f"num_classes {self.num_classes} < 1")
        if self.depth < 0:
            problems.append(f"depth {self.depth} < 0")
        kc = self.kernels
        for name in ("k", "kh", "kv", "ksmall", "lska_k"):
            v = getattr(kc, name)
            if v < 1 or v % 2 == 0:
                problems.append(f"kernel {name}={v} must be odd and positive")
        if kc.lska_d < 1:
            problems.append(f"lska_d {kc.lska_d} < 1")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "base_width": self.base_width,
            "depth": self.depth,
            "kernels": {"k": self.kernels.k, "kh": self.kernels.kh, "kv": self.kernels.kv,
                        "ksmall": self.kernels.ksmall, "lska_k": self.kernels.lska_k,
                        "lska_d": self.kernels.lska_d},
            "input_size": self.input_size,
            "seed": self.seed,
            "use_p2": self.use_p2,
            "use_dysample": self.use_dysample,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kc = KernelConfig(**d.get("kernels", {}))
        kwargs = {k: v for k, v in d.items() if k != "kernels"}
        cfg = cls(kernels=kc, **kwargs)
        cfg.validate()
        return cfg


@dataclass
class DySampleParams:
    """Pointwise offset generator (2*s*s channels) plus a static scope factor."""

    offsets: ConvParam
    factor: int
    scope: float = 0.25


@dataclass
class HeadParams:
    block: ConvBlock
    out: ConvParam


@dataclass
class Node:
    id: int
    kind: str
    name: str
    inputs: tuple[int, ...]
    params: object = None


@dataclass
class ModelGraph:
    cfg: ModelConfig
    nodes: list[Node]
    head_ids: tuple[int, ...]
    strides: tuple[int, ...]
    _bound_store: Optional[dict] = field(default=None, repr=False, compare=False)


# ---------------------------------------------------------------------------
# parameter factories (shapes only; values come from init_params)

def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype))


def _conv(out_c, in_c, kernel, groups=1, stride=(1, 1), dilation=(1, 1),
          bias=True, dtype=np.float32) -> ConvParam:
    kh, kw = kernel
    w = _zeros((out_c, in_c // groups, kh, kw), dtype)
    b = _zeros((1, out_c, 1, 1), dtype) if bias else None
    return ConvParam(weight=w, bias=b, stride=stride, dilation=dilation, groups=groups)


def _conv_block(out_c, in_c, k=1, stride=1, act="silu", dtype=np.float32) -> ConvBlock:
    return ConvBlock(conv=_conv(out_c, in_c, (k, k), stride=(stride, stride),
                                bias=False, dtype=dtype),
                     scale=_zeros((1, out_c, 1, 1), dtype),
                     shift=_zeros((1, out_c, 1, 1), dtype),
                     act=act)


def _lska(channels, k, d, dtype) -> LskaParams:
    local, dilated = lska_kernel_sizes(k, d)
    return LskaParams(
        channels=channels, k=k, d=d,
        dwh=_conv(channels, channels, (1, local), groups=channels, dtype=dtype),
        dwv=_conv(channels, channels, (local, 1), groups=channels, dtype=dtype),
        dwdh=_conv(channels, channels, (1, dilated), groups=channels,
                   dilation=(1, d), dtype=dtype),
        dwdv=_conv(channels, channels, (dilated, 1), groups=channels,
                   dilation=(d, 1), dtype=dtype),
        pw=_conv(channels, channels, (1, 1), dtype=dtype),
    )


def _srfm(channels, kc: KernelConfig, dtype) -> SrfmParams:
    return SrfmParams(
        dw=_conv(channels, channels, (kc.k, kc.k), groups=channels, dtype=dtype),
        convh=_conv(channels, channels, (1, kc.kh), groups=channels, dtype=dtype),
        convv=_conv(channels, channels, (kc.kv, 1), groups=channels, dtype=dtype),
        pw=_conv(channels, channels, (1, 1), dtype=dtype),
        smallh=_conv(channels, channels, (1, kc.ksmall), groups=channels, dtype=dtype),
        smallv=_conv(channels, channels, (kc.ksmall, 1), groups=channels, dtype=dtype),
    )


def _subblock(channels, kc: KernelConfig, dtype) -> SrfmSubBlock:
    return SrfmSubBlock(pre=_conv_block(channels, channels, k=3, act="none", dtype=dtype),
                        srfm=_srfm(channels, kc, dtype),
                        post=_conv_block(channels, channels, k=3, act="none", dtype=dtype))


def _c3k2(out_c, in_c, n, kc: KernelConfig, dtype) -> C3k2SrfmParams:
    half = out_c // 2
    return C3k2SrfmParams(
        cv_split=_conv_block(2 * half, in_c, k=1, dtype=dtype),
        m=[_subblock(half, kc, dtype) for _ in range(n)],
        cv_merge=_conv_block(out_c, 2 * half, k=1, dtype=dtype),
    )


def _spm(channels, kc: KernelConfig, dtype) -> SpmParams:
    return SpmParams(
        entry=_conv_block(channels, channels, k=1, dtype=dtype),
        lska1=_lska(channels, kc.lska_k, kc.lska_d, dtype),
        lska2=_lska(channels, kc.lska_k, kc.lska_d, dtype),
        lska3=_lska(channels, kc.lska_k, kc.lska_d, dtype),
        fuse=_conv_block(channels, 4 * channels, k=1, dtype=dtype),
    )


def _dysample(channels, s, dtype) -> DySampleParams:
    return DySampleParams(offsets=_conv(2 * s * s, channels, (1, 1), dtype=dtype), factor=s)


def _head(channels, num_classes, dtype) -> HeadParams:
    return HeadParams(block=_conv_block(channels, channels, k=3, dtype=dtype),
                      out=_conv(num_classes + 4, channels, (1, 1), dtype=dtype))


# ---------------------------------------------------------------------------
# graph construction

def build_model(cfg: ModelConfig, dtype=np.float32) -> ModelGraph:
    """Assemble the node list for a config; parameters start zeroed."""
    cfg.validate()
    kc = cfg.kernels
    w = cfg.base_width
    n = cfg.depth
    nodes: list[Node] = []

    def emit(kind, name, params, *inputs) -> int:
        node = Node(id=len(nodes), kind=kind, name=name, inputs=tuple(inputs), params=params)
        nodes.append(node)
        return node.id

    def up(name, channels, src) -> int:
        if cfg.use_dysample:
            return emit("dysample", name, _dysample(channels, 2, dtype), src)
        return emit("upsample2", name, None, src)

    x0 = emit("input", "input", None)
    stem = emit("conv_block", "stem", _conv_block(w // 2, 3, k=3, stride=2, dtype=dtype), x0)
    d2 = emit("conv_block", "b2.down", _conv_block(w, w // 2, k=3, stride=2, dtype=dtype), stem)
    p2 = emit("c3k2", "b2.blk", _c3k2(w, w, n, kc, dtype), d2)
    d3 = emit("conv_block", "b3.down", _conv_block(2 * w, w, k=3, stride=2, dtype=dtype), p2)
    p3 = emit("c3k2", "b3.blk", _c3k2(2 * w, 2 * w, n, kc, dtype), d3)
    d4 = emit("conv_block", "b4.down", _conv_block(4 * w, 2 * w, k=3, stride=2, dtype=dtype), p3)
    p4 = emit("c3k2", "b4.blk", _c3k2(4 * w, 4 * w, n, kc, dtype), d4)
    d5 = emit("conv_block", "b5.down", _conv_block(8 * w, 4 * w, k=3, stride=2, dtype=dtype), p4)
    p5 = emit("c3k2", "b5.blk", _c3k2(8 * w, 8 * w, n, kc, dtype), d5)
    f5 = emit("spm", "spm", _spm(8 * w, kc, dtype), p5)

    u5 = up("fpn.up5", 8 * w, f5)
    c5 = emit("concat", "fpn.cat5", None, u5, p4)
    f4 = emit("c3k2", "fpn.f4", _c3k2(4 * w, 12 * w, n, kc, dtype), c5)
    u4 = up("fpn.up4", 4 * w, f4)
    c4 = emit("concat", "fpn.cat4", None, u4, p3)
    f3 = emit("c3k2", "fpn.f3", _c3k2(2 * w, 6 * w, n, kc, dtype), c4)

    if cfg.use_p2:
        u3 = up("fpn.up3", 2 * w, f3)
        c3 = emit("concat", "fpn.cat3", None, u3, p2)
        f2 = emit("c3k2", "fpn.f2", _c3k2(w, 3 * w, n, kc, dtype), c3)
        dn2 = emit("conv_block", "pan.down2", _conv_block(w, w, k=3, stride=2, dtype=dtype), f2)
        pc3 = emit("concat", "pan.cat3", None, dn2, f3)
        t3 = emit("c3k2", "pan.t3", _c3k2(2 * w, 3 * w, n, kc, dtype), pc3)
    else:
        t3 = f3
    dn3 = emit("conv_block", "pan.down3", _conv_block(2 * w, 2 * w, k=3, stride=2, dtype=dtype), t3)
    pc4 = emit("concat", "pan.cat4", None, dn3, f4)
    t4 = emit("c3k2", "pan.t4", _c3k2(4 * w, 6 * w, n, kc, dtype), pc4)
    dn4 = emit("conv_block", "pan.down4", _conv_block(4 * w, 4 * w, k=3, stride=2, dtype=dtype), t4)
    pc5 = emit("concat", "pan.cat5", None, dn4, f5)
    t5 = emit("c3k2", "pan.t5", _c3k2(8 * w, 12 * w, n, kc, dtype), pc5)

    heads = []
    strides = []
    if cfg.use_p2:
        heads.append(emit("head", "head.p2", _head(w, cfg.num_classes, dtype), f2))
        strides.append(4)
    heads.append(emit("head", "head.p3", _head(2 * w, cfg.num_classes, dtype), t3))
    heads.append(emit("head", "head.p4", _head(4 * w, cfg.num_classes, dtype), t4))
    heads.append(emit("head", "head.p5", _head(8 * w, cfg.num_classes, dtype), t5))
    strides += [8, 16, 32]

    return ModelGraph(cfg=cfg, nodes=nodes, head_ids=tuple(heads), strides=tuple(strides))


def named_params(graph: ModelGraph):
    """Yield (dot-path name, tensor) for every parameter in node order."""
    for node in graph.nodes:
        if node.params is not None:
            yield from named_tensors(node.params, node.name)


def param_store(graph: ModelGraph) -> dict[str, Tensor]:
    return dict(named_params(graph))


# ---------------------------------------------------------------------------
# initialization

def _name_rng(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=16).digest()
    key = tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def init_params(graph: ModelGraph, seed: Optional[int] = None, dtype=np.float32) -> dict[str, Tensor]:
    """Fill every parameter: fan-in-scaled uniform weights, zero biases,
    unit affine scales.  Keyed per name, so the draw for one parameter never
    depends on any other."""
    if seed is None:
        seed = graph.cfg.seed
    store: dict[str, Tensor] = {}
    for node in graph.nodes:
        if node.params is None:
            continue
        for name, t in named_tensors(node.params, node.name):
            shape = t.dims
            if name.endswith(".weight"):
                fan_in = shape[1] * shape[2] * shape[3]
                bound = float(np.sqrt(1.0 / fan_in))
                vals = _name_rng(seed, name).uniform(-bound, bound, size=shape)
                fresh = Tensor(vals.astype(dtype))
            elif name.endswith(".scale"):
                fresh = Tensor(np.ones(shape, dtype=dtype))
            else:  # biases and shifts
                fresh = Tensor(np.zeros(shape, dtype=dtype))
            set_named_tensor(node.params, name[len(node.name) + 1:], fresh)
            store[name] = fresh
    graph._bound_store = store
    return store


def bind_params(graph: ModelGraph, store: dict[str, Tensor]):
    """Attach a parameter store to the graph; names must cover exactly."""
    if graph._bound_store is store:
        return
    owners = {}
    for node in graph.nodes:
        if node.params is None:
            continue
        for name, t in named_tensors(node.params, node.name):
            owners[name] = (node, name[len(node.name) + 1:], t.dims)
    missing = sorted(set(owners) - set(store))
    extra = sorted(set(store) - set(owners))
    if missing or extra:
        raise WeightMismatchError(
            f"weight store mismatch: missing={missing[:8]}{'...' if len(missing) > 8 else ''} "
            f"extra={extra[:8]}{'...' if len(extra) > 8 else ''}")
    for name, tensor in store.items():
        node, sub, dims = owners[name]
        if tensor.dims != dims:
            raise WeightMismatchError(f"{name}: stored dims {tensor.dims} != expected {dims}")
        set_named_tensor(node.params, sub, tensor)
    graph._bound_store = store


# ---------------------------------------------------------------------------
# forward

def dysample_forward(x: Tensor, p: DySampleParams, s: Optional[int] = None) -> Tensor:
    """Content-aware upsampling: learned offsets perturb a regular bilinear grid."""
    s = p.factor if s is None else s
    if s < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {s}")
    spec = ConvSpec((1, 1), has_bias=p.offsets.bias is not None)
    raw = conv2d(x, p.offsets.weight, p.offsets.bias, spec)   # (N, 2*s*s, H, W)
    off = scale(pixel_shuffle(raw, s), p.scope)               # (N, 2, H*s, W*s)
    n, _, ho, wo = off.dims
    base = np.empty((n, 2, ho, wo), dtype=x.data.dtype)
    base[:, 0] = ((np.arange(ho) + 0.5) / s - 0.5)[:, None]
    base[:, 1] = ((np.arange(wo) + 0.5) / s - 0.5)[None, :]
    coords = add(off, Tensor(base))
    return grid_sample_bilinear(x, coords)


def head_forward(x: Tensor, p: HeadParams) -> Tensor:
    return conv_same(p.block(x), p.out)


def forward(graph: ModelGraph, params: dict[str, Tensor], image: Tensor) -> tuple[Tensor, ...]:
    """Run the graph on a batch of images; returns one raw map per head."""
    cfg = graph.cfg
    if image.dims[1] != 3:
        raise ShapeError(f"expected 3 input channels, got {image.dims[1]}")
    if image.dims[2] != cfg.input_size or image.dims[3] != cfg.input_size:
        raise ShapeError(
            f"input spatial dims {image.dims[2]}x{image.dims[3]} != configured {cfg.input_size}")
    bind_params(graph, params)
    values: dict[int, Tensor] = {}
    for node in graph.nodes:
        if node.kind == "input":
            values[node.id] = image
        elif node.kind == "conv_block":
            values[node.id] = node.params(values[node.inputs[0]])
        elif node.kind == "c3k2":
            values[node.id] = c3k2_srfm_forward(values[node.inputs[0]], node.params)
        elif node.kind == "spm":
            values[node.id] = spm_forward(values[node.inputs[0]], node.params)
        elif node.kind == "dysample":
            values[node.id] = dysample_forward(values[node.inputs[0]], node.params)
        elif node.kind == "upsample2":
            values[node.id] = upsample_nearest(values[node.inputs[0]], 2)
        elif node.kind == "concat":
            values[node.id] = concat_channels([values[i] for i in node.inputs])
        elif node.kind == "head":
            values[node.id] = head_forward(values[node.inputs[0]], node.params)
        else:
            raise ValueError(f"unknown node kind {node.kind!r}")
    return tuple(values[i] for i in graph.head_ids)
