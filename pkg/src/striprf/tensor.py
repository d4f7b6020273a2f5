"""Dense 4-D tensors, differentiable primitives, and a reverse-mode tape.

Every value is a rank-4 (N, C, H, W) buffer; lower-rank quantities are
embedded (a per-channel bias is 1xCx1x1, a scalar is 1x1x1x1).  Forward ops
are pure functions over immutable buffers.  When a Tape is active, ops that
touch a grad-requiring tensor record a vector-Jacobian product so a later
``backward`` can accumulate gradients in reverse order.

No BLAS is ever invoked (contractions go through ``np.einsum`` with
``optimize=False``), so results are bit-identical regardless of how many
threads the host math library was configured with.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand dimensions are inconsistent for the requested operation."""


class Tensor:
    """Immutable rank-4 value carrier.

    ``data`` is a read-only contiguous ndarray of shape (N, C, H, W) and
    dtype float32 or float64.  ``grad`` is populated by ``backward`` and is
    the only mutable slot.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.dtype(np.float32), np.dtype(np.float64)) else np.float32
        arr = np.ascontiguousarray(arr, dtype=dtype)
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be rank 4 (N, C, H, W), got rank {arr.ndim}")
        if arr is data and arr.flags.writeable:
            arr = arr.copy()  # never share a caller-mutable buffer
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got dims {self.dims}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def _wrap(arr: np.ndarray) -> Tensor:
    """Adopt a freshly computed buffer as an immutable Tensor without copying."""
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    t = object.__new__(Tensor)
    t.data = arr
    t.requires_grad = False
    t.grad = None
    return t


def _check_same_dtype(*tensors: Tensor):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"mixed dtypes {sorted(str(d) for d in dtypes)}; cast explicitly")


# ---------------------------------------------------------------------------
# gradient tape

_tls = threading.local()


class Tape:
    """Ordered record of primitive applications for reverse-mode replay.

    Single-writer: one forward/backward pass per tape at a time.  Use as a
    context manager; ops executed inside record themselves when any operand
    requires gradients.
    """

    def __init__(self):
        self.entries: list[tuple] = []

    def __enter__(self) -> "Tape":
        if getattr(_tls, "tape", None) is not None:
            raise RuntimeError("a Tape is already active in this thread")
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.tape = None
        return False


def _active_tape() -> Optional[Tape]:
    return getattr(_tls, "tape", None)


def record_op(out: Tensor, inputs: Sequence[Tensor],
              vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
    """Append one primitive application to the active tape.

    ``vjp(grad_out)`` must return one cotangent per entry of ``inputs``
    (None for inputs that do not require gradients).
    """
    tape = _active_tape()
    if tape is None:
        return
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.entries.append((out, tuple(inputs), vjp))


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor] = ()):
    """Reverse-accumulate gradients of a scalar ``loss`` over ``tape``.

    Writes ``t.grad`` for every grad-requiring tensor reached from the loss;
    tensors listed in ``params`` that the loss does not depend on get a zero
    gradient.  Replay order is the exact reverse of the recorded forward
    order, so gradients are bit-reproducible.
    """
    if loss.dims != (1, 1, 1, 1):
        raise ShapeError(f"backward needs a scalar (1,1,1,1) output, got dims {loss.dims}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1, 1, 1), dtype=loss.dtype)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, vjp in reversed(tape.entries):
        g = grads.pop(id(out), None)
        holders.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.data.shape:
                raise ShapeError(f"vjp produced shape {gi.shape} for input dims {t.dims}")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                holders[key] = t
    for key, t in holders.items():
        t.grad = grads[key]
    for p in params:
        if id(p) not in holders:
            p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# convolution

@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-D cross-correlation."""

    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    dilation: tuple[int, int] = (1, 1)
    groups: int = 1
    has_bias: bool = False


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def conv_spec(kernel, stride=1, padding=0, dilation=1, groups=1, has_bias=False) -> ConvSpec:
    """ConvSpec builder accepting ints where pairs are symmetric."""
    return ConvSpec(_pair(kernel), _pair(stride), _pair(padding), _pair(dilation),
                    int(groups), bool(has_bias))


def conv_out_size(size: int, k: int, s: int, p: int, d: int) -> int:
    return (size + 2 * p - d * (k - 1) - 1) // s + 1


def _windows(xp: np.ndarray, kh, kw, sh, sw, dh, dw) -> np.ndarray:
    """(N, C, Ho, Wo, kh, kw) strided view over a padded buffer."""
    span_h = dh * (kh - 1) + 1
    span_w = dw * (kw - 1) + 1
    v = sliding_window_view(xp, (span_h, span_w), axis=(2, 3))
    return v[:, :, ::sh, ::sw, ::dh, ::dw]


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
    """Grouped, dilated 2-D cross-correlation with zero padding.

    ``weight`` is (outC, inC/groups, kH, kW); ``bias`` is 1xoutCx1x1 or None.
    The per-output reduction order is fixed (input channel, then kernel
    row-major), so results do not depend on parallelism.
    """
    N, C, H, W = x.dims
    outC, cg, kh, kw = weight.dims
    sh, sw = spec.stride
    ph, pw = spec.padding
    dh, dw = spec.dilation
    g = spec.groups
    if (kh, kw) != spec.kernel:
        raise ShapeError(f"weight kernel {(kh, kw)} != spec kernel {spec.kernel}")
    if C % g or outC % g:
        raise ShapeError(f"groups={g} must divide in-channels {C} and out-channels {outC}")
    if cg != C // g:
        raise ShapeError(f"weight in-channel dim {cg} != in-channels/groups {C // g}")
    if spec.has_bias != (bias is not None):
        raise ShapeError(f"spec.has_bias={spec.has_bias} but bias {'missing' if bias is None else 'given'}")
    if bias is not None and bias.dims != (1, outC, 1, 1):
        raise ShapeError(f"bias dims {bias.dims} != (1, {outC}, 1, 1)")
    Ho = conv_out_size(H, kh, sh, ph, dh)
    Wo = conv_out_size(W, kw, sw, pw, dw)
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"non-positive output size ({Ho}, {Wo}) for input {H}x{W} with {spec}")
    _check_same_dtype(*([x, weight] + ([bias] if bias is not None else [])))

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = _windows(xp, kh, kw, sh, sw, dh, dw)  # (N, C, Ho, Wo, kh, kw)
    og = outC // g
    cols_per_group = []
    out = np.empty((N, outC, Ho, Wo), dtype=x.dtype)
    for gi in range(g):
        cols = np.ascontiguousarray(
            win[:, gi * cg:(gi + 1) * cg].transpose(0, 2, 3, 1, 4, 5)
        ).reshape(N, Ho * Wo, cg * kh * kw)
        cols_per_group.append(cols)
        wg = weight.data[gi * og:(gi + 1) * og].reshape(og, cg * kh * kw)
        out[:, gi * og:(gi + 1) * og] = np.einsum(
            "npk,ok->nop", cols, wg, optimize=False
        ).reshape(N, og, Ho, Wo)
    if bias is not None:
        out += bias.data
    result = _wrap(out)

    def vjp(gout: np.ndarray):
        gx = np.zeros_like(xp) if x.requires_grad else None
        gw = np.empty_like(weight.data) if weight.requires_grad else None
        for gi2 in range(g):
            go = np.ascontiguousarray(gout[:, gi2 * og:(gi2 + 1) * og].reshape(N, og, Ho * Wo))
            if gw is not None:
                gw[gi2 * og:(gi2 + 1) * og] = np.einsum(
                    "nop,npk->ok", go, cols_per_group[gi2], optimize=False
                ).reshape(og, cg, kh, kw)
            if gx is not None:
                wg2 = weight.data[gi2 * og:(gi2 + 1) * og].reshape(og, cg * kh * kw)
                gcols = np.einsum("nop,ok->npk", go, wg2, optimize=False)
                gcols = gcols.reshape(N, Ho, Wo, cg, kh, kw).transpose(0, 3, 1, 4, 2, 5)
                hh = (np.arange(Ho) * sh)[:, None] + (np.arange(kh) * dh)[None, :]
                ww = (np.arange(Wo) * sw)[:, None] + (np.arange(kw) * dw)[None, :]
                nn = np.arange(N)[:, None, None, None, None, None]
                cc = np.arange(gi2 * cg, (gi2 + 1) * cg)[None, :, None, None, None, None]
                np.add.at(gx, (nn, cc,
                               hh[None, None, :, :, None, None],
                               ww[None, None, None, None, :, :]), gcols)
        gb = None
        if bias is not None and bias.requires_grad:
            gb = gout.sum(axis=(0, 2, 3)).reshape(1, outC, 1, 1)
        if gx is not None and (ph or pw):
            gx = np.ascontiguousarray(gx[:, :, ph:ph + H, pw:pw + W])
        return [gx, gw] + ([gb] if bias is not None else [])

    record_op(result, [x, weight] + ([bias] if bias is not None else []), vjp)
    return result


# ---------------------------------------------------------------------------
# pooling

def avg_pool(x: Tensor, window, stride) -> Tensor:
    """Mean over each window; no padding, window must fit inside the input."""
    wh, ww = _pair(window)
    sh, sw = _pair(stride)
    N, C, H, W = x.dims
    if wh > H or ww > W:
        raise ShapeError(f"pool window {(wh, ww)} larger than input {H}x{W}")
    win = _windows(x.data, wh, ww, sh, sw, 1, 1)
    out = win.mean(axis=(4, 5), dtype=x.dtype)
    Ho, Wo = out.shape[2], out.shape[3]
    result = _wrap(out)

    def vjp(gout: np.ndarray):
        gx = np.zeros_like(x.data)
        piece = gout * x.dtype.type(1.0 / (wh * ww))
        piece = np.broadcast_to(piece[:, :, :, :, None, None], (N, C, Ho, Wo, wh, ww))
        hh = (np.arange(Ho) * sh)[:, None] + np.arange(wh)[None, :]
        wi = (np.arange(Wo) * sw)[:, None] + np.arange(ww)[None, :]
        nn = np.arange(N)[:, None, None, None, None, None]
        cc = np.arange(C)[None, :, None, None, None, None]
        np.add.at(gx, (nn, cc,
                       hh[None, None, :, None, :, None],
                       wi[None, None, None, :, None, :]), piece)
        return [gx]

    record_op(result, [x], vjp)
    return result


def max_pool(x: Tensor, window, stride, padding=0) -> Tensor:
    """Windowed maximum; padded positions contribute -inf."""
    wh, ww = _pair(window)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    N, C, H, W = x.dims
    if wh > H + 2 * ph or ww > W + 2 * pw:
        raise ShapeError(f"pool window {(wh, ww)} larger than padded input {(H + 2 * ph, W + 2 * pw)}")
    neg = x.dtype.type(-np.inf)
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=neg)
    win = _windows(xp, wh, ww, sh, sw, 1, 1)
    Ho, Wo = win.shape[2], win.shape[3]
    flat = win.reshape(N, C, Ho, Wo, wh * ww)
    arg = flat.argmax(axis=4)  # ties resolve to the first window position, row-major
    out = np.take_along_axis(flat, arg[..., None], axis=4)[..., 0]
    result = _wrap(out)

    def vjp(gout: np.ndarray):
        gxp = np.zeros_like(xp)
        ah, aw = np.unravel_index(arg, (wh, ww))
        hh = (np.arange(Ho) * sh)[None, None, :, None] + ah
        wi = (np.arange(Wo) * sw)[None, None, None, :] + aw
        nn = np.arange(N)[:, None, None, None]
        cc = np.arange(C)[None, :, None, None]
        np.add.at(gxp, (nn, cc, hh, wi), gout)
        if ph or pw:
            return [np.ascontiguousarray(gxp[:, :, ph:ph + H, pw:pw + W])]
        return [gxp]

    record_op(result, [x], vjp)
    return result


# ---------------------------------------------------------------------------
# elementwise

def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise nonlinearity: relu, gelu (tanh approximation), silu, sigmoid."""
    a = x.data
    if kind == "relu":
        out = np.maximum(a, 0)
        deriv = lambda: (a > 0).astype(a.dtype)
    elif kind == "sigmoid":
        s = _sigmoid(a)
        out = s
        deriv = lambda: s * (1.0 - s)
    elif kind == "silu":
        s = _sigmoid(a)
        out = a * s
        deriv = lambda: s * (1.0 + a * (1.0 - s))
    elif kind == "gelu":
        inner = _GELU_C * (a + _GELU_A * a ** 3)
        t = np.tanh(inner)
        out = 0.5 * a * (1.0 + t)
        deriv = lambda: 0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * a * a)
    else:
        raise ValueError(f"unknown activation kind {kind!r}")
    result = _wrap(out)
    record_op(result, [x], lambda g: [g * deriv()])
    return result


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def hadamard(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise product of identically shaped tensors."""
    if x.dims != y.dims:
        raise ShapeError(f"hadamard dims differ: {x.dims} vs {y.dims}")
    _check_same_dtype(x, y)
    result = _wrap(x.data * y.data)
    record_op(result, [x, y], lambda g: [g * y.data, g * x.data])
    return result


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.dims != y.dims:
        raise ShapeError(f"add dims differ: {x.dims} vs {y.dims}")
    _check_same_dtype(x, y)
    result = _wrap(x.data + y.data)
    record_op(result, [x, y], lambda g: [g, g])
    return result


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a python-float constant (dtype preserved)."""
    c = x.dtype.type(factor)
    result = _wrap(x.data * c)
    record_op(result, [x], lambda g: [g * c])
    return result


def broadcast_expand(x: Tensor, target_dims) -> Tensor:
    """Replicate along axes where the source dim is 1; other dims must match."""
    target_dims = tuple(int(v) for v in target_dims)
    axes = []
    for i, (s, t) in enumerate(zip(x.dims, target_dims)):
        if s == t:
            continue
        if s != 1:
            raise ShapeError(f"cannot expand dim {i} from {s} to {t} (source must be 1)")
        axes.append(i)
    result = _wrap(np.broadcast_to(x.data, target_dims).copy())
    record_op(result, [x],
              lambda g: [g.sum(axis=tuple(axes), keepdims=True) if axes else g])
    return result


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Stack along the channel axis in argument order."""
    if not tensors:
        raise ShapeError("concat_channels needs at least one tensor")
    n, _, h, w = tensors[0].dims
    for t in tensors[1:]:
        if (t.dims[0], t.dims[2], t.dims[3]) != (n, h, w):
            raise ShapeError(f"concat_channels N/H/W mismatch: {tensors[0].dims} vs {t.dims}")
    _check_same_dtype(*tensors)
    sizes = [t.dims[1] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    result = _wrap(np.concatenate([t.data for t in tensors], axis=1))

    def vjp(g):
        return [np.ascontiguousarray(g[:, offsets[i]:offsets[i + 1]]) for i in range(len(sizes))]

    record_op(result, list(tensors), vjp)
    return result


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channel slice [start, stop)."""
    N, C, H, W = x.dims
    if not (0 <= start < stop <= C):
        raise ShapeError(f"channel slice [{start}, {stop}) outside 0..{C}")
    result = _wrap(np.ascontiguousarray(x.data[:, start:stop]))

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return [gx]

    record_op(result, [x], vjp)
    return result


def pad2d(x: Tensor, pads: tuple[int, int, int, int]) -> Tensor:
    """Zero-pad spatial axes by (top, bottom, left, right)."""
    pt, pb, pl, pr = pads
    N, C, H, W = x.dims
    result = _wrap(np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))))
    record_op(result, [x], lambda g: [np.ascontiguousarray(g[:, :, pt:pt + H, pl:pl + W])])
    return result


def sum_all(x: Tensor) -> Tensor:
    """Reduce every element into a 1x1x1x1 scalar tensor."""
    result = _wrap(x.data.sum(dtype=x.dtype).reshape(1, 1, 1, 1))
    record_op(result, [x], lambda g: [np.broadcast_to(g.reshape(()), x.dims).copy()])
    return result


# ---------------------------------------------------------------------------
# resampling

def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each pixel into a factor x factor block."""
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    result = _wrap(out)
    N, C, H, W = x.dims

    def vjp(g):
        return [g.reshape(N, C, H, factor, W, factor).sum(axis=(3, 5))]

    record_op(result, [x], vjp)
    return result


def pixel_shuffle(x: Tensor, factor: int) -> Tensor:
    """(N, C*s*s, H, W) -> (N, C, H*s, W*s).

    Channel c*s*s + dy*s + dx of cell (y, x) lands at output (c, y*s+dy, x*s+dx).
    """
    s = int(factor)
    N, Cs, H, W = x.dims
    if Cs % (s * s):
        raise ShapeError(f"channels {Cs} not divisible by factor^2 {s * s}")
    C = Cs // (s * s)
    out = x.data.reshape(N, C, s, s, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(N, C, H * s, W * s)
    result = _wrap(out)

    def vjp(g):
        return [np.ascontiguousarray(
            g.reshape(N, C, H, s, W, s).transpose(0, 1, 3, 5, 2, 4).reshape(N, Cs, H, W))]

    record_op(result, [x], vjp)
    return result


def grid_sample_bilinear(x: Tensor, coords: Tensor) -> Tensor:
    """Bilinear read of ``x`` at continuous pixel coordinates.

    ``coords`` is (N, 2, Ho, Wo): channel 0 holds row (h) positions, channel
    1 column (w) positions.  Out-of-range samples clamp to the border.
    """
    N, C, H, W = x.dims
    if coords.dims[0] != N or coords.dims[1] != 2:
        raise ShapeError(f"coords dims {coords.dims} must be ({N}, 2, Ho, Wo)")
    _check_same_dtype(x, coords)
    h = np.clip(coords.data[:, 0], 0.0, H - 1.0)
    w = np.clip(coords.data[:, 1], 0.0, W - 1.0)
    h0 = np.clip(np.floor(h).astype(np.int64), 0, max(H - 2, 0))
    w0 = np.clip(np.floor(w).astype(np.int64), 0, max(W - 2, 0))
    h1 = np.minimum(h0 + 1, H - 1)
    w1 = np.minimum(w0 + 1, W - 1)
    a = (h - h0).astype(x.dtype)[:, None]  # (N, 1, Ho, Wo)
    b = (w - w0).astype(x.dtype)[:, None]
    nn = np.arange(N)[:, None, None]

    def gather(hi, wi):
        return x.data[nn, :, hi, wi].transpose(0, 3, 1, 2)  # (N, C, Ho, Wo)

    v00, v01 = gather(h0, w0), gather(h0, w1)
    v10, v11 = gather(h1, w0), gather(h1, w1)
    out = (1 - a) * ((1 - b) * v00 + b * v01) + a * ((1 - b) * v10 + b * v11)
    result = _wrap(out)

    def vjp(g):
        gx = None
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            cc = np.arange(C)[None, :, None, None]
            nn4 = np.arange(N)[:, None, None, None]
            for hi, wi, wgt in ((h0, w0, (1 - a) * (1 - b)),
                                (h0, w1, (1 - a) * b),
                                (h1, w0, a * (1 - b)),
                                (h1, w1, a * b)):
                np.add.at(gx, (nn4, cc, hi[:, None], wi[:, None]), g * wgt)
        gc = None
        if coords.requires_grad:
            dh = ((1 - b) * (v10 - v00) + b * (v11 - v01)) * g
            dw = ((1 - a) * (v01 - v00) + a * (v11 - v10)) * g
            inside_h = ((coords.data[:, 0] > 0) & (coords.data[:, 0] < H - 1)).astype(x.dtype)
            inside_w = ((coords.data[:, 1] > 0) & (coords.data[:, 1] < W - 1)).astype(x.dtype)
            gc = np.stack([dh.sum(axis=1) * inside_h, dw.sum(axis=1) * inside_w], axis=1)
        return [gx, gc]

    record_op(result, [x, coords], vjp)
    return result
