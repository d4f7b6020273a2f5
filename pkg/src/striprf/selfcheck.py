"""Built-in verification batteries.

``gradient_battery`` runs finite-difference checks over every learnable
operation (convolution variants, the attention and strip modules, the
sub-block, the upsampler's offset generator, and a sampled end-to-end
subset).  ``oracle_battery`` compares fast paths against the independent
references: naive convolution, kernel composition, the strip-module
transcription, bilinear upsampling, identity reductions, and the canonical
average-precision example.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import reference, tensor as T
from .blocks import lska_forward, spm_forward
from .gradcheck import GradCheckResult, gradcheck
from .layers import named_tensors, set_named_tensor
from .metrics import IOU_THRESHOLDS, average_precision, precision_recall_f1
from .model import (ModelConfig, _dysample, _lska, _spm, _srfm, _subblock,
                    build_model, dysample_forward, forward, init_params)
from .srfm import srfm_forward, srfm_subblock_forward
from .tensor import Tape, Tensor, backward, conv_spec, max_pool

F64 = np.float64


def _rand(rng, shape, lo=0.3, hi=1.0):
    """Magnitudes in [lo, hi) with random signs: keeps clear of kinks at 0."""
    mag = rng.uniform(lo, hi, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return Tensor((mag * sign).astype(F64))


def _spaced(rng, shape):
    """Distinct values with guaranteed separation (safe for max-pool FD)."""
    n = int(np.prod(shape))
    vals = np.linspace(-1.0, 1.0, n)
    return Tensor(rng.permutation(vals).reshape(shape))


def _weighted_sum(out: Tensor, cot: Tensor) -> Tensor:
    return T.sum_all(T.hadamard(out, cot))


def _record_builder(record, prefix, run):
    """Gradcheck fn that pushes the checked tensors back into a param record."""
    names = [n for n, _ in named_tensors(record, prefix)]

    def fn(ts):
        for n in names:
            set_named_tensor(record, n[len(prefix) + 1:], ts[n])
        return run(ts)

    return fn, names


# ---------------------------------------------------------------------------
# gradient battery

def _conv_case(kernel, stride, padding, dilation, groups, in_c, out_c, hw):
    def build(rng):
        x = _rand(rng, (1, in_c, hw, hw))
        w = _rand(rng, (out_c, in_c // groups) + kernel, lo=0.1, hi=0.6)
        b = _rand(rng, (1, out_c, 1, 1), lo=0.0, hi=0.3)
        spec = conv_spec(kernel, stride, padding, dilation, groups, has_bias=True)
        out_dims = T.conv2d(x, w, b, spec).dims
        cot = _rand(rng, out_dims)

        def fn(ts):
            return _weighted_sum(T.conv2d(ts["x"], ts["w"], ts["b"], spec), cot)

        return fn, {"x": x, "w": w, "b": b}

    return build


def _build_avg_pool(rng):
    x = _rand(rng, (2, 2, 6, 7))
    cot = _rand(rng, T.avg_pool(x, (3, 2), (2, 1)).dims)
    return (lambda ts: _weighted_sum(T.avg_pool(ts["x"], (3, 2), (2, 1)), cot)), {"x": x}


def _build_max_pool(rng):
    x = _spaced(rng, (1, 2, 6, 6))
    cot = _rand(rng, T.max_pool(x, 3, 2, 1).dims)
    return (lambda ts: _weighted_sum(T.max_pool(ts["x"], 3, 2, 1), cot)), {"x": x}


def _build_activation(kind):
    def build(rng):
        x = _rand(rng, (1, 3, 4, 5))
        cot = _rand(rng, x.dims)
        return (lambda ts: _weighted_sum(T.activation(ts["x"], kind), cot)), {"x": x}

    return build


def _build_elementwise(rng):
    x = _rand(rng, (1, 2, 3, 4))
    y = _rand(rng, (1, 2, 3, 4))
    cot = _rand(rng, (1, 4, 3, 4))

    def fn(ts):
        s = T.concat_channels([T.hadamard(ts["x"], ts["y"]), T.add(ts["x"], ts["y"])])
        return _weighted_sum(s, cot)

    return fn, {"x": x, "y": y}


def _build_expand_slice(rng):
    x = _rand(rng, (1, 3, 1, 4))
    cot = _rand(rng, (1, 2, 5, 4))

    def fn(ts):
        e = T.broadcast_expand(ts["x"], (1, 3, 5, 4))
        return _weighted_sum(T.slice_channels(e, 1, 3), cot)

    return fn, {"x": x}


def _build_resample(rng):
    x = _rand(rng, (1, 2, 3, 3))
    cot = _rand(rng, (1, 2, 6, 6))

    def fn(ts):
        return _weighted_sum(T.upsample_nearest(ts["x"], 2), cot)

    return fn, {"x": x}


def _build_pixel_shuffle(rng):
    x = _rand(rng, (1, 8, 3, 3))
    cot = _rand(rng, (1, 2, 6, 6))
    return (lambda ts: _weighted_sum(T.pixel_shuffle(ts["x"], 2), cot)), {"x": x}


def _build_pad(rng):
    x = _rand(rng, (1, 2, 3, 3))
    cot = _rand(rng, (1, 2, 6, 7))
    return (lambda ts: _weighted_sum(T.pad2d(ts["x"], (1, 2, 3, 1)), cot)), {"x": x}


def _build_grid_sample(rng):
    x = _rand(rng, (1, 2, 5, 5))
    # interior coords away from the integer lattice and the borders
    base = rng.uniform(0.3, 3.6, size=(1, 2, 4, 4))
    coords = Tensor(np.where(np.abs(base - np.round(base)) < 0.1, base + 0.17, base))
    cot = _rand(rng, (1, 2, 4, 4))

    def fn(ts):
        return _weighted_sum(T.grid_sample_bilinear(ts["x"], ts["coords"]), cot)

    return fn, {"x": x, "coords": coords}


def _randomize(record, prefix, rng, weight_scale=0.4):
    for name, t in named_tensors(record, prefix):
        if name.endswith(".scale"):
            fresh = _rand(rng, t.dims, lo=0.5, hi=1.2)
        elif name.endswith(".weight"):
            fresh = _rand(rng, t.dims, lo=0.05, hi=weight_scale)
        else:
            fresh = _rand(rng, t.dims, lo=0.0, hi=0.2)
        set_named_tensor(record, name[len(prefix) + 1:], fresh)
    return {name: t for name, t in named_tensors(record, prefix)}


# Finite differences are meaningless when the operating point sits within the
# FD step of a ReLU or max-pool decision boundary, so the composite builders
# redraw (deterministically, from the same stream) until margins are safe.
_KINK_MARGIN = 0.02


def _pool_top2_gap(t: Tensor, window: int, pad: int) -> float:
    """Smallest max-vs-runner-up gap over all pooling windows (ties of equal
    values count as zero only if a strictly smaller value is that close)."""
    from numpy.lib.stride_tricks import sliding_window_view
    xp = np.pad(t.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                constant_values=-np.inf)
    win = sliding_window_view(xp, (window, window), axis=(2, 3))
    flat = win.reshape(win.shape[:4] + (-1,))
    mx = flat.max(axis=-1)
    below = np.where(flat < mx[..., None], flat, -np.inf).max(axis=-1)
    gaps = mx - below
    return float(gaps[np.isfinite(gaps)].min()) if np.isfinite(gaps).any() else np.inf


def _srfm_relu_margin(x: Tensor, p) -> float:
    """Distance of the pooled-branch ReLU input from zero."""
    from .layers import conv_same
    n, c, h, w = x.dims
    fsq = conv_same(x, p.dw)
    fh = conv_same(fsq, p.convh)
    fv = conv_same(fsq, p.convv)
    fph = conv_same(T.avg_pool(fh, (h, 1), 1), p.smallh)
    fpv = conv_same(T.avg_pool(fv, (1, w), 1), p.smallv)
    zpre = T.add(T.broadcast_expand(fph, x.dims), T.broadcast_expand(fpv, x.dims))
    return float(np.abs(zpre.data).min())


def _draw_until(rng, make, safe, attempts=50):
    for _ in range(attempts):
        candidate = make(rng)
        if safe(candidate):
            return candidate
    raise RuntimeError("could not draw a kink-safe configuration")


def _build_lska(rng):
    C = 2
    p = _lska(C, 9, 3, F64)
    tensors = _randomize(p, "lska", rng)
    x = _rand(rng, (1, C, 5, 6))
    cot = _rand(rng, x.dims)
    fn, _ = _record_builder(p, "lska", lambda ts: _weighted_sum(lska_forward(ts["x"], p), cot))
    tensors["x"] = x
    return fn, tensors


def _build_srfm(rng):
    C = 2
    p = _srfm(C, ModelConfig().kernels, F64)
    tensors = _randomize(p, "srfm", rng)
    x = _rand(rng, (1, C, 7, 8))
    cot = _rand(rng, x.dims)
    fn, _ = _record_builder(p, "srfm", lambda ts: _weighted_sum(srfm_forward(ts["x"], p), cot))
    tensors["x"] = x
    return fn, tensors


def _build_subblock(rng):
    C = 2
    b = _subblock(C, ModelConfig().kernels, F64)
    tensors = _randomize(b, "blk", rng)
    x = _rand(rng, (1, C, 6, 6))
    cot = _rand(rng, x.dims)
    fn, _ = _record_builder(b, "blk", lambda ts: _weighted_sum(srfm_subblock_forward(ts["x"], b), cot))
    tensors["x"] = x
    return fn, tensors


def _build_spm(rng):
    C = 2
    p = _spm(C, ModelConfig().kernels, F64)
    tensors = _randomize(p, "spm", rng)
    x = _spaced(rng, (1, C, 6, 6))
    cot = _rand(rng, x.dims)
    fn, _ = _record_builder(p, "spm", lambda ts: _weighted_sum(spm_forward(ts["x"], p), cot))
    tensors["x"] = x
    return fn, tensors


def _build_dysample(rng):
    C = 2
    p = _dysample(C, 2, F64)
    for name, t in named_tensors(p, "up"):
        set_named_tensor(p, name[3:], _rand(rng, t.dims, lo=0.01, hi=0.08))
    tensors = {name: t for name, t in named_tensors(p, "up")}
    x = _rand(rng, (1, C, 4, 5))
    cot = _rand(rng, (1, C, 8, 10))
    fn, _ = _record_builder(p, "up", lambda ts: _weighted_sum(dysample_forward(ts["x"], p), cot))
    tensors["x"] = x
    return fn, tensors


GRADIENT_CASES = [
    ("conv2d 3x3 stride2", _conv_case((3, 3), 2, 1, 1, 1, 2, 4, 6), 2),
    ("conv2d depthwise 5x5", _conv_case((5, 5), 1, 2, 1, 3, 3, 3, 7), 2),
    ("conv2d pointwise 1x1", _conv_case((1, 1), 1, 0, 1, 1, 3, 5, 5), 2),
    ("conv2d dilated grouped", _conv_case((3, 3), 1, 2, 2, 2, 4, 4, 8), 2),
    ("conv2d strip 1x7", _conv_case((1, 7), 1, (0, 3), 1, 2, 2, 2, 7), 2),
    ("conv2d strip 7x1", _conv_case((7, 1), 1, (3, 0), 1, 2, 2, 2, 7), 2),
    ("avg_pool", _build_avg_pool, 2),
    ("max_pool padded", _build_max_pool, 2),
    ("activation relu", _build_activation("relu"), 2),
    ("activation gelu", _build_activation("gelu"), 2),
    ("activation silu", _build_activation("silu"), 2),
    ("activation sigmoid", _build_activation("sigmoid"), 2),
    ("hadamard+add+concat", _build_elementwise, 2),
    ("expand+slice", _build_expand_slice, 2),
    ("upsample_nearest", _build_resample, 2),
    ("pixel_shuffle", _build_pixel_shuffle, 2),
    ("pad2d", _build_pad, 2),
    ("grid_sample_bilinear", _build_grid_sample, 2),
    ("lska attention block", _build_lska, 1),
    ("srfm core", _build_srfm, 1),
    ("srfm sub-block", _build_subblock, 1),
    ("spm block", _build_spm, 1),
    ("dysample offset generator", _build_dysample, 1),
]


def endtoend_gradcheck(seed: int = 0, n_slots: int = 20) -> GradCheckResult:
    """Finite-difference check of a random 20-slot parameter subset through
    the whole model (sum of all head maps as the scalar).

    Parameters are drawn from the kink-safe distribution, not the training
    init: zero-bias gates at init put activations within float-noise of the
    ReLU kinks, where finite differences are meaningless.
    """
    cfg = ModelConfig(num_classes=2, base_width=4, depth=1, input_size=32, seed=seed)
    graph = build_model(cfg, dtype=F64)
    store = init_params(graph, seed=seed, dtype=F64)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(99,)))
    for name in sorted(store):
        t = store[name]
        if name.endswith(".scale"):
            fresh = Tensor(rng.uniform(0.7, 1.3, size=t.dims))
        elif name.endswith(".weight"):
            fresh = _rand(rng, t.dims, lo=0.05, hi=0.3)
        else:
            fresh = _rand(rng, t.dims, lo=0.0, hi=0.15)
        store[name] = fresh
    graph._bound_store = None  # force rebinding with the fresh draws
    image = _rand(rng, (1, 3, 32, 32))

    def loss_for(p_store):
        maps = forward(graph, p_store, image)
        total = None
        for m in maps:
            s = T.sum_all(m)
            total = s if total is None else T.add(total, s)
        return total

    for t in store.values():
        t.requires_grad = True
    with Tape() as tape:
        loss = loss_for(store)
    backward(tape, loss, params=list(store.values()))
    analytic = {k: t.grad.copy() for k, t in store.items()}
    for t in store.values():
        t.requires_grad = False

    names = sorted(store)
    eps = 1e-3
    worst = 0.0
    per: dict[str, float] = {}
    for _ in range(n_slots):
        name = names[int(rng.integers(len(names)))]
        t = store[name]
        idx = int(rng.integers(t.data.size))
        bumped = t.data.reshape(-1).copy()
        bumped[idx] += eps
        plus = loss_for({**store, name: Tensor(bumped.reshape(t.dims))}).item()
        bumped[idx] -= 2 * eps
        minus = loss_for({**store, name: Tensor(bumped.reshape(t.dims))}).item()
        numeric = (plus - minus) / (2 * eps)
        a = float(analytic[name].reshape(-1)[idx])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-2)
        per[f"{name}[{idx}]"] = rel
        worst = max(worst, rel)
    return GradCheckResult(name="end-to-end parameter subset", passed=worst <= 1e-4,
                           worst_rel=worst, per_input=per)


def gradient_battery(seed: int = 0) -> list[GradCheckResult]:
    results = [gradcheck(name, build, trials=trials, seed=seed)
               for name, build, trials in GRADIENT_CASES]
    results.append(endtoend_gradcheck(seed))
    return results


# ---------------------------------------------------------------------------
# oracle battery

@dataclass
class OracleResult:
    name: str
    passed: bool
    detail: str

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return f"{status}  {self.name:<40s} {self.detail}"


def _check(name, passed, detail) -> OracleResult:
    return OracleResult(name=name, passed=bool(passed), detail=detail)


def _conv_vs_naive(rng, draws: int) -> OracleResult:
    worst = 0.0
    for _ in range(draws):
        g = int(rng.choice([1, 2]))
        cg = int(rng.integers(1, 3))
        og = int(rng.integers(1, 3))
        in_c, out_c = g * cg, g * og
        shape_kind = int(rng.integers(3))
        kh, kw = [(3, 3), (1, 5), (5, 1)][shape_kind]
        d = int(rng.choice([1, 2]))
        s = int(rng.choice([1, 2]))
        hw = int(rng.integers(6, 10))
        x = Tensor(rng.standard_normal((2, in_c, hw, hw)))
        w = Tensor(rng.standard_normal((out_c, cg, kh, kw)))
        b = Tensor(rng.standard_normal((1, out_c, 1, 1)))
        ph, pw = d * (kh - 1) // 2, d * (kw - 1) // 2
        spec = conv_spec((kh, kw), s, (ph, pw), d, g, has_bias=True)
        got = T.conv2d(x, w, b, spec).data
        ref = reference.naive_conv2d(x.data, w.data, b.data, (s, s), (ph, pw), (d, d), g)
        denom = max(np.abs(ref).max(), 1e-9)
        worst = max(worst, float(np.abs(got - ref).max() / denom))
    return _check("conv2d vs naive reference", worst <= 1e-6, f"worst rel {worst:.2e} over {draws} draws")


def _separability(rng) -> OracleResult:
    worst = 0.0
    for k in (3, 7, 11):
        C = 3
        x = Tensor(rng.standard_normal((1, C, 12, 12)))
        u = Tensor(rng.standard_normal((C, 1, 1, k)))
        v = Tensor(rng.standard_normal((C, 1, k, 1)))
        hspec = conv_spec((1, k), padding=(0, k // 2), groups=C)
        vspec = conv_spec((k, 1), padding=(k // 2, 0), groups=C)
        cascade = T.conv2d(T.conv2d(x, u, None, hspec), v, None, vspec)
        outer = np.einsum("ci,cj->cij", v.data[:, 0, :, 0], u.data[:, 0, 0, :])[:, None]
        full = T.conv2d(x, Tensor(outer), None, conv_spec((k, k), padding=k // 2, groups=C))
        denom = max(np.abs(full.data).max(), 1e-9)
        worst = max(worst, float(np.abs(cascade.data - full.data).max() / denom))
    return _check("strip cascade = outer-product kernel", worst <= 1e-6, f"worst rel {worst:.2e}")


def _srfm_vs_transcription(rng, draws: int) -> OracleResult:
    worst = 0.0
    shapes_ok = True
    for _ in range(draws):
        C = int(rng.integers(2, 4))
        h = int(rng.integers(5, 9))
        w = int(rng.integers(5, 9))
        p = _srfm(C, ModelConfig().kernels, F64)
        _randomize(p, "srfm", np.random.default_rng(rng.integers(2 ** 32)))
        x = Tensor(rng.standard_normal((1, C, h, w)))
        got = srfm_forward(x, p)
        ref = reference.srfm_transcription(x, p)
        fh = T.conv2d(x, p.convh.weight, p.convh.bias,
                      conv_spec((1, p.convh.kernel[1]), padding=(0, p.convh.kernel[1] // 2), groups=C, has_bias=True))
        ph = T.avg_pool(fh, (h, 1), 1)
        pv = T.avg_pool(fh, (1, w), 1)
        shapes_ok = shapes_ok and ph.dims == (1, C, 1, w) and pv.dims == (1, C, h, 1)
        denom = max(np.abs(ref.data).max(), 1e-9)
        worst = max(worst, float(np.abs(got.data - ref.data).max() / denom))
    return _check("srfm vs equation transcription", worst <= 1e-6 and shapes_ok,
                  f"worst rel {worst:.2e}, pooled shapes {'ok' if shapes_ok else 'WRONG'}")


def _set_unit_attention(p):
    p.pw.weight = Tensor(np.zeros(p.pw.weight.dims, dtype=p.pw.weight.data.dtype))
    p.pw.bias = Tensor(np.ones(p.pw.bias.dims, dtype=p.pw.bias.data.dtype))


def _identity_reductions(rng) -> OracleResult:
    details = []
    ok = True

    # strip module: attention == 1, pooled branch zeroed -> exact identity
    C = 3
    sp = _srfm(C, ModelConfig().kernels, F64)
    _randomize(sp, "srfm", rng)
    _set_unit_attention(sp)
    for name in ("smallh", "smallv"):
        cp = getattr(sp, name)
        cp.weight = Tensor(np.zeros(cp.weight.dims))
        cp.bias = Tensor(np.zeros(cp.bias.dims))
    x = Tensor(rng.standard_normal((1, C, 6, 7)))
    ident = np.array_equal(srfm_forward(x, sp).data, x.data)
    ok &= ident
    details.append(f"srfm identity {'exact' if ident else 'BROKEN'}")

    # attention block: impulse kernels + unit attention (odd-span config)
    lp = _lska(C, 9, 3, F64)
    for nm in ("dwh", "dwv", "dwdh", "dwdv"):
        cp = getattr(lp, nm)
        w = np.zeros(cp.weight.dims)
        w[:, :, (w.shape[2] - 1) // 2, (w.shape[3] - 1) // 2] = 1.0
        cp.weight = Tensor(w)
        cp.bias = Tensor(np.zeros(cp.bias.dims))
    _set_unit_attention(lp)
    ident = np.array_equal(lska_forward(x, lp).data, x.data)
    ok &= ident
    details.append(f"lska identity {'exact' if ident else 'BROKEN'}")

    # upsampler with zero offsets == plain bilinear
    dp = _dysample(C, 2, F64)
    up = dysample_forward(x, dp)
    ref = reference.bilinear_upsample(x.data, 2)
    err = float(np.abs(up.data - ref).max())
    ok &= err <= 1e-6
    details.append(f"dysample-vs-bilinear {err:.1e}")

    # spm with unit attention == plain pool-aggregation, bit-exact
    pp = _spm(C, ModelConfig().kernels, F64)
    _randomize(pp, "spm", rng)
    for lname in ("lska1", "lska2", "lska3"):
        _set_unit_attention(getattr(pp, lname))
    got = spm_forward(x, pp)
    y0 = pp.entry(x)
    y1 = max_pool(y0, 5, 1, 2)
    y2 = max_pool(y1, 5, 1, 2)
    y3 = max_pool(y2, 5, 1, 2)
    base = pp.fuse(T.concat_channels([y0, y1, y2, y3]))
    bit = np.array_equal(got.data, base.data)
    ok &= bit
    details.append(f"spm pool-aggregation {'bit-exact' if bit else 'DIFFERS'}")

    return _check("identity reductions", ok, "; ".join(details))


def _metrics_examples() -> OracleResult:
    ok = True
    details = []
    # canonical three-detection scene: TP 0.9, FP 0.8, TP 0.7 over 2 GT
    ap = average_precision([(0.9, True), (0.8, False), (0.7, True)], gt_count=2)
    expected = (51 + 50 * (2.0 / 3.0)) / 101
    ok &= abs(ap - expected) < 1e-9
    details.append(f"AP {ap:.4f} (expect {expected:.4f})")
    ok &= len(IOU_THRESHOLDS) == 10
    details.append(f"{len(IOU_THRESHOLDS)} IoU thresholds")
    p, r, f1 = precision_recall_f1(0, 0, 0)
    ok &= (p, r, f1) == (0.0, 0.0, 0.0)
    details.append("degenerate F1 -> 0")
    return _check("metrics canonical values", ok, "; ".join(details))


def oracle_battery(seed: int = 0, conv_draws: int = 25, srfm_draws: int = 8) -> list[OracleResult]:
    rng = np.random.default_rng(seed)
    return [
        _conv_vs_naive(rng, conv_draws),
        _separability(rng),
        _srfm_vs_transcription(rng, srfm_draws),
        _identity_reductions(rng),
        _metrics_examples(),
    ]
