"""Slow, independent reference computations used by the self-check battery.

Everything here is written for obviousness, not speed: plain loops over
ndarrays, no shared code with the fast paths in ``tensor``.  The test suite
and ``striprf selftest`` compare the production ops against these.
"""

from __future__ import annotations

import numpy as np


def naive_conv2d(x: np.ndarray, weight: np.ndarray, bias=None,
                 stride=(1, 1), padding=(0, 0), dilation=(1, 1), groups=1) -> np.ndarray:
    """Direct quadruple-loop cross-correlation over raw ndarrays."""
    N, C, H, W = x.shape
    outC, cg, kh, kw = weight.shape
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    og = outC // groups
    Ho = (H + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    Wo = (W + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    out = np.zeros((N, outC, Ho, Wo), dtype=np.float64)
    for n in range(N):
        for o in range(outC):
            gi = o // og
            for y in range(Ho):
                for xo in range(Wo):
                    acc = 0.0
                    for c in range(cg):
                        cin = gi * cg + c
                        for i in range(kh):
                            hy = y * sh + i * dh - ph
                            if hy < 0 or hy >= H:
                                continue
                            for j in range(kw):
                                wx = xo * sw + j * dw - pw
                                if wx < 0 or wx >= W:
                                    continue
                                acc += float(x[n, cin, hy, wx]) * float(weight[o, c, i, j])
                    if bias is not None:
                        acc += float(np.asarray(bias).reshape(-1)[o])
                    out[n, o, y, xo] = acc
    return out


def bilinear_upsample(x: np.ndarray, s: int) -> np.ndarray:
    """Plain bilinear x s upsampling, half-pixel centers, border clamp."""
    N, C, H, W = x.shape
    Ho, Wo = H * s, W * s
    out = np.zeros((N, C, Ho, Wo), dtype=np.float64)
    for y in range(Ho):
        src_h = min(max((y + 0.5) / s - 0.5, 0.0), H - 1.0)
        h0 = min(int(np.floor(src_h)), max(H - 2, 0))
        h1 = min(h0 + 1, H - 1)
        a = src_h - h0
        for xo in range(Wo):
            src_w = min(max((xo + 0.5) / s - 0.5, 0.0), W - 1.0)
            w0 = min(int(np.floor(src_w)), max(W - 2, 0))
            w1 = min(w0 + 1, W - 1)
            b = src_w - w0
            out[:, :, y, xo] = ((1 - a) * (1 - b) * x[:, :, h0, w0]
                                + (1 - a) * b * x[:, :, h0, w1]
                                + a * (1 - b) * x[:, :, h1, w0]
                                + a * b * x[:, :, h1, w1])
    return out


def compose_1d_kernels(*kernels_1d) -> np.ndarray:
    """Per-channel 2-D kernel equivalent to a cascade of same-padded 1-D correlations.

    Each argument is (C, 1, kh, kw) with one spatial dim equal to 1 and odd
    extent.  Cascaded cross-correlations compose by plain convolution of the
    kernel arrays, axis by axis.
    """
    C = kernels_1d[0].shape[0]
    hparts, vparts = [], []
    for k in kernels_1d:
        _, _, kh, kw = k.shape
        if kh == 1:
            hparts.append(k[:, 0, 0, :])
        elif kw == 1:
            vparts.append(k[:, 0, :, 0])
        else:
            raise ValueError(f"kernel {k.shape} is not one-dimensional")
    composed_h, composed_v = [], []
    for c in range(C):
        h = np.ones(1, dtype=np.float64)
        for part in hparts:
            h = np.convolve(h, part[c].astype(np.float64))
        v = np.ones(1, dtype=np.float64)
        for part in vparts:
            v = np.convolve(v, part[c].astype(np.float64))
        composed_h.append(h)
        composed_v.append(v)
    out = np.zeros((C, 1, len(composed_v[0]), len(composed_h[0])), dtype=np.float64)
    for c in range(C):
        out[c, 0] = np.outer(composed_v[c], composed_h[c])
    return out


def srfm_transcription(x, p):
    """Line-by-line recomputation of the strip module from bare primitives.

    Mirrors the published dataflow one step at a time with explicit ConvSpec
    geometry; shares nothing with the production forward except the primitive
    ops themselves.
    """
    from . import tensor as T

    n, c, h, w = x.dims

    def dwconv(t, cp):
        kh, kw = cp.weight.dims[2], cp.weight.dims[3]
        spec = T.ConvSpec((kh, kw), (1, 1), (kh // 2, kw // 2), (1, 1),
                          groups=t.dims[1], has_bias=cp.bias is not None)
        return T.conv2d(t, cp.weight, cp.bias, spec)

    def pwconv(t, cp):
        spec = T.ConvSpec((1, 1), has_bias=cp.bias is not None)
        return T.conv2d(t, cp.weight, cp.bias, spec)

    f_sq = dwconv(x, p.dw)                                   # depthwise k x k
    f_h = dwconv(f_sq, p.convh)                              # 1 x kH strip
    f_v = dwconv(f_sq, p.convv)                              # kV x 1 strip
    y = pwconv(f_v, p.pw)                                    # cross-channel mix
    x_weighted = T.hadamard(x, y)
    p_h = T.avg_pool(f_h, (h, 1), (1, 1))                    # (N, C, 1, W)
    p_v = T.avg_pool(f_v, (1, w), (1, 1))                    # (N, C, H, 1)
    f_h2 = dwconv(p_h, p.smallh)
    f_v2 = dwconv(p_v, p.smallv)
    z = T.activation(T.add(T.broadcast_expand(f_h2, x.dims),
                           T.broadcast_expand(f_v2, x.dims)), "relu")
    return T.add(x_weighted, z)


def nms_reference(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Exhaustive quadratic suppression over one class worth of (x, y, w, h) boxes."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept: list[int] = []
    for i in order:
        ok = True
        for j in kept:
            if _iou_xywh(boxes[i], boxes[j]) > iou_threshold:
                ok = False
                break
        if ok:
            kept.append(i)
    return kept


def _iou_xywh(a, b) -> float:
    ax1, ay1, aw, ah = a
    bx1, by1, bw, bh = b
    ix = max(0.0, min(ax1 + aw, bx1 + bw) - max(ax1, bx1))
    iy = max(0.0, min(ay1 + ah, by1 + bh) - max(ay1, by1))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def average_precision_riemann(tp_flags, gt_count: int, n_grid: int = 100001) -> float:
    """Area under the interpolated PR curve by dense Riemann sum.

    ``tp_flags`` must already be ordered by descending score.  The envelope
    p(r) = max precision at recall >= r is sampled on a uniform grid; this is
    the quadrature cross-check for the closed-form all-points AP.
    """
    if gt_count == 0 or len(tp_flags) == 0:
        return 0.0
    flags = np.asarray(tp_flags, dtype=np.float64)
    tp = np.cumsum(flags)
    fp = np.cumsum(1.0 - flags)
    recall = tp / gt_count
    precision = tp / (tp + fp)
    suffmax = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.linspace(0.0, 1.0, n_grid)
    idx = np.searchsorted(recall, grid - 1e-12, side="left")
    vals = np.where(idx < len(recall), suffmax[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(vals.sum() / n_grid)
