"""Box decoding, NMS, greedy matching, and the detection evaluation suite.

Boxes are (x, y, w, h) with (x, y) the top-left corner, in pixels.  AP uses
101-point interpolation by default (the convention implied by averaging over
IoU thresholds 0.50:0.05:0.95); the exact all-points variant is available as
an alternative and serves as the oracle in the self-checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, _sigmoid

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))  # 0.50 .. 0.95


@dataclass
class Detection:
    image_id: int
    class_id: int
    box: tuple[float, float, float, float]  # x, y, w, h
    score: float


@dataclass
class GroundTruthObject:
    image_id: int
    class_id: int
    box: tuple[float, float, float, float]


@dataclass
class MetricsReport:
    """AP per class and IoU threshold plus the headline aggregates.

    ``defined`` is False when the ground truth is empty for every class; the
    aggregate fields are then None rather than a misleading zero.
    """

    per_class_ap: dict[int, dict[float, float]] = field(default_factory=dict)
    map50: Optional[float] = None
    map50_95: Optional[float] = None
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    conf_threshold: float = 0.25
    classes_evaluated: tuple[int, ...] = ()
    defined: bool = True


# ---------------------------------------------------------------------------
# geometry

def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two (x, y, w, h) boxes; 0 when the union is empty."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0.0 else 0.0


# ---------------------------------------------------------------------------
# decoding

def decode(head_maps: Sequence[Tensor], strides: Sequence[int], conf_threshold: float,
           image_size: Optional[tuple[int, int]] = None) -> list[Detection]:
    """Raw head maps -> detections.

    Channel layout per map: num_classes sigmoid class logits, then l/t/r/b
    distances from the cell center in stride units.  Boxes are clamped to the
    image; one Detection per cell whose best class probability clears the
    threshold.
    """
    if len(head_maps) != len(strides):
        raise ShapeError(f"{len(head_maps)} maps vs {len(strides)} strides")
    dets: list[Detection] = []
    num_classes = head_maps[0].dims[1] - 4
    if num_classes < 1:
        raise ShapeError(f"head map has {head_maps[0].dims[1]} channels; needs classes + 4")
    if image_size is None:
        image_size = (head_maps[0].dims[2] * strides[0], head_maps[0].dims[3] * strides[0])
    img_h, img_w = image_size
    for m, s in zip(head_maps, strides):
        n, ch, hg, wg = m.dims
        if ch != num_classes + 4:
            raise ShapeError(f"head map channels {ch} != {num_classes + 4}")
        probs = _sigmoid(np.asarray(m.data[:, :num_classes], dtype=np.float64))
        ltrb = np.asarray(m.data[:, num_classes:], dtype=np.float64)
        best = probs.argmax(axis=1)             # lowest class id wins ties
        score = np.take_along_axis(probs, best[:, None], axis=1)[:, 0]
        keep = score >= conf_threshold
        cy = (np.arange(hg) + 0.5) * s
        cx = (np.arange(wg) + 0.5) * s
        for img in range(n):
            ys, xs = np.nonzero(keep[img])
            for y, x in zip(ys, xs):
                l, t, r, b = ltrb[img, :, y, x] * s
                x1 = min(max(cx[x] - l, 0.0), float(img_w))
                y1 = min(max(cy[y] - t, 0.0), float(img_h))
                x2 = min(max(cx[x] + r, 0.0), float(img_w))
                y2 = min(max(cy[y] + b, 0.0), float(img_h))
                dets.append(Detection(image_id=img, class_id=int(best[img, y, x]),
                                      box=(x1, y1, max(x2 - x1, 0.0), max(y2 - y1, 0.0)),
                                      score=float(score[img, y, x])))
    return dets


# ---------------------------------------------------------------------------
# suppression and matching

def _det_order(d: Detection, index: int):
    return (-d.score, d.class_id, index)


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-image, per-class suppression; deterministic tie-breaking."""
    groups: dict[tuple[int, int], list[tuple[Detection, int]]] = {}
    for i, d in enumerate(dets):
        groups.setdefault((d.image_id, d.class_id), []).append((d, i))
    kept_indices: list[int] = []
    for key in sorted(groups):
        entries = sorted(groups[key], key=lambda pair: _det_order(pair[0], pair[1]))
        kept_group: list[tuple[Detection, int]] = []
        for d, i in entries:
            if all(iou(d.box, k.box) <= iou_threshold for k, _ in kept_group):
                kept_group.append((d, i))
        kept_indices.extend(i for _, i in kept_group)
    kept_indices.sort()
    return [dets[i] for i in kept_indices]


def match(dets: Sequence[Detection], gts: Sequence[GroundTruthObject],
          iou_threshold: float) -> tuple[list[bool], int]:
    """Greedy TP/FP labelling against ground truth.

    Detections are processed score-descending per class; each takes the
    unmatched same-class, same-image GT of highest IoU >= threshold.  Returns
    per-detection TP flags (aligned with the input order) and the FN count.
    """
    matched = [False] * len(gts)
    gt_index: dict[tuple[int, int], list[int]] = {}
    for j, g in enumerate(gts):
        gt_index.setdefault((g.image_id, g.class_id), []).append(j)
    tp = [False] * len(dets)
    order = sorted(range(len(dets)), key=lambda i: _det_order(dets[i], i))
    for i in order:
        d = dets[i]
        best_j, best_iou = -1, iou_threshold
        for j in gt_index.get((d.image_id, d.class_id), ()):
            if matched[j]:
                continue
            v = iou(d.box, gts[j].box)
            if v > best_iou or (v == best_iou and best_j == -1 and v >= iou_threshold):
                best_j, best_iou = j, v
        if best_j >= 0:
            matched[best_j] = True
            tp[i] = True
    fn = sum(1 for m in matched if not m)
    return tp, fn


def precision_recall_f1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Counting-based precision/recall/F1 with zero conventions (never NaN)."""
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2.0 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


# ---------------------------------------------------------------------------
# average precision

def _pr_points(scored_flags: list[tuple[float, bool]], gt_count: int):
    """Cumulative (recall, precision) arrays from (score, tp) pairs."""
    flags = [tp for _, tp in sorted(scored_flags, key=lambda e: -e[0])]
    tp_cum = np.cumsum(np.asarray(flags, dtype=np.float64))
    fp_cum = np.cumsum(1.0 - np.asarray(flags, dtype=np.float64))
    recall = tp_cum / gt_count if gt_count > 0 else np.zeros_like(tp_cum)
    precision = tp_cum / (tp_cum + fp_cum)
    return recall, precision


def average_precision(scored_flags: list[tuple[float, bool]], gt_count: int,
                      interp: str = "101pt") -> float:
    """AP from (score, is_tp) pairs for one class.

    ``interp`` is "101pt" (mean over the recall grid 0.00..1.00 of the max
    precision at recall >= r) or "exact" (all-points area under the
    interpolated curve).
    """
    if gt_count == 0 or not scored_flags:
        return 0.0
    recall, precision = _pr_points(scored_flags, gt_count)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    if interp == "101pt":
        grid = np.arange(101) / 100.0
        idx = np.searchsorted(recall, grid - 1e-10, side="left")
        vals = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
        return float(vals.mean())
    if interp == "exact":
        prev_r = 0.0
        area = 0.0
        for r, p in zip(recall, envelope):
            area += (r - prev_r) * p
            prev_r = r
        return float(area)
    raise ValueError(f"unknown interpolation {interp!r}")


def map_suite(dets: Sequence[Detection], gts: Sequence[GroundTruthObject],
              num_classes: int, conf_threshold: float = 0.25,
              interp: str = "101pt") -> MetricsReport:
    """Full evaluation: AP per class at the 10 IoU thresholds, the two mAP
    aggregates, and micro precision/recall/F1 at IoU 0.5 for detections with
    score >= conf_threshold.

    Classes with no ground truth anywhere are excluded from the means.
    """
    for d in dets:
        if not 0 <= d.class_id < num_classes:
            raise ValueError(f"detection class_id {d.class_id} outside [0, {num_classes})")
    for g in gts:
        if not 0 <= g.class_id < num_classes:
            raise ValueError(f"ground-truth class_id {g.class_id} outside [0, {num_classes})")
    gt_counts = {c: sum(1 for g in gts if g.class_id == c) for c in range(num_classes)}
    evaluated = tuple(c for c in range(num_classes) if gt_counts[c] > 0)
    report = MetricsReport(conf_threshold=conf_threshold, classes_evaluated=evaluated)
    if not evaluated:
        report.defined = False
        return report

    for c in evaluated:
        report.per_class_ap[c] = {}
        class_dets = [d for d in dets if d.class_id == c]
        class_gts = [g for g in gts if g.class_id == c]
        for thr in IOU_THRESHOLDS:
            tp_flags, _ = match(class_dets, class_gts, thr)
            scored = [(d.score, flag) for d, flag in zip(class_dets, tp_flags)]
            report.per_class_ap[c][thr] = average_precision(scored, gt_counts[c], interp)

    report.map50 = float(np.mean([report.per_class_ap[c][0.5] for c in evaluated]))
    report.map50_95 = float(np.mean([report.per_class_ap[c][t]
                                     for c in evaluated for t in IOU_THRESHOLDS]))

    conf_dets = [d for d in dets if d.score >= conf_threshold]
    tp_flags, fn = match(conf_dets, list(gts), 0.5)
    tp = sum(tp_flags)
    fp = len(tp_flags) - tp
    report.precision, report.recall, report.f1 = precision_recall_f1(tp, fp, fn)
    return report
