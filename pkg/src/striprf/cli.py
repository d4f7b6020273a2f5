"""Command-line surface: forward inference, evaluation, self-checks, benchmark.

Exit codes: 0 success, 1 check failure, 2 input/parse error.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time

import numpy as np

from .io import (AnnotatedImage, AnnotatedObject, AnnotationDoc,
                 DEFAULT_CLASS_NAMES, FileFormatError, read_annotations,
                 read_tensor, read_weights, write_annotations)
from .metrics import Detection, GroundTruthObject, IOU_THRESHOLDS, decode, map_suite, nms
from .model import (ConfigError, ModelConfig, WeightMismatchError, build_model,
                    forward, init_params)
from .selfcheck import gradient_battery, oracle_battery
from .tensor import ShapeError, Tensor

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INPUT_ERROR = 2


def _load_config(path) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as f:
        return ModelConfig.from_dict(json.load(f))


def _class_names(num_classes: int) -> list[str]:
    if num_classes == len(DEFAULT_CLASS_NAMES):
        return list(DEFAULT_CLASS_NAMES)
    return [f"c{i}" for i in range(num_classes)]


def cmd_forward(args) -> int:
    cfg = _load_config(args.model)
    store = read_weights(args.weights)
    x = read_tensor(args.input)
    if x.dtype != np.float32:
        x = Tensor(x.data, dtype=np.float32)  # inference runs in 32-bit
    graph = build_model(cfg)
    maps = forward(graph, store, x)
    dets = decode(maps, graph.strides, args.conf, image_size=(x.dims[2], x.dims[3]))
    dets = nms(dets, args.nms_iou)
    images = []
    for i in range(x.dims[0]):
        objects = [AnnotatedObject(class_id=d.class_id, bbox=d.box, score=d.score)
                   for d in dets if d.image_id == i]
        images.append(AnnotatedImage(id=i, width=x.dims[3], height=x.dims[2], objects=objects))
    doc = AnnotationDoc(images=images, class_names=_class_names(cfg.num_classes))
    write_annotations(args.out, doc)
    print(f"wrote {sum(len(im.objects) for im in images)} detections "
          f"over {len(images)} image(s) to {args.out}")
    return EXIT_OK


def _doc_to_objects(doc: AnnotationDoc, with_scores: bool):
    dets, gts = [], []
    for img in doc.images:
        for o in img.objects:
            if with_scores:
                if o.score is None:
                    raise FileFormatError(f"image {img.id}: detection object missing score")
                dets.append(Detection(image_id=img.id, class_id=o.class_id,
                                      box=o.bbox, score=o.score))
            else:
                gts.append(GroundTruthObject(image_id=img.id, class_id=o.class_id, box=o.bbox))
    return dets if with_scores else gts


def cmd_eval(args) -> int:
    gt_doc = read_annotations(args.gt)
    pred_doc = read_annotations(args.pred)
    if gt_doc.class_names != pred_doc.class_names:
        print(f"error: class names differ: gt={gt_doc.class_names} pred={pred_doc.class_names}",
              file=sys.stderr)
        return EXIT_INPUT_ERROR
    gts = _doc_to_objects(gt_doc, with_scores=False)
    dets = _doc_to_objects(pred_doc, with_scores=True)
    report = map_suite(dets, gts, len(gt_doc.class_names),
                       conf_threshold=args.conf, interp=args.interp)
    if not report.defined:
        print("no ground-truth objects in any class: metrics undefined")
        return EXIT_OK
    print(f"{'class':<12s} {'AP50':>8s} {'AP50:95':>8s}")
    for c in report.classes_evaluated:
        ap50 = report.per_class_ap[c][0.5]
        ap = float(np.mean([report.per_class_ap[c][t] for t in IOU_THRESHOLDS]))
        print(f"{gt_doc.class_names[c]:<12s} {ap50:8.4f} {ap:8.4f}")
    print(f"mAP50 {report.map50:.4f}   mAP50:95 {report.map50_95:.4f}")
    print(f"P {report.precision:.4f}   R {report.recall:.4f}   F1 {report.f1:.4f}"
          f"   (conf >= {args.conf}, IoU 0.50)")
    if args.json:
        payload = {
            "map50": report.map50,
            "map50_95": report.map50_95,
            "precision": report.precision,
            "recall": report.recall,
            "f1": report.f1,
            "conf_threshold": report.conf_threshold,
            "per_class_ap": {gt_doc.class_names[c]: {str(t): v for t, v in aps.items()}
                             for c, aps in report.per_class_ap.items()},
        }
        print(json.dumps(payload, sort_keys=True))
    return EXIT_OK


def _run_checks(seed: int, with_oracles: bool) -> int:
    ok = True
    for r in gradient_battery(seed=seed):
        print(r)
        ok &= r.passed
    if with_oracles:
        for r in oracle_battery(seed=seed):
            print(r)
            ok &= r.passed
    print("all checks passed" if ok else "CHECK FAILURES PRESENT")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_gradcheck(args) -> int:
    return _run_checks(args.seed, with_oracles=False)


def cmd_selftest(args) -> int:
    return _run_checks(args.seed, with_oracles=True)


def cmd_bench(args) -> int:
    if args.size % 32 != 0:
        print(f"error: size {args.size} not divisible by 32", file=sys.stderr)
        return EXIT_INPUT_ERROR
    if args.model:
        cfg = _load_config(args.model)
        cfg.input_size = args.size
        cfg.validate()
    else:
        cfg = ModelConfig(num_classes=4, base_width=16, depth=1, input_size=args.size)
    graph = build_model(cfg)
    store = init_params(graph)
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((1, 3, args.size, args.size)).astype(np.float32))
    for _ in range(3):
        forward(graph, store, x)
    times = []
    for _ in range(args.runs):
        t0 = time.perf_counter()
        forward(graph, store, x)
        times.append((time.perf_counter() - t0) * 1e3)
    mean = statistics.fmean(times)
    stdev = statistics.stdev(times) if len(times) > 1 else 0.0
    print(f"forward {args.size}x{args.size} base_width={cfg.base_width}: "
          f"{mean:.1f} ms/image +/- {stdev:.1f} "
          f"(min {min(times):.1f}, max {max(times):.1f}, {args.runs} runs)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="striprf",
                                 description="strip receptive-field detector toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forward", help="run inference on a tensor file")
    p.add_argument("--model", required=True, help="model config JSON")
    p.add_argument("--weights", required=True, help="SRFW weight file")
    p.add_argument("--input", required=True, help="SRFT input tensor")
    p.add_argument("--out", required=True, help="output detections JSON")
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--nms-iou", type=float, default=0.5)
    p.set_defaults(fn=cmd_forward)

    p = sub.add_parser("eval", help="evaluate detections against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--interp", choices=("101pt", "exact"), default="101pt")
    p.add_argument("--json", action="store_true", help="also print machine-readable JSON")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient battery")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("selftest", help="gradient battery plus oracle equivalences")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_selftest)

    p = sub.add_parser("bench", help="time forward passes")
    p.add_argument("--size", type=int, default=640)
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--model", default=None, help="optional model config JSON")
    p.set_defaults(fn=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (FileFormatError, ConfigError, WeightMismatchError, ShapeError,
            OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
