"""Bit-exact file formats: SRFT tensors, SRFW weight stores, JSON annotations.

All binary fields are little-endian with explicit magics and version bytes;
writers are deterministic (sorted entries, no timestamps), so identical
inputs always produce byte-identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

TENSOR_MAGIC = b"SRFT"
WEIGHT_MAGIC = b"SRFW"
FORMAT_VERSION = 1
DEFAULT_CLASS_NAMES = ["D00", "D10", "D20", "D40"]


class FileFormatError(ValueError):
    """Input file is malformed, truncated, or of the wrong type."""


# ---------------------------------------------------------------------------
# SRFT: single tensor

def write_tensor(path, t: Tensor):
    """magic 'SRFT', version, dtype byte (0=f32, 1=f64), rank=4, dims, payload."""
    dtype_code = 0 if t.dtype == np.float32 else 1
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<BBB", FORMAT_VERSION, dtype_code, 4))
        f.write(struct.pack("<4I", *t.dims))
        f.write(np.ascontiguousarray(t.data, dtype="<f4" if dtype_code == 0 else "<f8").tobytes())


def read_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 or blob[:4] != TENSOR_MAGIC:
        raise FileFormatError(f"{path}: bad magic (expected SRFT)")
    if len(blob) < 23:
        raise FileFormatError(f"{path}: truncated header")
    version, dtype_code, rank = struct.unpack_from("<BBB", blob, 4)
    if version != FORMAT_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    if dtype_code not in (0, 1):
        raise FileFormatError(f"{path}: unknown dtype code {dtype_code}")
    if rank != 4:
        raise FileFormatError(f"{path}: rank {rank} != 4")
    dims = struct.unpack_from("<4I", blob, 7)
    itemsize = 4 if dtype_code == 0 else 8
    expected = 23 + itemsize * int(np.prod(dims, dtype=np.int64))
    if len(blob) != expected:
        raise FileFormatError(f"{path}: payload is {len(blob) - 23} bytes, expected {expected - 23}")
    dt = np.dtype("<f4" if dtype_code == 0 else "<f8")
    data = np.frombuffer(blob, dtype=dt, count=int(np.prod(dims, dtype=np.int64)), offset=23)
    return Tensor(data.reshape(dims).astype(dt.newbyteorder("=")))


# ---------------------------------------------------------------------------
# SRFW: named weight entries

def write_weights(path, store: dict[str, Tensor]):
    """Entries sorted by name: u16 name length, name, rank byte, dims, f32 payload."""
    names = sorted(store)
    if len(names) != len(set(names)):
        raise FileFormatError("duplicate weight names")
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC)
        f.write(struct.pack("<B", FORMAT_VERSION))
        f.write(struct.pack("<I", len(names)))
        for name in names:
            raw = name.encode("utf-8")
            t = store[name]
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", len(t.dims)))
            f.write(struct.pack(f"<{len(t.dims)}I", *t.dims))
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def read_weights(path) -> dict[str, Tensor]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 or blob[:4] != WEIGHT_MAGIC:
        raise FileFormatError(f"{path}: bad magic (expected SRFW)")
    if len(blob) < 9:
        raise FileFormatError(f"{path}: truncated header")
    version, = struct.unpack_from("<B", blob, 4)
    if version != FORMAT_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    count, = struct.unpack_from("<I", blob, 5)
    pos = 9
    store: dict[str, Tensor] = {}
    prev_name = None
    for _ in range(count):
        if pos + 2 > len(blob):
            raise FileFormatError(f"{path}: truncated at entry name length")
        name_len, = struct.unpack_from("<H", blob, pos)
        pos += 2
        if pos + name_len + 1 > len(blob):
            raise FileFormatError(f"{path}: truncated inside entry name")
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        if prev_name is not None and not name > prev_name:
            raise FileFormatError(f"{path}: entries not sorted ({prev_name!r} then {name!r})")
        prev_name = name
        rank = blob[pos]
        pos += 1
        if pos + 4 * rank > len(blob):
            raise FileFormatError(f"{path}: truncated inside dims of {name!r}")
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        if pos + 4 * size > len(blob):
            raise FileFormatError(f"{path}: truncated inside payload of {name!r}")
        data = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).astype(np.float32)
        pos += 4 * size
        store[name] = Tensor(data.reshape(dims))
    if pos != len(blob):
        raise FileFormatError(f"{path}: {len(blob) - pos} trailing bytes")
    return store


# ---------------------------------------------------------------------------
# JSON annotation / detection documents

@dataclass
class AnnotatedObject:
    class_id: int
    bbox: tuple[float, float, float, float]
    score: float | None = None


@dataclass
class AnnotatedImage:
    id: int
    width: int
    height: int
    objects: list[AnnotatedObject] = field(default_factory=list)


@dataclass
class AnnotationDoc:
    images: list[AnnotatedImage] = field(default_factory=list)
    class_names: list[str] = field(default_factory=lambda: list(DEFAULT_CLASS_NAMES))


def _clamp_bbox(bbox, width, height):
    x, y, w, h = (float(v) for v in bbox)
    x1 = min(max(x, 0.0), float(width))
    y1 = min(max(y, 0.0), float(height))
    x2 = min(max(x + w, 0.0), float(width))
    y2 = min(max(y + h, 0.0), float(height))
    return (x1, y1, max(x2 - x1, 0.0), max(y2 - y1, 0.0))


def annotation_to_dict(doc: AnnotationDoc) -> dict:
    return {
        "class_names": list(doc.class_names),
        "images": [
            {
                "id": img.id,
                "width": img.width,
                "height": img.height,
                "objects": [
                    {"class_id": o.class_id, "bbox": list(o.bbox)}
                    | ({"score": o.score} if o.score is not None else {})
                    for o in img.objects
                ],
            }
            for img in doc.images
        ],
    }


def annotation_from_dict(d: dict) -> AnnotationDoc:
    try:
        class_names = list(d["class_names"])
        images = []
        for img in d["images"]:
            objects = []
            for o in img.get("objects", []):
                class_id = int(o["class_id"])
                if not 0 <= class_id < len(class_names):
                    raise FileFormatError(
                        f"class_id {class_id} outside class_names of length {len(class_names)}")
                bbox = _clamp_bbox(o["bbox"], img["width"], img["height"])
                score = o.get("score")
                objects.append(AnnotatedObject(class_id=class_id, bbox=bbox,
                                               score=None if score is None else float(score)))
            images.append(AnnotatedImage(id=int(img["id"]), width=int(img["width"]),
                                         height=int(img["height"]), objects=objects))
    except (KeyError, TypeError) as exc:
        raise FileFormatError(f"malformed annotation document: {exc}") from exc
    return AnnotationDoc(images=images, class_names=class_names)


def write_annotations(path, doc: AnnotationDoc):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(annotation_to_dict(doc), f, indent=1, sort_keys=True)
        f.write("\n")


def read_annotations(path) -> AnnotationDoc:
    with open(path, "r", encoding="utf-8") as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as exc:
            raise FileFormatError(f"{path}: invalid JSON: {exc}") from exc
    return annotation_from_dict(d)
