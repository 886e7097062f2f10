"""Datasets: synthetic shapes, a COCO-format subset reader/writer, augmentation, batching."""
from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image

from .boxes import cxcywh_to_xyxy
from .errors import ParseError
from .losses import Targets, drop_degenerate
from .uqr import DEFAULT_COEFFS, DEFAULT_RESOLUTION, encode_instance

SHAPE_CLASSES = ("rectangle", "disk")
DISK_AREA_TOLERANCE = 0.05


@dataclass
class DetectionSample:
    image: np.ndarray                      # (H, W, 3) uint8
    labels: np.ndarray                     # (n,) int
    boxes: np.ndarray                      # (n, 4) normalized cxcywh
    masks: np.ndarray | None = None        # (n, H, W) bool
    image_id: int = 0
    file_name: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]

    def validate(self) -> None:
        if self.image.ndim != 3 or self.image.shape[2] != 3 or self.image.dtype != np.uint8:
            raise ValueError("image must be HxWx3 uint8")
        xyxy = cxcywh_to_xyxy(self.boxes)
        if len(xyxy) and (xyxy.min() < -1e-9 or xyxy.max() > 1 + 1e-9):
            raise ValueError("boxes must lie within [0, 1]")
        if self.masks is not None and self.masks.shape != (len(self.labels),) + self.size:
            raise ValueError("masks must be (n, H, W)")


# -- synthetic shapes -----------------------------------------------------------------

@dataclass(frozen=True)
class ShapeSpec:
    image_size: int = 64
    classes: tuple[str, ...] = SHAPE_CLASSES
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 8
    max_size: int = 28
    max_iou: float = 0.3


def _iou_xyxy(a, b) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def _shape_mask(kind: str, size: int, rng: np.random.Generator, spec: ShapeSpec):
    yy, xx = np.mgrid[0:size, 0:size]
    extent = int(rng.integers(spec.min_size, spec.max_size + 1))
    if kind == "rectangle":
        w = extent
        h = int(rng.integers(spec.min_size, spec.max_size + 1))
        x0 = int(rng.integers(0, size - w + 1))
        y0 = int(rng.integers(0, size - h + 1))
        mask = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
    else:
        r = extent / 2.0
        # small disks alias badly for some sub-pixel centres; re-draw until the area is faithful
        for _ in range(100):
            cx = rng.uniform(r, size - r)
            cy = rng.uniform(r, size - r)
            mask = (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r * r
            if abs(mask.sum() / (np.pi * r * r) - 1.0) <= DISK_AREA_TOLERANCE:
                break
    ys, xs = np.nonzero(mask)
    box = (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)
    return mask, box


def synth_shapes(seed: int, count: int, spec: ShapeSpec = ShapeSpec()) -> list[DetectionSample]:
    """Deterministic images of rectangles and disks with exact boxes and amodal masks.

    Objects are at least ``min_size`` pixels across, pairwise box IoU never
    exceeds ``max_iou``, and each disk covers pi r^2 pixels to within 5%.
    """
    rng = np.random.default_rng(seed)
    s = spec.image_size
    out = []
    for idx in range(count):
        bg = rng.integers(0, 90, size=3)
        image = np.clip(bg + rng.normal(0, 6, size=(s, s, 3)), 0, 255)
        n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
        labels, boxes, masks = [], [], []
        attempts = 0
        while len(labels) < n and attempts < 200:
            attempts += 1
            cls = int(rng.integers(len(spec.classes)))
            mask, box = _shape_mask(spec.classes[cls], s, rng, spec)
            if any(_iou_xyxy(box, b) > spec.max_iou for b in boxes):
                continue
            labels.append(cls)
            boxes.append(box)
            masks.append(mask)
        for mask in masks:
            color = rng.integers(140, 256, size=3)
            image[mask] = color
        xyxy = np.array(boxes, dtype=np.float64).reshape(-1, 4) / s
        cxcywh = np.stack([(xyxy[:, 0] + xyxy[:, 2]) / 2, (xyxy[:, 1] + xyxy[:, 3]) / 2,
                           xyxy[:, 2] - xyxy[:, 0], xyxy[:, 3] - xyxy[:, 1]], -1)
        out.append(DetectionSample(image.astype(np.uint8), np.array(labels), cxcywh,
                                   np.array(masks, dtype=bool).reshape(-1, s, s), image_id=idx,
                                   file_name=f"{idx:06d}.png"))
    return out


# -- rasterization and RLE ------------------------------------------------------------

def rasterize_polygon(points: Sequence[float], h: int, w: int) -> np.ndarray:
    """Fill a flat [x0, y0, x1, y1, ...] polygon into an h x w bool mask.

    A pixel is inside when its centre is, by the even-odd crossing rule.
    """
    xs = np.asarray(points[0::2], dtype=np.float64)
    ys = np.asarray(points[1::2], dtype=np.float64)
    px = np.arange(w) + 0.5
    py = np.arange(h) + 0.5
    inside = np.zeros((h, w), dtype=bool)
    for x0, y0, x1, y1 in zip(xs, ys, np.roll(xs, -1), np.roll(ys, -1)):
        if y0 == y1:
            continue
        spans = (py >= min(y0, y1)) & (py < max(y0, y1))
        cross_x = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= spans[:, None] & (px[None, :] < cross_x[:, None])
    return inside


def shoelace_area(points: Sequence[float]) -> float:
    x = np.asarray(points[0::2], dtype=np.float64)
    y = np.asarray(points[1::2], dtype=np.float64)
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def rle_encode(mask: np.ndarray) -> dict:
    """Uncompressed COCO RLE: column-major run lengths starting with a zero run."""
    flat = np.asarray(mask, dtype=bool).reshape(-1, order="F")
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": [int(c) for c in counts]}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=bool)
    pos, val = 0, False
    for c in rle["counts"]:
        if val:
            flat[pos:pos + c] = True
        pos += c
        val = not val
    return flat.reshape((h, w), order="F")


# -- COCO subset ----------------------------------------------------------------------

def _byte_offset(text: str, char_pos: int) -> int:
    return len(text[:char_pos].encode("utf-8"))


def load_coco_json(path: str | os.PathLike, image_root: str | os.PathLike | None = None) -> Iterator[DetectionSample]:
    """Stream samples from a COCO-style file with images/annotations/categories arrays.

    Categories map to contiguous labels in ascending id order. Annotations
    naming an unknown category are skipped with a warning. Polygon
    segmentations are rasterized; RLE segmentations are decoded. Images are
    read from ``image_root / file_name`` when present, otherwise left black.
    """
    path = Path(path)
    raw = path.read_bytes()
    text = raw.decode("utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON in {path}: {exc.msg}", offset=_byte_offset(text, exc.pos)) from exc
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key), list):
            raise ParseError(f"{path}: missing '{key}' array", offset=0)
    cat_ids = sorted(c["id"] for c in doc["categories"])
    label_of = {cid: i for i, cid in enumerate(cat_ids)}
    by_image: dict[int, list[dict]] = {}
    for ann in doc["annotations"]:
        if ann.get("category_id") not in label_of:
            warnings.warn(f"annotation {ann.get('id')} has unknown category {ann.get('category_id')}; skipped",
                          stacklevel=2)
            continue
        by_image.setdefault(ann["image_id"], []).append(ann)
    root = Path(image_root) if image_root is not None else path.parent
    for info in doc["images"]:
        h, w = int(info["height"]), int(info["width"])
        file = root / info.get("file_name", "")
        if info.get("file_name") and file.is_file():
            image = np.asarray(Image.open(file).convert("RGB"), dtype=np.uint8)
        else:
            image = np.zeros((h, w, 3), dtype=np.uint8)
        labels, boxes, masks = [], [], []
        for ann in by_image.get(info["id"], []):
            x, y, bw, bh = [float(v) for v in ann["bbox"]]
            labels.append(label_of[ann["category_id"]])
            boxes.append([(x + bw / 2) / w, (y + bh / 2) / h, bw / w, bh / h])
            seg = ann.get("segmentation")
            if isinstance(seg, list) and seg:
                m = np.zeros((h, w), dtype=bool)
                for poly in seg:
                    m |= rasterize_polygon(poly, h, w)
                masks.append(m)
            elif isinstance(seg, dict):
                masks.append(rle_decode(seg))
            else:
                masks.append(None)
        mask_arr = None
        if labels and all(m is not None for m in masks):
            mask_arr = np.stack(masks)
        elif not labels:
            mask_arr = np.zeros((0, h, w), dtype=bool)
        yield DetectionSample(image, np.array(labels, dtype=np.int64), np.array(boxes).reshape(-1, 4), mask_arr,
                              image_id=int(info["id"]), file_name=info.get("file_name", ""))


def write_coco_json(samples: Iterable[DetectionSample], path: str | os.PathLike,
                    categories: Sequence[str] = SHAPE_CLASSES, image_dir: str | os.PathLike | None = None) -> None:
    """Write samples as a COCO-style annotation file (boxes in pixels, RLE masks)."""
    images, anns = [], []
    ann_id = 1
    for s in samples:
        h, w = s.size
        images.append({"id": int(s.image_id), "file_name": s.file_name, "height": h, "width": w})
        if image_dir is not None and s.file_name:
            Image.fromarray(s.image).save(Path(image_dir) / s.file_name)
        for j, (lab, box) in enumerate(zip(s.labels, s.boxes)):
            cx, cy, bw, bh = box
            ann = {"id": ann_id, "image_id": int(s.image_id), "category_id": int(lab) + 1,
                   "bbox": [float((cx - bw / 2) * w), float((cy - bh / 2) * h), float(bw * w), float(bh * h)],
                   "area": float(bw * w * bh * h), "iscrowd": 0}
            if s.masks is not None:
                ann["segmentation"] = rle_encode(s.masks[j])
            anns.append(ann)
            ann_id += 1
    doc = {"images": images, "annotations": anns,
           "categories": [{"id": i + 1, "name": n} for i, n in enumerate(categories)]}
    Path(path).write_text(json.dumps(doc))


def write_results_json(detections: Sequence[dict], image_ids: Sequence[int], path: str | os.PathLike,
                       masks: Sequence[Sequence[np.ndarray]] | None = None) -> None:
    """Results file: one entry per detection with xywh box, score, category and optional RLE."""
    out = []
    for i, (det, img_id) in enumerate(zip(detections, image_ids)):
        for j, (score, label, box) in enumerate(zip(det["scores"], det["labels"], det["boxes"])):
            x0, y0, x1, y1 = [float(v) for v in box]
            entry = {"image_id": int(img_id), "category_id": int(label) + 1,
                     "bbox": [x0, y0, x1 - x0, y1 - y0], "score": float(score)}
            if masks is not None:
                entry["segmentation"] = rle_encode(masks[i][j])
            out.append(entry)
    Path(path).write_text(json.dumps(out))


# -- augmentation ---------------------------------------------------------------------

TOY_SCALES = tuple(range(48, 81, 4))
TOY_MAX_LONG = 133


def resize_sample(sample: DetectionSample, new_h: int, new_w: int) -> DetectionSample:
    h, w = sample.size
    if (new_h, new_w) == (h, w):
        return sample
    image = np.asarray(Image.fromarray(sample.image).resize((new_w, new_h), Image.BILINEAR), dtype=np.uint8)
    masks = None
    if sample.masks is not None:
        masks = np.stack([np.asarray(Image.fromarray(m.astype(np.uint8) * 255).resize((new_w, new_h), Image.NEAREST)) > 127
                          for m in sample.masks]) if len(sample.masks) else np.zeros((0, new_h, new_w), dtype=bool)
    return DetectionSample(image, sample.labels.copy(), sample.boxes.copy(), masks, sample.image_id, sample.file_name)


def scale_augment(sample: DetectionSample, rng: np.random.Generator, scales: Sequence[int] = TOY_SCALES,
                  max_long: int = TOY_MAX_LONG) -> DetectionSample:
    """Resize so the short side is a random choice from ``scales`` with the long side capped.

    Boxes are normalized, so they carry over unchanged.
    """
    target = int(rng.choice(scales))
    return resize_to_short_side(sample, target, max_long)


def resize_to_short_side(sample: DetectionSample, short: int, max_long: int = TOY_MAX_LONG) -> DetectionSample:
    h, w = sample.size
    scale = short / min(h, w)
    if max(h, w) * scale > max_long:
        scale = max_long / max(h, w)
    return resize_sample(sample, max(1, int(round(h * scale))), max(1, int(round(w * scale))))


def mask_box(mask: np.ndarray) -> np.ndarray | None:
    """Tight pixel xyxy box of a bool mask, or None when empty."""
    ys, xs = np.nonzero(mask)
    if not len(xs):
        return None
    return np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)


# -- batching -------------------------------------------------------------------------

@dataclass
class Batch:
    images: np.ndarray                       # (B, Hp, Wp, 3) normalized float, zero padded
    image_sizes: list[tuple[int, int]]
    targets: Targets
    samples: list[DetectionSample] = field(repr=False, default_factory=list)


def collate(samples: Sequence[DetectionSample], num_classes: int, dtype=np.float32, stride: int = 32,
            mask_vectors: bool = False, class_masks: bool = False, mask_resolution: int = DEFAULT_RESOLUTION,
            mask_coeffs: int = DEFAULT_COEFFS) -> Batch:
    from .model import normalize_images  # local import keeps data free of model import cycles at load

    hs = [s.size[0] for s in samples]
    ws = [s.size[1] for s in samples]
    hp, wp = -(-max(hs) // stride) * stride, -(-max(ws) // stride) * stride
    images = np.zeros((len(samples), hp, wp, 3), dtype=dtype)
    labels, boxes, vectors = [], [], []
    cmask = np.zeros((len(samples), hp, wp, num_classes), dtype=np.float64) if class_masks else None
    for i, s in enumerate(samples):
        h, w = s.size
        images[i, :h, :w] = normalize_images(s.image[None], dtype)[0]
        lab, box, masks = drop_degenerate(s.labels, s.boxes, s.masks)
        labels.append(lab)
        boxes.append(box)
        if mask_vectors:
            if masks is None:
                raise ValueError("mask vectors requested but sample has no masks")
            xyxy = cxcywh_to_xyxy(box) * np.array([w, h, w, h])
            vectors.append(np.array([encode_instance(m, b, mask_resolution, mask_coeffs) for m, b in zip(masks, xyxy)])
                           .reshape(-1, mask_coeffs))
        if class_masks and masks is not None:
            for m, c in zip(masks, lab):
                cmask[i, :h, :w, c] = np.maximum(cmask[i, :h, :w, c], m)
    targets = Targets(labels, boxes, vectors if mask_vectors else None, cmask)
    return Batch(images, list(zip(hs, ws)), targets, list(samples))
