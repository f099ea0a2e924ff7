"""Readers for COCO-style annotation JSON and QuickDraw NDJSON strokes."""

import json
import logging
import numbers
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from ..errors import DataError
from .synthetic import SceneSample

log = logging.getLogger(__name__)


def _require(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise DataError(f"{where}: missing key {key!r}")
    return obj[key]


def _is_number(x):
    return isinstance(x, numbers.Real) and not isinstance(x, bool) and np.isfinite(x)


def load_coco_annotations(path, image_root=None, load_images=True, stats=None):
    """COCO JSON -> (scenes, categories).

    Boxes go from (x, y, w, h) to corner form and category ids are remapped
    densely in ascending order of the original id. Annotations with w <= 0 or
    h <= 0 are skipped and counted in ``stats["rejected_boxes"]``.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read annotation JSON ({exc})") from None
    for key in ("images", "annotations", "categories"):
        if not isinstance(_require(doc, key, str(path)), list):
            raise DataError(f"{path}: {key!r} must be a list")

    remap, categories = {}, []
    for cat in doc["categories"]:
        cid = _require(cat, "id", "category")
        if not isinstance(cid, (int, str)) or isinstance(cid, bool):
            raise DataError(f"category id {cid!r} must be an int or string")
    try:
        raw_cats = sorted(doc["categories"], key=lambda c: _require(c, "id", "category"))
    except TypeError:
        raise DataError(f"{path}: category ids must be mutually comparable") from None
    for dense, cat in enumerate(raw_cats):
        cid, name = _require(cat, "id", "category"), _require(cat, "name", "category")
        if cid in remap:
            raise DataError(f"duplicate category id {cid!r}")
        remap[cid] = dense
        extra = {k: v for k, v in cat.items() if k not in ("id", "name")}
        categories.append({"id": dense, "name": str(name), "source_id": cid, **extra})

    images = {}
    for img in doc["images"]:
        iid = _require(img, "id", "image")
        if not isinstance(iid, (int, str)) or isinstance(iid, bool):
            raise DataError(f"image id {iid!r} must be an int or string")
        images[iid] = img

    per_image = {iid: ([], []) for iid in images}
    rejected = 0
    for k, ann in enumerate(doc["annotations"]):
        where = f"annotation #{k}"
        iid = _require(ann, "image_id", where)
        if not isinstance(iid, (int, str)) or iid not in images:
            raise DataError(f"{where} references missing image id {iid!r}")
        cid = _require(ann, "category_id", where)
        if not isinstance(cid, (int, str)) or cid not in remap:
            raise DataError(f"{where} references missing category id {cid!r}")
        bbox = _require(ann, "bbox", where)
        if not isinstance(bbox, list) or len(bbox) != 4 or not all(_is_number(v) for v in bbox):
            rejected += 1
            continue
        x, y, w, h = (float(v) for v in bbox)
        if w <= 0 or h <= 0:
            rejected += 1
            continue
        per_image[iid][0].append([x, y, x + w, y + h])
        per_image[iid][1].append(remap[cid])
    if rejected:
        log.warning("%s: rejected %d malformed boxes", path, rejected)
    if stats is not None:
        stats["rejected_boxes"] = rejected

    root = Path(image_root) if image_root is not None else path.parent
    scenes = []
    for iid, img in images.items():
        boxes, labels = per_image[iid]
        pixels = None
        fname = img.get("file_name")
        if load_images and isinstance(fname, str) and (root / fname).is_file():
            try:
                pixels = np.asarray(Image.open(root / fname).convert("RGB"))
            except OSError as exc:
                raise DataError(f"image {fname!r}: {exc}") from None
        scenes.append(SceneSample(pixels, np.array(boxes, dtype=np.float64).reshape(-1, 4),
                                  np.array(labels, dtype=np.int64), str(iid),
                                  {k: v for k, v in img.items() if k != "id"}))
    return scenes, categories


def rasterize_strokes(strokes, size=64):
    """Scale strokes into a ``size`` x ``size`` raster and draw 1-px aliased lines."""
    raster = Image.new("L", (size, size), 0)
    pts = [np.asarray(s[:2], dtype=np.float64) for s in strokes if len(s) >= 2 and len(s[0])]
    if not pts:
        return np.zeros((size, size), dtype=np.float32)
    allp = np.concatenate(pts, axis=1)
    lo = allp.min(axis=1)
    extent = allp.max(axis=1) - lo
    scale = (size - 1) / max(extent.max(), 1e-9)
    pad = ((size - 1) - extent * scale) / 2
    draw = ImageDraw.Draw(raster)
    for p in pts:
        xy = (p - lo[:, None]) * scale + pad[:, None]
        xy = np.rint(xy)
        seq = [tuple(v) for v in xy.T]
        if len(seq) == 1:
            draw.point(seq, fill=255)
        else:
            draw.line(seq, fill=255, width=1)
    return np.asarray(raster, dtype=np.float32) / 255.0


def _valid_drawing(drawing):
    if not isinstance(drawing, list):
        return False
    for stroke in drawing:
        if not isinstance(stroke, list) or len(stroke) < 2:
            return False
        xs, ys = stroke[0], stroke[1]
        if not isinstance(xs, list) or not isinstance(ys, list) or len(xs) != len(ys):
            return False
        if not all(_is_number(v) for v in xs + ys):
            return False
    return True


def load_quickdraw_strokes(path, size=64, stats=None):
    """NDJSON QuickDraw records -> list of rasters in file order.

    Malformed lines are skipped and counted in ``stats["skipped"]``.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: cannot read NDJSON ({exc})") from None
    out, skipped = [], 0
    for line in lines:
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            skipped += 1
            continue
        drawing = rec.get("drawing") if isinstance(rec, dict) else None
        if not _valid_drawing(drawing):
            skipped += 1
            continue
        out.append(rasterize_strokes(drawing, size))
    if skipped:
        log.warning("%s: skipped %d malformed records", path, skipped)
    if stats is not None:
        stats["skipped"] = skipped
    return out
