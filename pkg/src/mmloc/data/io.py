"""Dataset directory layout.

::

    scenes/<scene_id>.png
    sketches/<category>/<pool>_<k>.png     pool is "train" or "test"
    annotations.json                       COCO-like, images carry a "split" field
    gloss.tsv                              name<TAB>gloss
    split.json                             {"seen": [...], "unseen": [...], "seed": s}
"""

import json
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import DataError
from .gloss import Vocabulary, gloss_lookup, load_gloss_table, write_gloss_table
from .loaders import load_coco_annotations
from .shapes import CategorySpec
from .synthetic import DatasetConfig, SplitSpec, SyntheticDataset


def write_dataset(ds, out_dir):
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    ann_id = 0
    for split_name, scenes in (("train", ds.train), ("test", ds.test)):
        for scene in scenes:
            fname = f"scenes/{scene.scene_id}.png"
            Image.fromarray(scene.image).save(out / fname)
            h, w = scene.image.shape[:2]
            images.append({"id": scene.scene_id, "file_name": fname, "width": w, "height": h,
                           "split": split_name})
            for box, cat in zip(scene.boxes, scene.categories):
                x1, y1, x2, y2 = (float(v) for v in box)
                annotations.append({"id": ann_id, "image_id": scene.scene_id, "category_id": int(cat),
                                    "bbox": [x1, y1, x2 - x1, y2 - y1],
                                    "area": (x2 - x1) * (y2 - y1), "iscrowd": 0})
                ann_id += 1
    cats = [{"id": c.id, "name": c.name, "outline": c.outline} for c in ds.categories]
    info = {"generator": "mmloc.synthetic", "seed": ds.seed,
            "config": vars(ds.config) if ds.config is not None else None}
    doc = {"info": info, "images": images, "annotations": annotations, "categories": cats}
    (out / "annotations.json").write_text(json.dumps(doc, indent=1), encoding="utf-8")

    names = {c.id: c.name for c in ds.categories}
    for pool_name, pool in (("train", ds.sketches_train), ("test", ds.sketches_test)):
        for cid, rasters in pool.items():
            d = out / "sketches" / names[cid]
            d.mkdir(parents=True, exist_ok=True)
            for k, r in enumerate(rasters):
                Image.fromarray(np.rint(r * 255).astype(np.uint8)).save(d / f"{pool_name}_{k:04d}.png")
    write_gloss_table(ds.gloss_table, out / "gloss.tsv")
    (out / "split.json").write_text(json.dumps(ds.split.to_json()), encoding="utf-8")
    return out


def read_dataset(data_dir):
    root = Path(data_dir)
    if not (root / "annotations.json").is_file():
        raise DataError(f"{root}: no annotations.json")
    scenes, cat_records = load_coco_annotations(root / "annotations.json")
    try:
        split_doc = json.loads((root / "split.json").read_text(encoding="utf-8"))
        split = SplitSpec(list(split_doc["seen"]), list(split_doc["unseen"]), int(split_doc["seed"]))
        info = json.loads((root / "annotations.json").read_text(encoding="utf-8")).get("info") or {}
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{root}: bad split.json ({exc})") from None
    table = load_gloss_table(root / "gloss.tsv")
    vocab = Vocabulary.from_table(table)
    categories = []
    for rec in cat_records:
        if "outline" not in rec:
            raise DataError(f"category {rec['name']!r} lacks an outline field")
        spec = CategorySpec(rec["id"], rec["name"], rec["outline"])
        spec.gloss = gloss_lookup(spec.name, table, vocab).tokens
        categories.append(spec)
    train = [s for s in scenes if s.meta.get("split") == "train"]
    test = [s for s in scenes if s.meta.get("split") == "test"]
    for s in scenes:
        if s.image is None:
            raise DataError(f"scene {s.scene_id}: image file missing")

    pools = {"train": {}, "test": {}}
    for c in categories:
        d = root / "sketches" / c.name
        for pool_name in pools:
            files = sorted(d.glob(f"{pool_name}_*.png")) if d.is_dir() else []
            if files:
                pools[pool_name][c.id] = np.stack(
                    [np.asarray(Image.open(f).convert("L"), dtype=np.float32) / 255.0 for f in files]
                )
    cfg = DatasetConfig(**info["config"]) if info.get("config") else None
    return SyntheticDataset(train, test, categories, split, pools["train"], pools["test"],
                            cfg, int(info.get("seed", split.seed)), table)
