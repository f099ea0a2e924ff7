"""Synthetic scenes, sketch pools and seen/unseen splits."""

import colorsys
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from ..errors import ConfigError
from ..proposals import box_iou
from .gloss import Vocabulary, default_table, gloss_lookup
from .shapes import catalogue, draw_instance, render_sketch

# stream ids keep the random streams of different artefacts independent
_SPLIT, _TRAIN, _TEST, _SKETCH_TRAIN, _SKETCH_TEST = range(5)


@dataclass
class DatasetConfig:
    num_categories: int = 16
    n_train: int = 500
    n_test: int = 200
    image_size: int = 128
    sketch_size: int = 64
    min_instances: int = 2
    max_instances: int = 4
    min_object: int = 24
    max_object: int = 56
    max_overlap_iou: float = 0.1
    clutter: int = 3
    unseen_fraction: float = 0.25
    split_mode: str = "open"
    sketches_per_category: int = 20
    sketch_jitter: float = 0.3

    def validate(self):
        if self.num_categories < 8:
            raise ConfigError("at least 8 categories are required")
        if self.split_mode not in ("open", "closed"):
            raise ConfigError(f"split_mode must be 'open' or 'closed', got {self.split_mode!r}")
        if not 1 <= self.min_instances <= self.max_instances:
            raise ConfigError("need 1 <= min_instances <= max_instances")
        if self.max_instances < 2:
            raise ConfigError("scenes hold at least two categories, so max_instances must be >= 2")
        if not 0 < self.min_object <= self.max_object < self.image_size:
            raise ConfigError("object sizes must satisfy 0 < min_object <= max_object < image_size")
        if not 0 <= self.max_overlap_iou < 0.5:
            raise ConfigError("max_overlap_iou must lie in [0, 0.5)")
        if self.n_train < 0 or self.n_test < 0 or self.sketches_per_category < 1:
            raise ConfigError("scene and sketch counts must be non-negative (sketches >= 1)")
        if not 0 <= self.sketch_jitter <= 1:
            raise ConfigError("sketch_jitter must lie in [0, 1]")
        if self.split_mode == "open" and not 0 < self.unseen_fraction < 1:
            raise ConfigError("open split needs 0 < unseen_fraction < 1")


@dataclass
class SceneSample:
    image: np.ndarray  # (H, W, 3) uint8
    boxes: np.ndarray  # (n, 4) float, x1 y1 x2 y2
    categories: np.ndarray  # (n,) int
    scene_id: str
    meta: dict = field(default=None, repr=False)

    @property
    def instances(self):
        return list(zip(self.boxes, self.categories.tolist()))

    def boxes_of(self, category):
        return self.boxes[self.categories == category]


@dataclass
class SplitSpec:
    seen: list
    unseen: list
    seed: int

    def __post_init__(self):
        if set(self.seen) & set(self.unseen):
            raise ConfigError("seen and unseen categories overlap")

    @property
    def closed(self):
        return not self.unseen

    def to_json(self):
        return {"seen": sorted(self.seen), "unseen": sorted(self.unseen), "seed": self.seed}


@dataclass
class SyntheticDataset:
    train: list
    test: list
    categories: list
    split: SplitSpec
    sketches_train: dict  # category id -> (n, S, S) float32
    sketches_test: dict
    config: DatasetConfig = field(default=None)
    seed: int = 0
    gloss_table: dict = field(default=None, repr=False)

    def __iter__(self):
        return iter((self.train, self.test, self.categories))

    @property
    def vocab(self):
        return Vocabulary.from_table(self.gloss_table)

    def category_by_name(self, name):
        for c in self.categories:
            if c.name == name:
                return c
        raise KeyError(name)

    def eval_categories(self, split_mode=None):
        mode = split_mode or self.config.split_mode
        if mode == "open":
            return sorted(self.split.unseen)
        return sorted(c.id for c in self.categories)


def make_split(categories, unseen_fraction, seed):
    """Seeded shuffle; the last round(fraction * n) categories become unseen."""
    ids = [c.id if hasattr(c, "id") else int(c) for c in categories]
    if not 0 <= unseen_fraction < 1:
        raise ConfigError(f"unseen_fraction must lie in [0, 1), got {unseen_fraction}")
    n_unseen = int(np.floor(unseen_fraction * len(ids) + 0.5))
    if n_unseen >= len(ids):
        raise ConfigError("split would leave no seen categories")
    rng = np.random.default_rng([seed, _SPLIT])
    order = [ids[i] for i in rng.permutation(len(ids))]
    unseen = sorted(order[len(ids) - n_unseen:]) if n_unseen else []
    seen = sorted(order[: len(ids) - n_unseen])
    return SplitSpec(seen, unseen, seed)


def _random_color(rng, background):
    while True:
        h, s, v = rng.uniform(0, 1), rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0)
        rgb = np.array(colorsys.hsv_to_rgb(h, s, v)) * 255
        if abs(rgb.mean() - background) > 50 or np.ptp(rgb) > 120:
            return rgb.astype(np.uint8)


def _background(rng, size, clutter):
    level = rng.uniform(60, 200)
    img = np.clip(rng.normal(level, 8.0, (size, size, 3)), 0, 255).astype(np.uint8)
    if clutter:
        pil = Image.fromarray(img)
        draw = ImageDraw.Draw(pil)
        for _ in range(clutter):
            p = rng.uniform(0, size, 4)
            col = tuple(int(c) for c in rng.integers(0, 256, 3))
            draw.line([tuple(p[:2]), tuple(p[2:])], fill=col, width=1)
        img = np.asarray(pil).copy()
    return img, level


def render_scene(cfg, categories, rng, scene_id, pool):
    """One scene with 2..max instances drawn from ``pool`` over >= 2 categories."""
    while True:
        scene = _try_scene(cfg, categories, rng, scene_id, pool)
        if len(set(scene.categories.tolist())) >= min(2, len(pool)):
            return scene


def _try_scene(cfg, categories, rng, scene_id, pool):
    size = cfg.image_size
    n = int(rng.integers(max(cfg.min_instances, 2), cfg.max_instances + 1))
    first = rng.choice(pool, 2, replace=False) if len(pool) >= 2 else np.array(pool * 2)
    cats = list(first) + list(rng.choice(pool, n - 2))
    img, level = _background(rng, size, cfg.clutter)
    boxes, labels = [], []
    for c in cats:
        spec = categories[int(c)]
        for _ in range(200):
            side = int(rng.integers(cfg.min_object, cfg.max_object + 1))
            off = rng.uniform(0, size - side, 2)
            probe = np.array([off[0], off[1], off[0] + side, off[1] + side])
            if not boxes or box_iou(probe, np.array(boxes)).max() <= cfg.max_overlap_iou:
                break
        else:
            continue
        trial = img.copy()
        box = draw_instance(trial, spec, side, off, _random_color(rng, level), rng)
        if box is None:
            continue
        if boxes and box_iou(box, np.array(boxes)).max() > cfg.max_overlap_iou:
            continue
        img = trial
        boxes.append(box)
        labels.append(int(c))
    return SceneSample(img, np.array(boxes, dtype=np.float64).reshape(-1, 4),
                       np.array(labels, dtype=np.int64), scene_id)


def _sketch_pool(cfg, categories, ids, seed, stream):
    pool = {}
    for cid in ids:
        rasters = [
            render_sketch(categories[cid], cfg.sketch_jitter,
                          seed=np.random.default_rng([seed, stream, cid, k]).integers(2**31),
                          size=cfg.sketch_size)
            for k in range(cfg.sketches_per_category)
        ]
        pool[cid] = np.stack(rasters).astype(np.float32)
    return pool


def generate_dataset(cfg=None, seed=0, gloss_table=None):
    """Deterministic synthetic benchmark for ``(cfg, seed)``.

    Open split: training scenes and training sketches only use seen
    categories; test scenes draw from every category. Closed split: everything
    uses every category.
    """
    cfg = cfg or DatasetConfig()
    cfg.validate()
    table = dict(default_table() if gloss_table is None else gloss_table)
    categories = catalogue(cfg.num_categories)
    vocab = Vocabulary.from_table(table)
    for c in categories:
        c.gloss = gloss_lookup(c.name, table, vocab).tokens
    if cfg.split_mode == "open":
        split = make_split(categories, cfg.unseen_fraction, seed)
    else:
        split = SplitSpec(sorted(c.id for c in categories), [], seed)
    all_ids = [c.id for c in categories]
    train = [
        render_scene(cfg, categories, np.random.default_rng([seed, _TRAIN, i]), f"train_{i:05d}", split.seen)
        for i in range(cfg.n_train)
    ]
    test = [
        render_scene(cfg, categories, np.random.default_rng([seed, _TEST, i]), f"test_{i:05d}", all_ids)
        for i in range(cfg.n_test)
    ]
    sk_train = _sketch_pool(cfg, categories, split.seen, seed, _SKETCH_TRAIN)
    sk_test = _sketch_pool(cfg, categories, all_ids, seed, _SKETCH_TEST)
    return SyntheticDataset(train, test, categories, split, sk_train, sk_test, cfg, seed, table)


def config_dict(cfg):
    return asdict(cfg)
