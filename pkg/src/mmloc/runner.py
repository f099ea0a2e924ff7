"""Inference, evaluation and grid sweeps."""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data.gloss import class_tokens, gloss_lookup
from .data.synthetic import generate_dataset
from .errors import ConfigError, DataError, MmlocError
from .fusion import ScoredProposal, late_fusion
from .metrics import GroundTruth, Prediction, build_report, proposal_recall
from .model import COMPATIBLE, QueryBatch, images_to_tensor, sketches_to_tensor
from .scoring import margins_from_m
from .training import train

log = logging.getLogger(__name__)

MULTI_SKETCH = ("feature_multi_sketch", "attention_multi_sketch")


@dataclass
class QueryBundle:
    """Sketch raster(s) plus gloss tokens (and optional class tokens) for one category."""

    sketches: list
    tokens: list
    category: object = None
    class_tokens: list = None

    def __post_init__(self):
        if not len(self.sketches):
            raise DataError("a query bundle needs at least one sketch")
        if not len(self.tokens):
            raise DataError(f"empty gloss for {self.category!r}")


@dataclass
class QueryResult:
    category: object
    scored: list  # ScoredProposal, best first
    proposals: list = field(default_factory=list)  # RPN proposals, objectness order
    attention: np.ndarray = None


def bundle_for(ckpt, name, sketches, table=None):
    """Query bundle for a category name using the checkpoint vocabulary."""
    tokens = gloss_lookup(name, table, ckpt.vocab).tokens
    return QueryBundle(list(sketches), tokens, name, class_tokens(name, ckpt.vocab).tokens)


def _query_batch(bundles, n_sketches):
    sketches = []
    for b in bundles:
        s = list(b.sketches)
        if len(s) < n_sketches:
            s = [s[i % len(s)] for i in range(n_sketches)]
        sketches.append(s[:n_sketches])
    cls = [b.class_tokens for b in bundles]
    return QueryBatch(sketches_to_tensor(sketches), [b.tokens for b in bundles],
                      cls if all(c is not None for c in cls) else None)


def _pass(model, image_fm, q_img, qb, fusion, bypass, image_size, n_props, n_score):
    cfg = model.cfg
    enc = model.encode_queries(qb, fusion)
    maps, att = model.attend(image_fm[torch.as_tensor(q_img)], enc, fusion, bypass)
    _, _, props = model.rpn_proposals(image_fm, maps, q_img, bypass, image_size, n_props)
    boxes, q_index = [], []
    for i, p in enumerate(props):
        for prop in p[:n_score]:
            boxes.append(prop.box)
            q_index.append(i)
    out = []
    if boxes:
        r = model.roi_vectors(maps, np.array(boxes), np.array(q_index))
        q = model.fused_queries(r, q_index, enc, fusion)
        a = model.score_rois(r, q).numpy()
        qv = q.numpy()
    k = 0
    for i, p in enumerate(props):
        scored = []
        for prop in p[:n_score]:
            scored.append(ScoredProposal(prop, float(a[k]), qv[k]))
            k += 1
        scored.sort(key=lambda s: -s.a)
        out.append(QueryResult(None, scored, p, None if att is None else att[i].numpy()))
    return out


def run_queries(model, images, per_image_bundles, fusion="ops", bypass=False, top_n=None, n_props=None):
    """Localize every bundle against its image. Returns one list of QueryResult per image.

    All ``n_props`` RPN proposals are scored; the best ``top_n`` by score are kept.
    """
    cfg = model.cfg
    if fusion not in COMPATIBLE.get(cfg.fusion_kind, ()):
        raise ConfigError(
            f"fusion {fusion!r} is not available for a model trained with fusion {cfg.fusion_kind!r}"
        )
    top_n = cfg.top_n_eval if top_n is None else top_n
    n_props = max(cfg.recall_budget, top_n) if n_props is None else n_props
    n_sketch = cfg.n_query_sketches if fusion in MULTI_SKETCH else 1
    flat = [(b, bundle) for b, bundles in enumerate(per_image_bundles) for bundle in bundles]
    results = [[] for _ in per_image_bundles]
    if not flat:
        return results
    x = images_to_tensor(images)
    size = (x.shape[-1], x.shape[-2])
    q_img = np.array([b for b, _ in flat])
    with torch.no_grad():
        image_fm = model.encode_images(x)
        qb = _query_batch([bd for _, bd in flat], n_sketch)
        if fusion == "late":
            parts = [_pass(model, image_fm, q_img, qb, f, bypass, size, n_props, n_props) for f in ("sketch", "gloss")]
            out = []
            for rs, rg in zip(*parts):
                merged = late_fusion([rs.scored, rg.scored], top_n)
                out.append(QueryResult(None, merged, rs.proposals, rs.attention))
        else:
            out = _pass(model, image_fm, q_img, qb, fusion, bypass, size, n_props, n_props)
    for (b, bundle), res in zip(flat, out):
        res.category = bundle.category
        res.scored = res.scored[:top_n]
        results[b].append(res)
    return results


def localize(ckpt, image, queries, fusion="ops", top_n=None, bypass=False):
    """Scored proposals for each query bundle on one image, best first."""
    if isinstance(queries, QueryBundle):
        queries = [queries]
    res = run_queries(ckpt.model, [image], [list(queries)], fusion, bypass, top_n)[0]
    return [r.scored for r in res]


def load_eval_dataset(ckpt, dataset=None):
    ds = dataset if dataset is not None else generate_dataset(ckpt.config.data, ckpt.config.seed)
    expected = ckpt.meta.get("split")
    if expected is not None and ds.split.to_json()["unseen"] != expected["unseen"]:
        raise ConfigError("dataset split does not match the split the checkpoint was trained on")
    return ds


def evaluate(ckpt, split="open", fusion="ops", dataset=None, bypass=False, max_scenes=None, batch_size=8):
    """EvalReport over test scenes x query categories (unseen only for the open split)."""
    cfg = ckpt.config
    if split not in ("open", "closed"):
        raise ConfigError(f"split must be 'open' or 'closed', got {split!r}")
    if split != cfg.data.split_mode:
        raise ConfigError(f"checkpoint was trained for the {cfg.data.split_mode} split, not {split}")
    ds = load_eval_dataset(ckpt, dataset)
    cats = ds.eval_categories(split)
    if not cats:
        raise DataError(f"no evaluation categories for the {split} split")
    names = {c.id: c.name for c in ds.categories}
    specs = {c.id: c for c in ds.categories}
    scenes = ds.test[:max_scenes] if max_scenes is not None else ds.test
    if not scenes:
        raise DataError("the test split is empty")
    n_sketch = cfg.n_query_sketches if fusion in MULTI_SKETCH else 1
    preds, gts, prop_lists, prop_gts = [], [], [], []
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start:start + batch_size]
        per_image = []
        for k, scene in enumerate(chunk):
            rng = np.random.default_rng([cfg.seed, 7, start + k])
            bundles = []
            for c in cats:
                pool = ds.sketches_test[c]
                pick = rng.permutation(len(pool))[:n_sketch]
                bundles.append(QueryBundle([pool[i] for i in pick], specs[c].gloss, c,
                                           class_tokens(names[c], ckpt.vocab).tokens))
            per_image.append(bundles)
        results = run_queries(ckpt.model, [s.image for s in chunk], per_image, fusion, bypass)
        for scene, res in zip(chunk, results):
            for r in res:
                for sp in r.scored:
                    preds.append(Prediction(scene.scene_id, r.category, sp.box, sp.a))
                gt_c = scene.boxes_of(r.category)
                if len(gt_c):
                    prop_lists.append(np.array([p.box for p in r.proposals]).reshape(-1, 4))
                    prop_gts.append(gt_c)
            for box, c in zip(scene.boxes, scene.categories.tolist()):
                if c in cats:
                    gts.append(GroundTruth(scene.scene_id, c, box))
    recall = proposal_recall(prop_lists, prop_gts, 0.5, cfg.recall_budget) if prop_gts else float("nan")
    meta = {
        "fusion": fusion,
        "train_fusion": cfg.fusion_kind,
        "attention_bypassed": bool(bypass),
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "n_scenes": len(scenes),
        "n_queries": len(scenes) * len(cats),
        "recall_budget": cfg.recall_budget,
        "score_head": cfg.score_head,
        **{k: v for k, v in ckpt.meta.items() if k in ("optimizer_reset_between_stages",)},
    }
    return build_report(preds, gts, split, names, recall, meta)


# sweeps

FACTOR_KEYS = {"K": "K", "m": None, "fusion": "fusion_kind", "fusion.kind": "fusion_kind"}


def parse_grid_text(text):
    """``factor = v1, v2, ...`` lines -> {factor: [values]}."""
    grid = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, values = line.partition("=")
        key = key.strip()
        if not sep or key not in FACTOR_KEYS:
            raise ConfigError(f"grid line {lineno}: expected one of {sorted(FACTOR_KEYS)} = values")
        items = [v.strip() for v in values.split(",") if v.strip()]
        grid[key] = [v if key.startswith("fusion") else float(v) for v in items]
    return grid


def sweep_cells(cfg, grid):
    """One-factor-at-a-time cells: every value of every factor, others at the base config."""
    cells = []
    for factor, values in grid.items():
        if factor not in FACTOR_KEYS:
            raise ConfigError(f"unknown sweep factor {factor!r}")
        for v in values:
            if factor == "m":
                mp, mm = margins_from_m(v)
                changes = {"m_plus": mp, "m_minus": mm}
            else:
                changes = {FACTOR_KEYS[factor]: v}
            cells.append((factor, v, changes))
    return cells


def sweep(cfg, grid, out_dir=None, dataset=None, train_fn=train, eval_fusion=None):
    """Train and evaluate one run per grid cell. Failing cells are recorded and skipped."""
    rows = []
    for factor, value, changes in sweep_cells(cfg, grid):
        row = {"factor": factor, "value": value, "ap50": None, "map": None, "proposal_recall": None,
               "split": cfg.data.split_mode, "error": None}
        try:
            cell_cfg = cfg.replace(**changes).validate()
            ckpt = train_fn(cell_cfg, dataset)
            rep = evaluate(ckpt, cell_cfg.data.split_mode, eval_fusion or cell_cfg.fusion_kind, dataset)
            row.update(ap50=rep.ap50, map=rep.map, proposal_recall=rep.proposal_recall, report=rep.to_dict())
        except (MmlocError, ValueError, RuntimeError) as exc:
            log.warning("sweep cell %s=%s failed: %s", factor, value, exc)
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    if out_dir is not None:
        write_sweep(rows, out_dir)
    return rows


def write_sweep(rows, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["factor", "value", "split", "ap50", "map", "proposal_recall", "error"]
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    (out / "sweep.json").write_text(json.dumps(rows, indent=1, sort_keys=True, default=str), encoding="utf-8")
    return out
