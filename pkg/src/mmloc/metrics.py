"""Query-conditioned detection metrics and evaluation reports.

AP uses all-points interpolation of the precision/recall curve. Predictions
are ranked by score with ties kept in insertion order, and each one is matched
greedily to the highest-IoU unmatched ground truth of the same scene and
category.
"""

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .proposals import box_iou

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
MAP_CONVENTION = "COCO: mean AP over IoU 0.50:0.95:0.05, averaged over query categories"


@dataclass
class Prediction:
    scene_id: str
    category: object
    box: np.ndarray
    score: float

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64)
        if not np.isfinite(self.score):
            raise DataError(f"non-finite score for scene {self.scene_id}")
        if self.box.shape != (4,) or not (self.box[0] < self.box[2] and self.box[1] < self.box[3]):
            raise DataError(f"invalid box {self.box.tolist()} for scene {self.scene_id}")


@dataclass
class GroundTruth:
    scene_id: str
    category: object
    box: np.ndarray


def match_predictions(preds, gts, iou_thr=0.5):
    """Greedy matching; returns (tp flags in ranked order, number of ground truths)."""
    pool = defaultdict(list)
    for g in gts:
        pool[(g.scene_id, g.category)].append(np.asarray(g.box, dtype=np.float64))
    used = {k: np.zeros(len(v), dtype=bool) for k, v in pool.items()}
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    tp = np.zeros(len(preds), dtype=bool)
    for rank, i in enumerate(order):
        p = preds[i]
        key = (p.scene_id, p.category)
        if key not in pool:
            continue
        ov = box_iou(p.box, np.array(pool[key]))[0]
        ov[used[key]] = -1.0
        j = int(np.argmax(ov))
        if ov[j] >= iou_thr:
            used[key][j] = True
            tp[rank] = True
    return tp, len(gts)


def average_precision(tp, n_gt):
    """All-points interpolated AP from ranked TP flags."""
    if n_gt == 0:
        return 0.0 if len(tp) else float("nan")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(envelope[tp].sum() / n_gt)


def ap_at_iou(preds, gts, iou_thr=0.5):
    """AP of one prediction pool at one IoU threshold.

    NaN when there are neither predictions nor ground truths, 0 when only
    predictions exist.
    """
    tp, n = match_predictions(list(preds), list(gts), iou_thr)
    return average_precision(tp, n)


def _by_category(preds, gts):
    cats = defaultdict(lambda: ([], []))
    for p in preds:
        cats[p.category][0].append(p)
    for g in gts:
        cats[g.category][1].append(g)
    return cats


def per_category_ap(preds, gts, thresholds=COCO_THRESHOLDS):
    """category -> array of AP values, one per threshold (NaN categories dropped)."""
    out = {}
    for cat, (cp, cg) in _by_category(preds, gts).items():
        if not cp and not cg:
            continue
        out[cat] = np.array([ap_at_iou(cp, cg, t) for t in thresholds])
    return out


def mean_ap(preds, gts, thresholds=COCO_THRESHOLDS):
    """Mean over thresholds and evaluated categories, as a fraction in [0, 1]."""
    aps = per_category_ap(list(preds), list(gts), thresholds)
    if not aps:
        return 0.0
    return float(np.mean([v.mean() for v in aps.values()]))


def proposal_recall(proposals, gts, iou_thr=0.5, budget=100):
    """Fraction of ground truths covered (IoU >= thr) by the top-``budget`` proposals.

    ``proposals``/``gts`` are one (N, 4) array each, or equal-length lists of
    per-image arrays. NaN when there is no ground truth at all.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if isinstance(proposals, np.ndarray) or (proposals and np.ndim(proposals[0]) == 1):
        proposals, gts = [proposals], [gts]
    covered = total = 0
    for props, g in zip(proposals, gts):
        g = np.asarray(g, dtype=np.float64).reshape(-1, 4)
        total += len(g)
        props = np.asarray(props, dtype=np.float64).reshape(-1, 4)[:budget]
        if len(g) and len(props):
            covered += int((box_iou(g, props).max(axis=1) >= iou_thr).sum())
    return covered / total if total else float("nan")


@dataclass
class EvalReport:
    ap50: float
    map: float
    split: str
    per_category: dict = field(default_factory=dict)
    proposal_recall: float = float("nan")
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("ap50", "map"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name}={v} outside [0, 100]")
        if self.split not in ("open", "closed"):
            raise ValueError(f"split must be 'open' or 'closed', got {self.split!r}")

    def to_dict(self):
        d = asdict(self)
        if not np.isfinite(d["proposal_recall"]):
            d["proposal_recall"] = None
        d["map_convention"] = MAP_CONVENTION
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1, default=_json_default)

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def to_text(self, method="Ours", fusion="-"):
        return format_table([(method, fusion, self)])


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialise {type(x).__name__}")


def format_table(rows):
    """Rows of (method, fusion, report) laid out as Method | Fusion | Open Set | Closed Set."""
    lines = [
        f"# mAP convention: {MAP_CONVENTION}",
        f"{'Method':<24}{'Fusion':<10}{'Open %AP@50':>12}{'Open %mAP':>11}{'Closed %AP@50':>15}{'Closed %mAP':>13}",
    ]
    for method, fusion, rep in rows:
        cells = ["-"] * 4
        k = 0 if rep.split == "open" else 2
        cells[k], cells[k + 1] = f"{rep.ap50:.1f}", f"{rep.map:.1f}"
        lines.append(f"{method:<24}{fusion:<10}{cells[0]:>12}{cells[1]:>11}{cells[2]:>15}{cells[3]:>13}")
    return "\n".join(lines) + "\n"


def build_report(preds, gts, split, category_names=None, recall=float("nan"), meta=None):
    aps = per_category_ap(preds, gts)
    names = category_names or {}
    per_cat = {
        str(names.get(c, c)): {
            "ap50": 100 * float(v[0]),
            "map": 100 * float(v.mean()),
            "n_gt": sum(1 for g in gts if g.category == c),
        }
        for c, v in sorted(aps.items(), key=lambda kv: str(kv[0]))
    }
    ap50 = 100 * float(np.mean([v[0] for v in aps.values()])) if aps else 0.0
    mp = 100 * float(np.mean([v.mean() for v in aps.values()])) if aps else 0.0
    rec = 100 * recall if np.isfinite(recall) else float("nan")
    return EvalReport(ap50, mp, split, per_cat, rec, dict(meta or {}))


def write_predictions(preds, path):
    with open(path, "w", encoding="utf-8") as fh:
        for p in preds:
            fh.write(json.dumps({"scene_id": p.scene_id, "category": p.category,
                                 "box": [float(v) for v in p.box], "score": float(p.score)},
                                default=_json_default) + "\n")


def read_predictions(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(Prediction(rec["scene_id"], rec["category"], rec["box"], float(rec["score"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad prediction record ({exc})") from None
    return out
