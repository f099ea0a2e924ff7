"""Experiment configuration.

Config files are flat ``key = value`` text. Dataset keys carry a ``data.``
prefix; ``fusion.kind`` selects the fusion strategy. Lists are comma
separated. ``MMLOC_SEED`` in the environment overrides ``seed``.
"""

import ast
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data.synthetic import DatasetConfig
from .errors import ConfigError

TRAIN_FUSIONS = ("ops", "concat", "sketch", "gloss")
EVAL_FUSIONS = ("ops", "concat", "late", "sketch", "gloss", "feature_multi_sketch", "attention_multi_sketch")
ALIASES = {"fusion.kind": "fusion_kind", "fusion": "fusion_kind"}


@dataclass
class ExperimentConfig:
    data: DatasetConfig = field(default_factory=DatasetConfig)
    seed: int = 0
    d: int = 64
    stride: int = 8
    backbone_norm: bool = True
    K: float = 256.0
    m_plus: float = 0.3
    m_minus: float = 0.7
    score_ce_weight: float = 1.0
    fusion_kind: str = "ops"
    score_head: str = "cosine"
    with_class_query: bool = False
    normalize_queries: bool = False
    ridge: float = 1e-6
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_decay: float = 0.1
    lr_decay_every: int = 4
    epochs_stage1: int = 10
    epochs_stage2: int = 10
    attention: bool = True
    batch_size: int = 8
    grad_clip: float = 10.0
    anchor_scales: tuple = (16, 32, 64)
    anchor_ratios: tuple = (0.5, 1.0, 2.0)
    rpn_batch_per_image: int = 64
    rpn_positive: str = "query"
    nms_iou: float = 0.7
    pre_nms_top_n: int = 600
    top_n_train: int = 100
    top_n_eval: int = 50
    rois_per_image: int = 16
    roi_fg_fraction: float = 0.5
    absent_query_prob: float = 1.0
    recall_budget: int = 100
    n_query_sketches: int = 3

    def validate(self):
        self.data.validate()
        positives = {
            "d": self.d, "stride": self.stride, "K": self.K, "m_plus": self.m_plus, "m_minus": self.m_minus,
            "lr": self.lr, "lr_decay": self.lr_decay, "lr_decay_every": self.lr_decay_every,
            "batch_size": self.batch_size, "top_n_train": self.top_n_train, "top_n_eval": self.top_n_eval,
            "rois_per_image": self.rois_per_image, "rpn_batch_per_image": self.rpn_batch_per_image,
            "nms_iou": self.nms_iou, "recall_budget": self.recall_budget, "pre_nms_top_n": self.pre_nms_top_n,
            "n_query_sketches": self.n_query_sketches, "grad_clip": self.grad_clip,
        }
        for k, v in positives.items():
            if not v > 0:
                raise ConfigError(f"{k} must be positive, got {v}")
        if not (self.m_plus < 1 and self.m_minus < 1):
            raise ConfigError("margins must be below 1")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.fusion_kind not in TRAIN_FUSIONS:
            raise ConfigError(f"fusion.kind must be one of {TRAIN_FUSIONS}, got {self.fusion_kind!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.score_head not in ("neural", "cosine"):
            raise ConfigError(f"score_head must be 'neural' or 'cosine', got {self.score_head!r}")
        if self.rpn_positive not in ("query", "any"):
            raise ConfigError("rpn_positive must be 'query' or 'any'")
        if self.score_ce_weight < 0:
            raise ConfigError("score_ce_weight must be non-negative")
        if self.ridge < 0:
            raise ConfigError("ridge must be non-negative")
        if not 0 <= self.absent_query_prob <= 1 or not 0 < self.roi_fg_fraction <= 1:
            raise ConfigError("absent_query_prob must lie in [0, 1] and roi_fg_fraction in (0, 1]")
        if min(self.anchor_scales) <= 0 or min(self.anchor_ratios) <= 0:
            raise ConfigError("anchor scales and ratios must be positive")
        if self.with_class_query and self.fusion_kind != "ops":
            raise ConfigError("the class query is only used with projection scoring")
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["anchor_scales"] = list(self.anchor_scales)
        d["anchor_ratios"] = list(self.anchor_ratios)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        data = DatasetConfig(**d.pop("data", {}))
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for k in ("anchor_scales", "anchor_ratios"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(data=data, **d)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **changes):
        data_changes = {k[5:]: changes.pop(k) for k in list(changes) if k.startswith("data.")}
        new = dataclasses.replace(self, **changes)
        if data_changes:
            new = dataclasses.replace(new, data=dataclasses.replace(self.data, **data_changes))
        return new


def _parse_value(raw, current):
    raw = raw.strip()
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(current, tuple):
        return tuple(_parse_value(p, current[0] if current else 0.0) for p in raw.split(",") if p.strip())
    if isinstance(current, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"expected an integer, got {raw!r}") from None
    if isinstance(current, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"expected a number, got {raw!r}") from None
    try:
        value = ast.literal_eval(raw)
        return value if isinstance(value, str) else raw
    except (ValueError, SyntaxError):
        return raw


def apply_overrides(cfg, pairs):
    """Apply ``{key: raw string}`` overrides, checking keys and value types."""
    top = {f.name for f in dataclasses.fields(cfg)}
    data_fields = {f.name for f in dataclasses.fields(cfg.data)}
    changes = {}
    for key, raw in pairs.items():
        key = ALIASES.get(key.strip(), key.strip())
        if key.startswith("data."):
            name = key[5:]
            if name not in data_fields:
                raise ConfigError(f"unknown dataset key {key!r}")
            changes[key] = _parse_value(str(raw), getattr(cfg.data, name)) if isinstance(raw, str) else raw
        elif key in top and key != "data":
            changes[key] = _parse_value(str(raw), getattr(cfg, key)) if isinstance(raw, str) else raw
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return cfg.replace(**changes)


def parse_config_text(text, base=None):
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        pairs[key.strip()] = value.strip()
    return apply_overrides(base or ExperimentConfig(), pairs)


def load_config(path=None, env=None):
    env = os.environ if env is None else env
    if path is None:
        cfg = ExperimentConfig()
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = parse_config_text(text)
    if env.get("MMLOC_SEED"):
        try:
            cfg = cfg.replace(seed=int(env["MMLOC_SEED"]))
        except ValueError:
            raise ConfigError(f"MMLOC_SEED must be an integer, got {env['MMLOC_SEED']!r}") from None
    return cfg.validate()


def dump_config(cfg):
    """Flat text form accepted by :func:`parse_config_text`."""
    lines = []
    for k, v in cfg.to_dict().items():
        if k == "data":
            for dk, dv in v.items():
                lines.append(f"data.{dk} = {dv}")
            continue
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{'fusion.kind' if k == 'fusion_kind' else k} = {v}")
    return "\n".join(lines) + "\n"
