"""Two-stage training and checkpoints.

Stage 1 trains encoders, RPN and scoring with attention bypassed. Stage 2
switches attention on and continues with a fresh optimizer. Both stages use
SGD with momentum and a step learning-rate decay.
"""

import base64
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig
from .data.gloss import Vocabulary, class_tokens
from .data.synthetic import generate_dataset
from .errors import CheckpointError, ConfigError, DivergenceError
from .model import Localizer, QueryBatch, images_to_tensor, sketches_to_tensor
from .proposals import label_proposals, rpn_loss
from .scoring import total_query_loss

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
HEADER_KEY = "__header__"


@dataclass
class TrainBatch:
    batch_id: str
    images: torch.Tensor
    queries: QueryBatch
    query_image: np.ndarray  # image index of each query
    query_category: list
    gt_query: list  # per query, boxes of the query category
    gt_all: list  # per query, every box in its image


def pick_sketches(pool, category, rng, n=1):
    rasters = pool[category]
    idx = rng.choice(len(rasters), n, replace=len(rasters) < n)
    return [rasters[i] for i in idx]


def make_query_batch(categories, sketch_pools, rng, ds, n_sketches=1, vocab=None):
    vocab = vocab or ds.vocab
    specs = {c.id: c for c in ds.categories}
    sketches = [pick_sketches(sketch_pools, c, rng, n_sketches) for c in categories]
    tokens = [specs[c].gloss for c in categories]
    cls = [class_tokens(specs[c].name, vocab).tokens for c in categories]
    return QueryBatch(sketches_to_tensor(sketches), tokens, cls)


def build_train_batch(scenes, ds, cfg, rng, batch_id, allowed):
    """One query per distinct category present in each scene, plus optional absent-class queries."""
    q_img, q_cat = [], []
    for b, scene in enumerate(scenes):
        present = sorted(set(scene.categories.tolist()))
        for c in present:
            q_img.append(b)
            q_cat.append(c)
        absent = [c for c in allowed if c not in present]
        if absent and rng.random() < cfg.absent_query_prob:
            q_img.append(b)
            q_cat.append(int(rng.choice(absent)))
    queries = make_query_batch(q_cat, ds.sketches_train, rng, ds, 1, ds.vocab)
    return TrainBatch(
        batch_id,
        images_to_tensor([s.image for s in scenes]),
        queries,
        np.array(q_img),
        q_cat,
        [scenes[b].boxes_of(c) for b, c in zip(q_img, q_cat)],
        [scenes[b].boxes for b in q_img],
    )


def sample_rois(proposals, gt_query, gt_all, cfg, rng):
    """Proposal boxes plus every ground-truth box, labelled against the query class and subsampled."""
    boxes = [p.box for p in proposals] + list(gt_all)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    labels = label_proposals(boxes, gt_query)
    fg = np.flatnonzero(labels == 1)
    bg = np.flatnonzero(labels == 0)
    n_fg = min(len(fg), int(round(cfg.rois_per_image * cfg.roi_fg_fraction)))
    n_bg = min(len(bg), cfg.rois_per_image - n_fg)
    keep = np.concatenate([rng.choice(fg, n_fg, replace=False), rng.choice(bg, n_bg, replace=False)])
    return boxes[keep], labels[keep]


def forward_losses(model, batch, fusion, bypass, rng):
    cfg = model.cfg
    image_fm = model.encode_images(batch.images)
    enc = model.encode_queries(batch.queries, fusion)
    fm = image_fm[torch.as_tensor(batch.query_image)]
    maps, _ = model.attend(fm, enc, fusion, bypass)
    size = tuple(batch.images.shape[-1:-3:-1])
    logits, deltas, props = model.rpn_proposals(image_fm, maps, batch.query_image, bypass, size, cfg.top_n_train)
    anchors = model.anchors(*maps.shape[-2:])
    rpn_gt = batch.gt_query if cfg.rpn_positive == "query" else batch.gt_all
    cls_loss, reg_loss = rpn_loss(logits, deltas, anchors, rpn_gt, rng, cfg.rpn_batch_per_image)
    all_boxes, all_labels, q_index = [], [], []
    for i, p in enumerate(props):
        boxes, labels = sample_rois(p, batch.gt_query[i], batch.gt_all[i], cfg, rng)
        all_boxes.append(boxes)
        all_labels.append(labels)
        q_index.append(np.full(len(boxes), i))
    q_index = np.concatenate(q_index)
    r = model.roi_vectors(maps, np.concatenate(all_boxes), q_index)
    q = model.fused_queries(r, q_index, enc, fusion)
    a = model.score_rois(r, q)
    terms, ce_terms = [], []
    start = 0
    for labels in all_labels:
        n = len(labels)
        if n:
            y = torch.as_tensor(labels, dtype=a.dtype)
            terms.append(total_query_loss(a[start:start + n], y, cfg.m_plus, cfg.m_minus) / n)
            if cfg.score_ce_weight:
                # written out so a non-finite score propagates to the divergence check
                p = a[start:start + n].clamp(1e-6, 1 - 1e-6)
                ce_terms.append(-(y * p.log() + (1 - y) * (1 - p).log()).mean())
        start += n
    out = {"rpn_cls": cls_loss, "rpn_reg": reg_loss, "query": torch.stack(terms).mean()}
    if ce_terms:
        out["score_ce"] = cfg.score_ce_weight * torch.stack(ce_terms).mean()
    return out


def make_optimizer(model, cfg):
    """SGD with momentum, or Adam with ``momentum`` as its first beta."""
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.momentum, 0.999),
                                weight_decay=cfg.weight_decay)
    return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def lr_at(cfg, epoch):
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


def _allowed_categories(ds):
    return sorted(ds.split.seen)


@dataclass
class Checkpoint:
    model: Localizer
    config: ExperimentConfig
    vocab: Vocabulary
    epoch: int = 0
    stage: int = 0
    history: list = field(default_factory=list)
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def header(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "d": self.config.d,
            "strides": {"image": self.config.stride, "sketch": self.config.stride},
            "vocab_size": len(self.vocab),
            "vocab": self.vocab.words,
            "seed": self.config.seed,
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "epoch": self.epoch,
            "stage": self.stage,
            "history": self.history,
            "rng_state": self.rng_state,
            "meta": self.meta,
        }

    def save(self, path):
        arrays = {k: v.detach().cpu().numpy() for k, v in self.model.state_dict().items()}
        header = json.dumps(self.header(), sort_keys=True).encode("utf-8")
        arrays[HEADER_KEY] = np.frombuffer(header, dtype=np.uint8)
        path = Path(path)
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        path.write_bytes(buf.getvalue())
        return path


def load_checkpoint(path, config=None, force=False):
    """Read a checkpoint. With ``config`` given, its hash must match unless ``force``."""
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if HEADER_KEY not in arrays:
        raise CheckpointError(f"{path}: no header")
    try:
        header = json.loads(arrays.pop(HEADER_KEY).tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if header.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: unsupported schema version {header.get('schema_version')}")
    cfg = ExperimentConfig.from_dict(header["config"])
    if cfg.config_hash() != header["config_hash"] and not force:
        raise CheckpointError(f"{path}: stored config does not match its hash")
    if config is not None and config.config_hash() != header["config_hash"] and not force:
        raise CheckpointError(
            f"{path}: config hash {header['config_hash']} does not match {config.config_hash()} (use force)"
        )
    vocab = Vocabulary(header["vocab"])
    model = Localizer(cfg, len(vocab))
    state = model.state_dict()
    if set(state) != set(arrays):
        raise CheckpointError(f"{path}: parameter names do not match the model")
    for k, v in arrays.items():
        if tuple(state[k].shape) != v.shape:
            raise CheckpointError(f"{path}: {k} has shape {v.shape}, expected {tuple(state[k].shape)}")
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    model.eval()
    return Checkpoint(model, cfg, vocab, header["epoch"], header["stage"], header["history"],
                      header["rng_state"], header.get("meta", {}))


def _torch_rng_state():
    return base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode("ascii")


def train(cfg, dataset=None, log_every=0, callback=None):
    """Train a localizer on ``dataset`` (generated from ``cfg`` when omitted)."""
    cfg.validate()
    torch.manual_seed(cfg.seed)
    ds = dataset if dataset is not None else generate_dataset(cfg.data, cfg.seed)
    if not ds.train:
        raise ConfigError("the training split is empty")
    vocab = ds.vocab
    model = Localizer(cfg, len(vocab))
    allowed = _allowed_categories(ds)
    history = []
    t0 = time.time()
    stages = [(1, cfg.epochs_stage1, True)]
    if cfg.attention:
        stages.append((2, cfg.epochs_stage2, False))
    epoch_total, last_stage = 0, 0
    for stage, n_epochs, bypass in stages:
        if n_epochs == 0:
            continue
        last_stage = stage
        model.train()
        opt = make_optimizer(model, cfg)
        for epoch in range(n_epochs):
            for g in opt.param_groups:
                g["lr"] = lr_at(cfg, epoch)
            rng = np.random.default_rng([cfg.seed, stage, epoch])
            order = rng.permutation(len(ds.train))
            sums, n_batches = {}, 0
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                batch_id = f"stage{stage}/epoch{epoch}/batch{start // cfg.batch_size}"
                batch = build_train_batch([ds.train[i] for i in idx], ds, cfg, rng, batch_id, allowed)
                losses = forward_losses(model, batch, cfg.fusion_kind, bypass, rng)
                loss = sum(losses.values())
                if not torch.isfinite(loss):
                    raise DivergenceError(f"non-finite loss at {batch_id}", batch_id=batch_id)
                opt.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                opt.step()
                for k, v in losses.items():
                    sums[k] = sums.get(k, 0.0) + float(v.detach())
                sums["total"] = sums.get("total", 0.0) + float(loss.detach())
                n_batches += 1
            rec = {"stage": stage, "epoch": epoch, "lr": lr_at(cfg, epoch),
                   **{k: v / n_batches for k, v in sums.items()}}
            history.append(rec)
            epoch_total += 1
            if log_every and epoch_total % log_every == 0:
                log.info("stage %d epoch %d loss %.4f (%.0fs)", stage, epoch, rec["total"], time.time() - t0)
            if callback is not None:
                callback(rec)
    model.eval()
    meta = {"optimizer_reset_between_stages": True, "split": ds.split.to_json(),
            "train_seconds": round(time.time() - t0, 1)}
    rng_state = {"torch": _torch_rng_state(), "numpy_seed": [cfg.seed, last_stage, epoch_total]}
    return Checkpoint(model, cfg, vocab, epoch_total, last_stage, history, rng_state, meta)


def initial_loss(ckpt, dataset, n_batches=None):
    """Mean loss of ``ckpt`` over the training set, with the gradient off."""
    cfg = ckpt.config
    rng = np.random.default_rng([cfg.seed, 99])
    allowed = _allowed_categories(dataset)
    total, n = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(dataset.train), cfg.batch_size):
            if n_batches is not None and n >= n_batches:
                break
            scenes = dataset.train[start:start + cfg.batch_size]
            batch = build_train_batch(scenes, dataset, cfg, rng, f"eval{n}", allowed)
            losses = forward_losses(ckpt.model, batch, cfg.fusion_kind, ckpt.stage < 2, rng)
            total += float(sum(losses.values()))
            n += 1
    return total / max(n, 1) if n else math.nan
