"""Baseline fusion strategies compared against projection scoring."""

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ShapeMismatchError
from .proposals import Proposal, iou

FUSION_KINDS = ("ops", "concat", "late", "sketch", "gloss", "feature_multi_sketch", "attention_multi_sketch")


@dataclass
class ScoredProposal:
    proposal: Proposal
    a: float
    q: np.ndarray = field(default=None, repr=False)

    @property
    def box(self):
        return self.proposal.box


@dataclass
class FusionStrategy:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in FUSION_KINDS:
            raise ValueError(f"unknown fusion kind {self.kind!r}; expected one of {FUSION_KINDS}")


def late_fusion(proposals_per_query, top_n, dedup_iou=0.9):
    """Union of per-query proposal sets, highest score first, near-duplicates dropped."""
    pool = [p for group in proposals_per_query for p in group]
    if not pool:
        raise ValueError("late fusion needs at least one non-empty proposal set")
    order = sorted(range(len(pool)), key=lambda i: -pool[i].a)
    kept = []
    for i in order:
        cand = pool[i]
        if any(iou(cand.box, k.box) > dedup_iou for k in kept):
            continue
        kept.append(cand)
        if len(kept) == top_n:
            break
    return kept


def concat_fusion(s_vec, t_vec, W):
    """``W @ [s; t]``: one fused query in place of the projection."""
    if s_vec.shape[-1] != t_vec.shape[-1]:
        raise ShapeMismatchError(f"sketch length {s_vec.shape[-1]} != gloss length {t_vec.shape[-1]}")
    if W.shape[-1] != 2 * s_vec.shape[-1]:
        raise ShapeMismatchError(f"W has shape {tuple(W.shape)}")
    return torch.cat([s_vec, t_vec], dim=-1) @ W.transpose(-1, -2)


def _check_same_shape(maps):
    if not maps:
        raise ValueError("need at least one map")
    shape = maps[0].shape
    for m in maps[1:]:
        if m.shape != shape:
            raise ShapeMismatchError(f"map shapes differ: {tuple(shape)} vs {tuple(m.shape)}")


def feature_fusion(sketch_fms):
    """Elementwise max over N sketch feature maps."""
    _check_same_shape(sketch_fms)
    return torch.stack(list(sketch_fms)).amax(dim=0)


def attention_fusion(att_maps):
    """Elementwise mean over N attention maps."""
    _check_same_shape(att_maps)
    return torch.stack(list(att_maps)).mean(dim=0)
