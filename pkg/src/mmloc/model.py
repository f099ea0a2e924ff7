"""The query-guided localizer: encoders, cross-modal attention, RPN and scoring."""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .attention import CrossModalAttention
from .encoders import MLP, ConvBackbone, ConvMeanPoolHead, TextEncoder, init_uniform_fan_in
from .errors import ConfigError, ShapeMismatchError
from .fusion import attention_fusion, concat_fusion, feature_fusion
from .proposals import RPNHead, decode_and_nms, generate_anchors, roi_extract_batch
from .scoring import ScoringHead, cosine_score, project_batch

# which query modalities each fusion kind feeds to attention and scoring
MODALITIES = {
    "ops": (True, True),
    "concat": (True, True),
    "late": (True, True),
    "sketch": (True, False),
    "gloss": (False, True),
    "feature_multi_sketch": (True, True),
    "attention_multi_sketch": (True, True),
}
# evaluation fusions usable with a checkpoint trained under each fusion kind
COMPATIBLE = {
    "ops": ("ops", "late", "sketch", "gloss", "feature_multi_sketch", "attention_multi_sketch"),
    "concat": ("concat",),
    "sketch": ("sketch",),
    "gloss": ("gloss",),
}

IMAGE_MEAN, IMAGE_STD = 127.5, 64.0


def images_to_tensor(images):
    """uint8 (H, W, 3) arrays -> normalised (B, 3, H, W) float tensor."""
    arr = np.stack([np.asarray(im) for im in images]).astype(np.float32)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeMismatchError(f"expected RGB images, got array of shape {arr.shape}")
    return torch.from_numpy((arr - IMAGE_MEAN) / IMAGE_STD).permute(0, 3, 1, 2).contiguous()


def sketches_to_tensor(sketches):
    """Per-query lists of (S, S) rasters in [0, 1] -> (Q, N, 1, S, S)."""
    arr = np.stack([np.stack([np.asarray(s, dtype=np.float32) for s in group]) for group in sketches])
    if arr.ndim != 4:
        raise ShapeMismatchError(f"expected (Q, N, S, S) sketches, got {arr.shape}")
    return torch.from_numpy(arr).unsqueeze(2)


@dataclass
class QueryBatch:
    """Q queries. ``sketches`` is (Q, N, 1, S, S) or None; token lists may be None."""

    sketches: torch.Tensor = None
    tokens: list = None
    class_tokens: list = None

    def __len__(self):
        if self.sketches is not None:
            return self.sketches.shape[0]
        return len(self.tokens if self.tokens is not None else self.class_tokens)


@dataclass
class QueryEncoding:
    sketch_fms: torch.Tensor  # (Q, N, d, h', w') or None
    text: torch.Tensor  # (Q, d) or None
    classes: torch.Tensor  # (Q, d) or None


class Localizer(nn.Module):
    def __init__(self, cfg, vocab_size):
        super().__init__()
        d = cfg.d
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.image_net = ConvBackbone(3, d, cfg.stride, norm=cfg.backbone_norm)
        self.sketch_net = ConvBackbone(1, d, cfg.stride, norm=cfg.backbone_norm)
        self.text_net = TextEncoder(vocab_size, d)
        self.attention = CrossModalAttention(d, cfg.K)
        self.rpn = RPNHead(d, len(cfg.anchor_scales) * len(cfg.anchor_ratios))
        self.roi_head = ConvMeanPoolHead(d)
        self.sketch_head = ConvMeanPoolHead(d)
        self.text_head = MLP(d, d)
        self.class_head = MLP(d, d)
        self.score_head = ScoringHead(d)
        self.concat_W = nn.Parameter(torch.empty(d, 2 * d))
        self._anchor_cache = {}
        self.reset_parameters(cfg.seed)

    def reset_parameters(self, seed):
        g = torch.Generator().manual_seed(int(seed))
        init_uniform_fan_in(self, g)
        bound = 1.0 / np.sqrt(2 * self.cfg.d)
        with torch.no_grad():
            self.attention.W.uniform_(-bound, bound, generator=g)
            self.concat_W.uniform_(-bound, bound, generator=g)
        self.attention.reset_projection(g)

    def anchors(self, h, w):
        key = (h, w)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = generate_anchors(
                w, h, self.cfg.stride, self.cfg.anchor_scales, self.cfg.anchor_ratios
            )
        return self._anchor_cache[key]

    # encoders

    def encode_images(self, images):
        return self.image_net(images)

    def encode_queries(self, qb, fusion="ops"):
        use_s, use_t = MODALITIES[fusion]
        sk = tx = cl = None
        if use_s:
            if qb.sketches is None:
                raise ConfigError(f"fusion {fusion!r} needs sketch queries")
            q, n = qb.sketches.shape[:2]
            fm = self.sketch_net(qb.sketches.flatten(0, 1))
            sk = fm.view(q, n, *fm.shape[1:])
        if use_t:
            if qb.tokens is None:
                raise ConfigError(f"fusion {fusion!r} needs gloss queries")
            tx = self.text_net(qb.tokens)
        if self.cfg.with_class_query and fusion in ("ops", "late"):
            if qb.class_tokens is None:
                raise ConfigError("the class query is enabled but no class tokens were given")
            cl = self.text_net(qb.class_tokens)
        return QueryEncoding(sk, tx, cl)

    def _sketch_map(self, enc, fusion):
        if enc.sketch_fms is None:
            return None
        if fusion == "feature_multi_sketch":
            return feature_fusion(list(enc.sketch_fms.unbind(1)))
        return enc.sketch_fms[:, 0]

    # attention and proposals

    def attend(self, image_fm, enc, fusion="ops", bypass=False):
        """Query-conditioned maps (Q, d, h, w) and attention maps (Q, h, w) or None."""
        if bypass:
            return image_fm, None
        att_mod = self.attention
        if fusion == "attention_multi_sketch":
            maps = [att_mod.attention_map(image_fm, att_mod.query_vector(s, enc.text))
                    for s in enc.sketch_fms.unbind(1)]
            att = attention_fusion(maps)
        else:
            q = att_mod.query_vector(self._sketch_map(enc, fusion), enc.text)
            att = att_mod.attention_map(image_fm, q)
        return att_mod.augment(image_fm, att), att

    def propose(self, logits, deltas, h, w, image_size, top_n):
        """Per-query proposal lists from RPN outputs."""
        anchors = self.anchors(h, w)
        obj = torch.sigmoid(logits).detach().cpu().numpy()
        dl = deltas.detach().cpu().numpy()
        return [
            decode_and_nms(anchors, obj[i], dl[i], top_n=top_n, nms_iou=self.cfg.nms_iou,
                           image_size=image_size, pre_nms_top_n=self.cfg.pre_nms_top_n,
                           grid_w=w, num_anchors_per_cell=self.rpn.num_anchors)
            for i in range(len(obj))
        ]

    def rpn_proposals(self, image_fm, maps, query_image, bypass, image_size, top_n):
        """Per-query RPN outputs and proposals. With attention bypassed every query of an
        image sees the same map, so the RPN and NMS run once per image."""
        h, w = maps.shape[-2:]
        if not bypass:
            logits, deltas = self.rpn(maps)
            return logits, deltas, self.propose(logits, deltas, h, w, image_size, top_n)
        uniq, inv = np.unique(np.asarray(query_image), return_inverse=True)
        logits, deltas = self.rpn(image_fm[torch.as_tensor(uniq)])
        props = self.propose(logits, deltas, h, w, image_size, top_n)
        idx = torch.as_tensor(inv.reshape(-1))
        return logits[idx], deltas[idx], [props[k] for k in inv.reshape(-1)]

    # scoring

    def query_vectors(self, enc, fusion="ops"):
        """Final per-query vectors (s, t, c), each (Q, d) or None."""
        s = t = c = None
        if enc.sketch_fms is not None:
            if fusion == "attention_multi_sketch":
                s = torch.stack([self.sketch_head(m) for m in enc.sketch_fms.unbind(1)]).mean(0)
            else:
                s = self.sketch_head(self._sketch_map(enc, fusion))
        if enc.text is not None:
            t = self.text_head(enc.text)
        if enc.classes is not None:
            c = self.class_head(enc.classes)
        if self.cfg.normalize_queries:
            s, t, c = (None if v is None else v / v.norm(dim=-1, keepdim=True).clamp_min(1e-12) for v in (s, t, c))
        return s, t, c

    def roi_vectors(self, maps, boxes, query_index):
        patches = roi_extract_batch(maps, boxes, query_index, self.cfg.stride, 7)
        return self.roi_head(patches)

    def fused_queries(self, r, query_index, enc, fusion="ops"):
        """The q vector paired with each RoI vector."""
        s, t, c = self.query_vectors(enc, fusion)
        qi = torch.as_tensor(np.asarray(query_index, dtype=np.int64))
        if fusion == "concat":
            return concat_fusion(s, t, self.concat_W)[qi]
        basis = torch.stack([v for v in (s, t, c) if v is not None], dim=-1)  # (Q, d, k)
        return project_batch(basis[qi], r.unsqueeze(1), self.cfg.ridge).squeeze(1)

    def score_rois(self, r, q):
        if self.cfg.score_head == "cosine":
            return cosine_score(r, q, eps=1e-8)
        return self.score_head(r, q)
