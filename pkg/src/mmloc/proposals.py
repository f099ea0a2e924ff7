"""Region proposal machinery: anchors, RPN head, decoding, NMS and RoI pooling.

Boxes are ``[x1, y1, x2, y2]`` in pixels, stored as float arrays of shape
(N, 4). Anchor order is row-major over cells, then scales, then ratios, which
matches the flattening of the RPN outputs.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatchError

BBOX_CLIP = float(np.log(1000.0 / 16))


@dataclass
class Anchor:
    cx: float
    cy: float
    scale: float
    ratio: float

    def box(self):
        w = self.scale / np.sqrt(self.ratio)
        h = self.scale * np.sqrt(self.ratio)
        return np.array([self.cx - w / 2, self.cy - h / 2, self.cx + w / 2, self.cy + h / 2])


@dataclass
class Proposal:
    box: np.ndarray
    objectness: float
    source_cell: tuple
    anchor_index: int = -1


def anchor_list(w, h, stride, scales, ratios):
    """Anchors as ``Anchor`` records (same order as :func:`generate_anchors`)."""
    if min(w, h, stride) <= 0 or min(scales) <= 0 or min(ratios) <= 0:
        raise ValueError("grid size, stride, scales and ratios must be positive")
    out = []
    for y in range(h):
        for x in range(w):
            for s in scales:
                for r in ratios:
                    out.append(Anchor((x + 0.5) * stride, (y + 0.5) * stride, float(s), float(r)))
    return out


def generate_anchors(w, h, stride, scales=(16, 32, 64), ratios=(0.5, 1.0, 2.0)):
    """(w*h*len(scales)*len(ratios), 4) anchor boxes centred on grid cells."""
    return np.array([a.box() for a in anchor_list(w, h, stride, scales, ratios)], dtype=np.float64).reshape(-1, 4)


def box_area(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.clip(boxes[..., 2] - boxes[..., 0], 0, None) * np.clip(boxes[..., 3] - boxes[..., 1], 0, None)


def box_iou(a, b):
    """Pairwise IoU matrix between (N,4) and (M,4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.maximum(iw, 0) * np.maximum(ih, 0)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def iou(a, b):
    return float(box_iou(a, b)[0, 0])


def encode_boxes(anchors, gt):
    """Standard (dx, dy, dw, dh) targets of ``gt`` relative to ``anchors``."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    gx = gt[:, 0] + 0.5 * gw
    gy = gt[:, 1] + 0.5 * gh
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_boxes(anchors, deltas):
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    dw = np.minimum(deltas[:, 2], BBOX_CLIP)
    dh = np.minimum(deltas[:, 3], BBOX_CLIP)
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * np.exp(dw)
    h = ah * np.exp(dh)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def clip_boxes(boxes, width, height):
    boxes = np.array(boxes, dtype=np.float64)
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0, width)
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0, height)
    return boxes


def nms(boxes, scores, iou_threshold, max_keep=None):
    """Greedy NMS. Returns kept indices in descending score order.

    Ties are broken by lower index. A box is suppressed when its IoU with an
    already kept box is >= ``iou_threshold``. Stops after ``max_keep`` boxes.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    sb = boxes[order]
    x1, y1, x2, y2 = sb.T
    area = box_area(sb)
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for rank in range(len(order)):
        if suppressed[rank]:
            continue
        keep.append(int(order[rank]))
        if max_keep is not None and len(keep) >= max_keep:
            break
        iw = np.minimum(x2[rank], x2) - np.maximum(x1[rank], x1)
        ih = np.minimum(y2[rank], y2) - np.maximum(y1[rank], y1)
        inter = np.maximum(iw, 0) * np.maximum(ih, 0)
        union = area[rank] + area - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            ov = np.where(union > 0, inter / union, 0.0)
        suppressed |= ov >= iou_threshold
    return keep


def decode_and_nms(anchors, objectness, deltas, top_n=100, nms_iou=0.7, image_size=None,
                   pre_nms_top_n=None, min_size=1.0, grid_w=None, num_anchors_per_cell=1):
    """Decode deltas, clip, drop tiny boxes, NMS, keep the ``top_n`` best proposals."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    objectness = np.asarray(objectness, dtype=np.float64).reshape(-1)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    if len(anchors) == 0:
        raise ValueError("empty anchor list")
    if not len(anchors) == len(objectness) == len(deltas):
        raise ShapeMismatchError(
            f"{len(anchors)} anchors, {len(objectness)} scores, {len(deltas)} deltas"
        )
    order = np.argsort(-objectness, kind="stable")
    if pre_nms_top_n is not None:
        order = order[:pre_nms_top_n]
    boxes = decode_boxes(anchors[order], deltas[order])
    if image_size is not None:
        width, height = image_size
        boxes = clip_boxes(boxes, width, height)
    ok = ((boxes[:, 2] - boxes[:, 0]) >= min_size) & ((boxes[:, 3] - boxes[:, 1]) >= min_size)
    order, boxes = order[ok], boxes[ok]
    keep = nms(boxes, objectness[order], nms_iou, top_n)
    out = []
    for k in keep:
        idx = int(order[k])
        cell = idx // num_anchors_per_cell
        src = (cell % grid_w, cell // grid_w) if grid_w else (cell, 0)
        out.append(Proposal(boxes[k], float(objectness[idx]), src, idx))
    return out


def roi_sample_indices(box, stride, grid_w, grid_h, out=7):
    """Nearest-cell sample positions (rows, cols) for a box on the feature grid."""
    x1, y1, x2, y2 = (float(v) for v in box)
    t = (np.arange(out) + 0.5) / out
    xs = np.floor((x1 + t * (x2 - x1)) / stride).astype(np.int64)
    ys = np.floor((y1 + t * (y2 - y1)) / stride).astype(np.int64)
    return np.clip(ys, 0, grid_h - 1), np.clip(xs, 0, grid_w - 1)


def roi_extract(fm, box, stride, out=7):
    """(d, h, w) map -> (d, out, out) patch by nearest-cell pooling."""
    d, h, w = fm.shape
    rows, cols = roi_sample_indices(box, stride, w, h, out)
    rows = torch.as_tensor(rows, device=fm.device)
    cols = torch.as_tensor(cols, device=fm.device)
    return fm[:, rows[:, None], cols[None, :]]


def roi_extract_batch(fm, boxes, image_index, stride, out=7):
    """Gather patches for many boxes from a (B, d, h, w) batch -> (R, d, out, out)."""
    _, d, h, w = fm.shape
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) == 0:
        return fm.new_zeros((0, d, out, out))
    t = (np.arange(out) + 0.5) / out
    xs = np.floor((boxes[:, :1] + t[None] * (boxes[:, 2:3] - boxes[:, :1])) / stride).astype(np.int64)
    ys = np.floor((boxes[:, 1:2] + t[None] * (boxes[:, 3:4] - boxes[:, 1:2])) / stride).astype(np.int64)
    xs = torch.as_tensor(np.clip(xs, 0, w - 1), device=fm.device)
    ys = torch.as_tensor(np.clip(ys, 0, h - 1), device=fm.device)
    b = torch.as_tensor(np.asarray(image_index, dtype=np.int64), device=fm.device)
    # (R, out, out, d) -> (R, d, out, out)
    patches = fm.permute(0, 2, 3, 1)[b[:, None, None], ys[:, :, None], xs[:, None, :]]
    return patches.permute(0, 3, 1, 2)


def label_proposals(boxes, gt_boxes, threshold=0.5):
    """1 where the best IoU with any (query-class) ground truth is >= threshold."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt_boxes) == 0 or len(boxes) == 0:
        return np.zeros(len(boxes), dtype=np.int64)
    return (box_iou(boxes, gt_boxes).max(axis=1) >= threshold).astype(np.int64)


class RPNHead(nn.Module):
    """3x3 conv trunk, then per-anchor objectness logits and box deltas."""

    def __init__(self, d=64, num_anchors=9):
        super().__init__()
        self.d = d
        self.num_anchors = num_anchors
        self.conv = nn.Conv2d(d, d, 3, padding=1)
        self.cls = nn.Conv2d(d, num_anchors, 1)
        self.reg = nn.Conv2d(d, 4 * num_anchors, 1)

    def forward(self, fm):
        if fm.shape[-3] != self.d:
            raise ShapeMismatchError(f"RPN expects depth {self.d}, got {fm.shape[-3]}")
        single = fm.dim() == 3
        x = fm.unsqueeze(0) if single else fm
        x = F.relu(self.conv(x))
        b, _, h, w = x.shape
        logits = self.cls(x).permute(0, 2, 3, 1).reshape(b, h * w * self.num_anchors)
        deltas = self.reg(x).view(b, self.num_anchors, 4, h, w).permute(0, 3, 4, 1, 2)
        deltas = deltas.reshape(b, h * w * self.num_anchors, 4)
        if single:
            return logits[0], deltas[0]
        return logits, deltas


def rpn_forward(head, fm):
    return head(fm)


def anchor_targets(anchors, gt_boxes, pos_iou=0.5):
    """Objectness labels and regression targets for every anchor."""
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    labels = np.zeros(len(anchors), dtype=np.int64)
    targets = np.zeros((len(anchors), 4))
    if len(gt_boxes) == 0:
        return labels, targets
    ov = box_iou(anchors, gt_boxes)
    best = ov.argmax(axis=1)
    labels[ov.max(axis=1) >= pos_iou] = 1
    pos = labels == 1
    if pos.any():
        targets[pos] = encode_boxes(anchors[pos], gt_boxes[best[pos]])
    return labels, targets


def rpn_loss(logits, deltas, anchors, gt_boxes_per_image, rng, batch_per_image=64,
             pos_fraction=0.5, pos_iou=0.5):
    """Binary cross-entropy over sampled anchors + smooth-L1 over sampled positives."""
    cls_terms, reg_terms = [], []
    for b, gt in enumerate(gt_boxes_per_image):
        labels, targets = anchor_targets(anchors, gt, pos_iou)
        pos = np.flatnonzero(labels == 1)
        neg = np.flatnonzero(labels == 0)
        n_pos = min(len(pos), int(batch_per_image * pos_fraction))
        pos = rng.choice(pos, n_pos, replace=False) if n_pos < len(pos) else pos
        neg = rng.choice(neg, min(len(neg), batch_per_image - n_pos), replace=False)
        idx = np.concatenate([pos, neg])
        idx_t = torch.as_tensor(idx, device=logits.device)
        lab = torch.as_tensor(labels[idx], dtype=logits.dtype, device=logits.device)
        cls_terms.append(F.binary_cross_entropy_with_logits(logits[b, idx_t], lab, reduction="sum") / len(idx))
        if len(pos):
            tgt = torch.as_tensor(targets[pos], dtype=deltas.dtype, device=deltas.device)
            pos_t = torch.as_tensor(pos, device=deltas.device)
            reg_terms.append(
                F.smooth_l1_loss(deltas[b, pos_t], tgt, beta=1.0 / 9, reduction="sum") / len(idx)
            )
    cls = torch.stack(cls_terms).mean()
    reg = torch.stack(reg_terms).sum() / len(gt_boxes_per_image) if reg_terms else logits.sum() * 0
    return cls, reg
