import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mmloc.encoders import init_uniform_fan_in
from mmloc.errors import ShapeMismatchError
from mmloc.proposals import (RPNHead, anchor_list, anchor_targets, box_iou, decode_and_nms, decode_boxes,
                             encode_boxes, generate_anchors, iou, label_proposals, nms, roi_extract,
                             roi_extract_batch, rpn_forward, rpn_loss)
from oracles import finite_diff_check, iou_ref, nms_ref, roi_ref


def _random_boxes(rng, n, size=64):
    xy = rng.uniform(0, size - 8, (n, 2))
    wh = rng.uniform(4, 30, (n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def test_anchor_centres_on_2x2_grid():
    a = generate_anchors(2, 2, 8, scales=(8,), ratios=(1.0,))
    centres = np.stack([(a[:, 0] + a[:, 2]) / 2, (a[:, 1] + a[:, 3]) / 2], 1)
    np.testing.assert_allclose(centres, [[4, 4], [12, 4], [4, 12], [12, 12]])


def test_anchor_square_scale_16():
    a = generate_anchors(1, 1, 16, scales=(16,), ratios=(1.0,))[0]
    assert a[2] - a[0] == 16 and a[3] - a[1] == 16


def test_anchor_count():
    assert len(generate_anchors(16, 16, 8, scales=(16, 32, 64), ratios=(0.5, 2.0))) == 1536


def test_anchor_records_match_boxes():
    recs = anchor_list(3, 2, 8, (16, 32), (0.5, 1.0, 2.0))
    boxes = generate_anchors(3, 2, 8, (16, 32), (0.5, 1.0, 2.0))
    assert len(recs) == len(boxes)
    np.testing.assert_allclose(np.array([r.box() for r in recs]), boxes)
    for r in recs:
        assert r.scale > 0 and r.ratio > 0


def test_anchor_rejects_bad_params():
    with pytest.raises(ValueError):
        generate_anchors(0, 2, 8)


def test_iou_cases():
    assert iou([0, 0, 10, 10], [0, 0, 10, 10]) == 1.0
    assert iou([0, 0, 10, 10], [20, 20, 30, 30]) == 0.0
    assert abs(iou([0, 0, 10, 10], [5, 0, 15, 10]) - 50 / 150) < 1e-12


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 50), min_size=8, max_size=8))
def test_iou_symmetric_and_bounded(v):
    a = [min(v[0], v[1]), min(v[2], v[3]), max(v[0], v[1]) + 1, max(v[2], v[3]) + 1]
    b = [min(v[4], v[5]), min(v[6], v[7]), max(v[4], v[5]) + 1, max(v[6], v[7]) + 1]
    x, y = iou(a, b), iou(b, a)
    assert x == y
    assert 0.0 <= x <= 1.0
    assert abs(x - iou_ref(a, b)) < 1e-12
    if x == 1.0:
        np.testing.assert_allclose(a, b, atol=1e-9)


def test_box_coding_round_trip():
    rng = np.random.default_rng(0)
    anchors = _random_boxes(rng, 20)
    gt = _random_boxes(rng, 20)
    np.testing.assert_allclose(decode_boxes(anchors, encode_boxes(anchors, gt)), gt, atol=1e-9)


def test_decode_single_anchor_zero_deltas():
    anchor = np.array([[10.0, 12.0, 30.0, 40.0]])
    props = decode_and_nms(anchor, [0.3], np.zeros((1, 4)), top_n=5, nms_iou=0.7)
    assert len(props) == 1
    np.testing.assert_allclose(props[0].box, anchor[0])


def test_nms_identical_boxes():
    boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10]], dtype=float)
    props = decode_and_nms(boxes, [0.9, 0.8], np.zeros((2, 4)), top_n=10, nms_iou=0.5)
    assert len(props) == 1 and props[0].objectness == 0.9


@pytest.mark.parametrize("seed", range(25))
def test_nms_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 21))
    boxes = _random_boxes(rng, n)
    scores = rng.uniform(size=n).round(1)  # rounding produces ties
    thr = float(rng.uniform(0.2, 0.8))
    assert nms(boxes, scores, thr) == nms_ref(boxes.tolist(), scores.tolist(), thr)


@pytest.mark.parametrize("seed", range(10))
def test_decode_and_nms_properties(seed):
    rng = np.random.default_rng(seed)
    anchors = generate_anchors(4, 4, 8, (8, 16), (1.0,))
    deltas = rng.normal(0, 0.2, (len(anchors), 4))
    obj = rng.uniform(size=len(anchors))
    props = decode_and_nms(anchors, obj, deltas, top_n=10, nms_iou=0.6, image_size=(32, 32))
    assert len(props) <= 10
    scores = [p.objectness for p in props]
    assert scores == sorted(scores, reverse=True)
    boxes = np.array([p.box for p in props])
    ov = box_iou(boxes, boxes)
    np.fill_diagonal(ov, 0)
    assert (ov < 0.6).all()
    assert (boxes >= 0).all() and (boxes <= 32).all()


def test_decode_and_nms_tie_break_lower_index():
    boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10.5]], dtype=float)
    props = decode_and_nms(boxes, [0.5, 0.5], np.zeros((2, 4)), top_n=1, nms_iou=0.5)
    assert props[0].anchor_index == 0


def test_decode_and_nms_errors():
    with pytest.raises(ValueError):
        decode_and_nms(np.zeros((0, 4)), [], np.zeros((0, 4)))
    with pytest.raises(ShapeMismatchError):
        decode_and_nms(np.zeros((2, 4)), [0.1], np.zeros((2, 4)))


def test_roi_constant_map():
    fm = torch.full((3, 4, 4), 2.0)
    patch = roi_extract(fm, [0, 0, 32, 32], 8)
    assert patch.shape == (3, 7, 7) and torch.all(patch == 2.0)


def test_roi_cell_aligned_copy():
    fm = torch.arange(2 * 10 * 10, dtype=torch.float32).view(2, 10, 10)
    patch = roi_extract(fm, [8, 16, 64, 72], 8)  # exactly 7x7 cells starting at (row 2, col 1)
    assert torch.equal(patch, fm[:, 2:9, 1:8])


def test_roi_sub_cell_box_replicates():
    fm = torch.randn(3, 4, 4)
    patch = roi_extract(fm, [9, 9, 10, 10], 8)
    assert torch.all(patch == fm[:, 1, 1][:, None, None])


@pytest.mark.parametrize("seed", range(10))
def test_roi_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    fm = rng.normal(size=(3, 8, 8))
    box = _random_boxes(rng, 1)[0]
    np.testing.assert_array_equal(roi_extract(torch.from_numpy(fm), box, 8).numpy(), roi_ref(fm, box, 8))


def test_roi_batch_matches_single():
    rng = np.random.default_rng(1)
    fm = torch.randn(2, 3, 8, 8)
    boxes = _random_boxes(rng, 5)
    idx = np.array([0, 1, 1, 0, 1])
    batch = roi_extract_batch(fm, boxes, idx, 8)
    for k in range(5):
        assert torch.equal(batch[k], roi_extract(fm[idx[k]], boxes[k], 8))


def test_label_proposals_cases():
    gt = np.array([[0, 0, 10, 10]], dtype=float)
    assert label_proposals(gt, gt).tolist() == [1]
    # IoU 0.49 with the only gt
    w = 10 * 0.49
    assert iou([0, 0, w, 10], gt[0]) < 0.5
    assert label_proposals([[0, 0, w, 10]], gt).tolist() == [0]
    assert label_proposals([[0, 0, 5, 5]], np.zeros((0, 4))).tolist() == [0]


@pytest.mark.parametrize("seed", range(10))
def test_label_proposals_oracle_and_order_invariance(seed):
    rng = np.random.default_rng(seed)
    props, gts = _random_boxes(rng, 12), _random_boxes(rng, 3)
    labels = label_proposals(props, gts)
    ref = [int(max(iou_ref(p, g) for g in gts) >= 0.5) for p in props]
    assert labels.tolist() == ref
    perm = rng.permutation(12)
    assert label_proposals(props[perm], gts).tolist() == [ref[i] for i in perm]


def test_rpn_zero_map_zero_bias():
    head = RPNHead(8, 6)
    init_uniform_fan_in(head, torch.Generator().manual_seed(0))
    logits, deltas = rpn_forward(head, torch.zeros(8, 4, 4))
    assert torch.count_nonzero(logits) == 0 and torch.count_nonzero(deltas) == 0


def test_rpn_output_count_matches_anchors():
    head = RPNHead(8, 9)
    logits, deltas = rpn_forward(head, torch.randn(2, 8, 5, 6))
    n = len(generate_anchors(6, 5, 8))
    assert logits.shape == (2, n) and deltas.shape == (2, n, 4)


def test_rpn_output_order_matches_anchor_order():
    head = RPNHead(4, 2)
    init_uniform_fan_in(head, torch.Generator().manual_seed(1))
    fm = torch.randn(4, 3, 5)
    logits, _ = rpn_forward(head, fm)
    import torch.nn.functional as F
    raw = head.cls(F.relu(head.conv(fm[None])))[0]  # (A, h, w)
    # anchor index = (row * w + col) * A + a
    assert torch.allclose(logits[(1 * 5 + 3) * 2 + 1], raw[1, 1, 3])


def test_rpn_depth_mismatch():
    with pytest.raises(ShapeMismatchError):
        rpn_forward(RPNHead(8), torch.zeros(4, 3, 3))


def test_rpn_gradients():
    torch.manual_seed(0)
    head = RPNHead(3, 2).double()
    init_uniform_fan_in(head, torch.Generator().manual_seed(2))
    with torch.no_grad():
        for p in head.parameters():
            if p.dim() == 1:
                p.normal_(0, 0.1)
    fm = torch.randn(1, 3, 3, 3, dtype=torch.float64)

    def loss():
        lg, dl = head(fm)
        return (torch.sin(lg) ** 2).sum() + (dl ** 2).sum()

    assert finite_diff_check(loss, list(head.parameters())) < 1e-4


def test_anchor_targets_and_loss():
    anchors = generate_anchors(4, 4, 8, (16,), (1.0,))
    gt = np.array([[4.0, 4.0, 20.0, 20.0]])
    labels, targets = anchor_targets(anchors, gt)
    assert labels.sum() >= 1
    np.testing.assert_allclose(decode_boxes(anchors[labels == 1], targets[labels == 1])[0], gt[0], atol=1e-9)
    logits = torch.zeros(1, len(anchors), requires_grad=True)
    deltas = torch.zeros(1, len(anchors), 4, requires_grad=True)
    cls, reg = rpn_loss(logits, deltas, anchors, [gt], np.random.default_rng(0), batch_per_image=8)
    assert abs(cls.item() - np.log(2)) < 1e-6
    assert reg.item() >= 0
    (cls + reg).backward()
    assert logits.grad is not None
