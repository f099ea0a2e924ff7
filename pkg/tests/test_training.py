import math

import numpy as np
import pytest
import torch

from conftest import tiny_config
from mmloc.errors import CheckpointError, DivergenceError
from mmloc.model import Localizer
from mmloc.training import (build_train_batch, forward_losses, initial_loss, load_checkpoint, lr_at,
                            make_optimizer, sample_rois, train)


def _params(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


def test_zero_epochs_returns_initial_parameters(tiny_ds):
    cfg = tiny_config(epochs_stage1=0, epochs_stage2=0)
    ck = train(cfg, tiny_ds)
    fresh = type(ck.model)(cfg, len(tiny_ds.vocab))
    for k, v in fresh.state_dict().items():
        assert torch.equal(v, ck.model.state_dict()[k])
    assert ck.epoch == 0 and ck.history == []


def test_training_is_deterministic(tiny_cfg, tiny_ds, tiny_ckpt):
    again = train(tiny_cfg, tiny_ds)
    assert again.history == tiny_ckpt.history
    for k, v in again.model.state_dict().items():
        assert torch.equal(v, tiny_ckpt.model.state_dict()[k])


def test_history_covers_both_stages(tiny_ckpt):
    assert [(h["stage"], h["epoch"]) for h in tiny_ckpt.history] == [(1, 0), (2, 0)]
    for h in tiny_ckpt.history:
        assert {"rpn_cls", "rpn_reg", "query", "total"} <= set(h) and math.isfinite(h["total"])
    assert tiny_ckpt.meta["optimizer_reset_between_stages"] is True


def test_stage_one_leaves_attention_untouched(tiny_ds):
    cfg = tiny_config(epochs_stage2=0)
    ck = train(cfg, tiny_ds)
    fresh = type(ck.model)(cfg, len(tiny_ds.vocab))
    for k, v in fresh.state_dict().items():
        if k.startswith("attention."):
            assert torch.equal(v, ck.model.state_dict()[k]), k


def test_divergence_reports_batch(tiny_ds):
    cfg = tiny_config(lr=1e30, grad_clip=1e38, epochs_stage2=0, momentum=0.0)
    with pytest.raises(DivergenceError) as info:
        train(cfg, tiny_ds)
    assert info.value.batch_id.startswith("stage1/epoch0/batch")


def test_lr_schedule():
    cfg = tiny_config()
    assert [lr_at(cfg, e) for e in (0, 3, 4, 8)] == pytest.approx([0.01, 0.01, 0.001, 0.0001])


def test_sample_rois_includes_gt_and_balances():
    cfg = tiny_config(rois_per_image=8, roi_fg_fraction=0.5)
    gt_q = np.array([[0, 0, 20, 20]], dtype=float)
    gt_all = np.array([[0, 0, 20, 20], [40, 40, 60, 60]], dtype=float)
    boxes, labels = sample_rois([], gt_q, gt_all, cfg, np.random.default_rng(0))
    assert sorted(labels.tolist()) == [0, 1]
    assert boxes.shape == (2, 4)


def test_checkpoint_round_trip(tmp_path, tiny_ckpt):
    path = tiny_ckpt.save(tmp_path / "m.npz")
    back = load_checkpoint(path, tiny_ckpt.config)
    for k, v in tiny_ckpt.model.state_dict().items():
        assert torch.equal(v, back.model.state_dict()[k])
    assert back.history == tiny_ckpt.history and back.meta == tiny_ckpt.meta
    assert back.vocab.words == tiny_ckpt.vocab.words and back.rng_state == tiny_ckpt.rng_state


def test_checkpoint_hash_mismatch_needs_force(tmp_path, tiny_ckpt):
    path = tiny_ckpt.save(tmp_path / "m.npz")
    other = tiny_ckpt.config.replace(K=200.0)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, other)
    assert load_checkpoint(path, other, force=True).config == tiny_ckpt.config


def test_checkpoint_corrupt(tmp_path):
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    np.savez(tmp_path / "nohead.npz", a=np.zeros(2))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nohead.npz")


def test_initial_loss_is_finite(tiny_ckpt, tiny_ds):
    assert math.isfinite(initial_loss(tiny_ckpt, tiny_ds, n_batches=1))


def _losses(cfg, ds, seed=0):
    model = Localizer(cfg, len(ds.vocab))
    batch = build_train_batch(ds.train[:4], ds, cfg, np.random.default_rng(seed), "b", sorted(ds.split.seen))
    return batch, forward_losses(model, batch, cfg.fusion_kind, True, np.random.default_rng(seed))


def test_score_ce_term_is_weighted(tiny_ds):
    _, off = _losses(tiny_config(score_ce_weight=0.0), tiny_ds)
    assert "score_ce" not in off
    _, one = _losses(tiny_config(score_ce_weight=1.0), tiny_ds)
    _, two = _losses(tiny_config(score_ce_weight=2.0), tiny_ds)
    assert one["score_ce"].item() > 0
    assert abs(two["score_ce"].item() - 2 * one["score_ce"].item()) < 1e-5
    assert torch.equal(one["query"], off["query"])


def test_absent_queries_have_no_boxes(tiny_ds):
    batch, losses = _losses(tiny_config(absent_query_prob=1.0, score_ce_weight=1.0), tiny_ds)
    absent = [i for i, c in enumerate(batch.query_category)
              if c not in tiny_ds.train[batch.query_image[i]].categories.tolist()]
    assert len(absent) == 4
    assert all(len(batch.gt_query[i]) == 0 for i in absent)
    assert all(math.isfinite(v.item()) for v in losses.values())


def test_make_optimizer_kinds():
    model = torch.nn.Linear(2, 1)
    sgd = make_optimizer(model, tiny_config(lr=0.02, momentum=0.8))
    assert isinstance(sgd, torch.optim.SGD) and sgd.defaults["momentum"] == 0.8
    adam = make_optimizer(model, tiny_config(optimizer="adam", lr=1e-3, momentum=0.9))
    assert isinstance(adam, torch.optim.Adam) and adam.defaults["betas"] == (0.9, 0.999)
