import json

import numpy as np
from PIL import Image

from conftest import tiny_config
from mmloc.cli import EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE, EXIT_OK, main
from mmloc.config import dump_config


def _config_file(tmp_path, **changes):
    p = tmp_path / "cfg.txt"
    p.write_text(dump_config(tiny_config(**changes)))
    return p


def test_gen_train_eval_localize(tmp_path, capsys):
    cfg = _config_file(tmp_path)
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "ds")]) == EXIT_OK
    assert (tmp_path / "ds" / "annotations.json").is_file()
    ckpt = tmp_path / "m.npz"
    assert main(["train", "--config", str(cfg), "--data", str(tmp_path / "ds"), "--out", str(ckpt)]) == EXIT_OK
    report = tmp_path / "r.json"
    assert main(["eval", "--ckpt", str(ckpt), "--split", "open", "--fusion", "late", "--report", str(report),
                 "--data", str(tmp_path / "ds")]) == EXIT_OK
    rep = json.loads(report.read_text())
    assert rep["meta"]["fusion"] == "late" and report.with_suffix(".txt").is_file()

    image = next((tmp_path / "ds" / "scenes").glob("test_*.png"))
    capsys.readouterr()
    assert main(["localize", "--ckpt", str(ckpt), "--image", str(image), "--category", "circle",
                 "--category", "square", "--top-n", "3", "--render", str(tmp_path / "o.png"),
                 "--dump-attention", str(tmp_path / "att")]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert [o["category"] for o in out] == ["circle", "square"]
    assert all(len(o["detections"]) == 3 for o in out)
    assert Image.open(tmp_path / "o.png").size == (128, 128)
    side = json.loads((tmp_path / "att_1.json").read_text())
    assert side == {"w": 16, "h": 16, "K": 256.0, "query_id": 1}
    assert np.asarray(Image.open(tmp_path / "att_1.png")).shape == (16, 16)


def test_exit_codes(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("K = -1\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["eval", "--ckpt", str(tmp_path / "missing.npz")]) == EXIT_DATA
    assert main(["train", "--config", str(_config_file(tmp_path)), "--data", str(tmp_path / "nodata"),
                 "--out", str(tmp_path / "m.npz")]) == EXIT_DATA
    div = _config_file(tmp_path, lr=1e30, grad_clip=1e38, momentum=0.0, epochs_stage2=0)
    assert main(["train", "--config", str(div), "--out", str(tmp_path / "m.npz")]) == EXIT_DIVERGENCE


def test_seed_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("MMLOC_SEED", "5")
    cfg = _config_file(tmp_path)
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "ds")]) == EXIT_OK
    assert json.loads((tmp_path / "ds" / "split.json").read_text())["seed"] == 5


def test_empty_sweep_exits_zero(tmp_path):
    grid = tmp_path / "g.txt"
    grid.write_text("# nothing\n")
    assert main(["sweep", "--config", str(_config_file(tmp_path)), "--grid", str(grid),
                 "--out", str(tmp_path / "sw")]) == EXIT_OK
    bad = tmp_path / "b.txt"
    bad.write_text("lr = 1\n")
    assert main(["sweep", "--grid", str(bad)]) == EXIT_CONFIG
