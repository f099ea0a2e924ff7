import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mmloc.config import ExperimentConfig  # noqa: E402
from mmloc.data.synthetic import DatasetConfig, generate_dataset  # noqa: E402


def tiny_config(**changes):
    data = DatasetConfig(n_train=8, n_test=4, sketches_per_category=2)
    cfg = ExperimentConfig(data=data, epochs_stage1=1, epochs_stage2=1, batch_size=4, top_n_train=30,
                           top_n_eval=10, recall_budget=20, pre_nms_top_n=200)
    return cfg.replace(**changes)


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_ds(tiny_cfg):
    return generate_dataset(tiny_cfg.data, tiny_cfg.seed)


@pytest.fixture(scope="session")
def tiny_ckpt(tiny_cfg, tiny_ds):
    from mmloc.training import train

    return train(tiny_cfg, tiny_ds)


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    ACCEPTANCE[number] = (bool(ok), detail)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
