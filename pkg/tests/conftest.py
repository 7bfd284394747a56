import time
from dataclasses import dataclass

import numpy as np
import pytest
import torch

from trd.config import from_dict
from trd.datasets import ToyConfig, generate_toy
from trd.networks import get_profile
from trd.trainer import evaluate, train

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def toy_profile():
    return get_profile("toy")


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@dataclass
class ToyRun:
    cfg: object
    result: object
    evaluation: object
    checkpoint: object
    train_seconds: float
    eval_seconds: float


def _toy_run(tmp_dir, **overrides) -> ToyRun:
    cfg = from_dict(overrides={"trainer.epochs": 50, "trainer.seed": 0, "data.seed": 0, **overrides})
    train_data, val_data, test_data = generate_toy(ToyConfig.from_run_config(cfg))
    tic = time.perf_counter()
    result = train(cfg, train_data, val_data, checkpoint_path=tmp_dir / "model.ckpt")
    t_train = time.perf_counter() - tic
    tic = time.perf_counter()
    ev = evaluate(result.model, test_data, cfg)
    t_eval = time.perf_counter() - tic
    return ToyRun(cfg, result, ev, tmp_dir / "model.ckpt", t_train, t_eval)


@pytest.fixture(scope="session")
def toy_data():
    cfg = from_dict()
    return generate_toy(ToyConfig.from_run_config(cfg))


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """The reference desk-scale run: toy profile, seed 0, 50 epochs."""
    return _toy_run(tmp_path_factory.mktemp("run_main"))


@pytest.fixture(scope="session")
def toy_run_repeat(tmp_path_factory):
    return _toy_run(tmp_path_factory.mktemp("run_repeat"))


@pytest.fixture(scope="session")
def toy_run_no_ca(tmp_path_factory):
    return _toy_run(tmp_path_factory.mktemp("run_no_ca"), **{"ca.enabled": False})
