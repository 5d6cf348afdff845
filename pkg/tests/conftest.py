import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from ptnet.model import ModelConfig  # noqa: E402


def tiny_model_config(**overrides) -> ModelConfig:
    """8x8 images, patch 4 -> 2x2 token grid; small enough for f64 checks."""
    base = dict(image_size=8, channels=3, patch=4, dim=8, heads=2, k=3, det_channels=(8, 4),
                det_token_grid=2, d_lm=8, lm_heads=2, lm_layers=1, max_len=10, d_t=6, seed=0)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset_dir(tmp_path_factory):
    """A 40-pair synthetic benchmark on disk, shared by the slower tests."""
    from ptnet.synthscene import build_dataset

    d = tmp_path_factory.mktemp("data40")
    build_dataset(str(d), 40, seed=11)
    return str(d)


def small_run_config(epochs=3, **train_overrides):
    """A RunConfig for 32x32 data with a narrow model; seconds per epoch."""
    from ptnet.config import RunConfig

    cfg = RunConfig()
    cfg.model.dim = 8
    cfg.model.det_channels = (8, 4)
    cfg.model.d_lm = 16
    cfg.model.lm_layers = 1
    cfg.model.d_t = 8
    cfg.train.epochs = epochs
    for k, v in train_overrides.items():
        setattr(cfg.train, k, v)
    return cfg


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.lines():
            terminalreporter.write_line(line)
