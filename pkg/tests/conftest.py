import os

import numpy as np
import pytest

from app.config import config as app_config
from app.core.checkpoint import Checkpoint
from app.core.rng import RngState
from app.core.transformer import init_params
from app.models.model_config import ModelConfig
from app.models.training import ScheduleConfig, TaskConfig, TrainConfig


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-thousand-step training runs (set RUN_SLOW_TESTS=1)")


def pytest_collection_modifyitems(config, items):
    if os.getenv("RUN_SLOW_TESTS") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set RUN_SLOW_TESTS=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def tiny_model(**overrides) -> ModelConfig:
    fields = dict(num_layers=2, d_model=8, d_ff=16, num_heads=2, vocab_size=11, seq_len=6, group_size=4096)
    fields.update(overrides)
    return ModelConfig(**fields)


def dense_checkpoint(cfg: ModelConfig, seed: int = 0, step: int = 0) -> Checkpoint:
    return Checkpoint(config=cfg, params=init_params(cfg, RngState(seed=seed)), step=step, rng=RngState(seed=seed))


@pytest.fixture
def tiny_config() -> ModelConfig:
    return tiny_model()


@pytest.fixture
def dense_ckpt(tiny_config) -> Checkpoint:
    return dense_checkpoint(tiny_config)


@pytest.fixture
def task_config() -> TaskConfig:
    return TaskConfig(seed=0, num_clusters=2, vocab_size=11, seq_len=6, eval_tokens=48, mask_fraction=0.34)


@pytest.fixture
def train_config() -> TrainConfig:
    return TrainConfig(
        arm="dense_continue",
        seed=0,
        steps=3,
        batch_size=4,
        eval_every=2,
        schedule=ScheduleConfig(peak_lr=0.01, warmup_steps=2, timescale=10),
    )


@pytest.fixture
def random_probs():
    def make(num_tokens: int, num_experts: int, seed: int = 0) -> np.ndarray:
        logits = np.random.default_rng(seed).normal(size=(num_tokens, num_experts))
        exps = np.exp(logits - logits.max(axis=1, keepdims=True))
        return exps / exps.sum(axis=1, keepdims=True)
    return make


@pytest.fixture
def isolated_env(tmp_path, monkeypatch):
    """Run outputs, presets and the run registry under ``tmp_path``."""
    monkeypatch.setattr(app_config, "RUNS_PATH", str(tmp_path / "runs"))
    monkeypatch.setattr(app_config, "DATABASE_URL", "")
    monkeypatch.setattr(app_config, "MAX_CONCURRENT_RUNS", 2)
    return tmp_path
