"""Shared fixtures: a small trained checkpoint for service and CLI tests."""

import pytest
import torch

from shapecap.config import TrainConfig
from shapecap.data import generate_dataset
from shapecap.training import train

torch.set_num_threads(1)


TINY_CFG = dict(
    seed=0,
    dim=32,
    heads=4,
    depth=2,
    enc_channels=(8, 8, 16, 16),
    d_joint=32,
    steps=10,
    batch_size=2,
    dataset_size=4,
    eval_size=2,
    lr=1e-3,
    epochs_stage1=1,
    epochs_stage2=1,
    warmup_epochs=1,
    plateau_patience=5,
)


@pytest.fixture(scope="session")
def tiny_config() -> TrainConfig:
    return TrainConfig(**TINY_CFG)


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory) -> str:
    """Checkpoint from a minimal real training run (not a good model)."""
    out_dir = tmp_path_factory.mktemp("tiny_run")
    cfg = TrainConfig(**TINY_CFG)
    result = train(
        cfg,
        generate_dataset(0, 4),
        generate_dataset(1, 2),
        out_dir=str(out_dir),
    )
    return result.checkpoint_path
