"""Shared fixtures: tiny grids, a tiny toy dataset, a tiny model config"""
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from core.data import compute_norm_stats  # noqa: E402
from core.grid import make_grid  # noqa: E402
from core.model import ModelConfig  # noqa: E402
from features.toy_atmosphere import ToyConfig, generate_toy_dataset  # noqa: E402


@pytest.fixture
def small_grid():
    return make_grid(8, 16)


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(
        embed_dim=16, depth=2, patch_size=2, n_heads=2, window=(2, 4),
        drop_path_rate=0.0, in_channels=6, out_channels=3,
    )


@pytest.fixture(scope="session")
def toy_cfg():
    return ToyConfig(n_prog_channels=3, n_times=48, seed=5, train_fraction=0.5, val_fraction=0.25)


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory, toy_cfg):
    """48 times on an 8x16 grid (t2m, u10, z500 + statics), stats attached"""
    path = tmp_path_factory.mktemp("toy") / "dataset"
    dataset = generate_toy_dataset(toy_cfg, make_grid(8, 16), path, shard_times=20)
    return dataset.with_stats(compute_norm_stats(dataset))
