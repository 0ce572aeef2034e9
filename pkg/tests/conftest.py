"""Shared fixtures."""

import numpy as np
import pytest

from core.dataset import LabeledDataset
from core.hazard_env import EnvConfig
from core.models import BackboneSpec

SMALL_NOISE = {"noise_support": [-0.03, 0.0, 0.03], "init_spread": 0.2, "episode_len_max": 1000}


def make_toy_dataset(n_pos: int = 40, n_neg: int = 400, seed: int = 0, prefix: str = "t") -> LabeledDataset:
    """Linearly separable 1-D windows: positives near +1, negatives near -1.

    Every sample is its own one-step episode so episode-level splits work.
    """
    rng = np.random.default_rng(seed)
    X = np.concatenate([1.0 + 0.1 * rng.standard_normal(n_pos), -1.0 + 0.1 * rng.standard_normal(n_neg)])
    y = np.concatenate([np.ones(n_pos), np.zeros(n_neg)]).astype(np.int8)
    ids = np.array([f"{prefix}{i:05d}" for i in range(len(y))], dtype=object)
    return LabeledDataset(
        X=X.astype(np.float32).reshape(-1, 1, 1),
        y=y,
        episode_ids=ids,
        steps=np.zeros(len(y), dtype=np.int64),
        critical=y.astype(bool),
        manifest={"horizon": 1, "window_len": 1, "state_dim": 1},
    )


@pytest.fixture
def env_config():
    """Small-noise environment the oracle examples are written against."""
    return EnvConfig(**SMALL_NOISE)


@pytest.fixture
def busy_env():
    """Environment where roughly one episode in six is critical."""
    return EnvConfig(**(SMALL_NOISE | {"rarity_scale": 2.5, "episode_len_max": 60}))


@pytest.fixture
def toy_train():
    return make_toy_dataset(seed=0, prefix="a")


@pytest.fixture
def toy_val():
    return make_toy_dataset(n_pos=20, n_neg=200, seed=1, prefix="b")


@pytest.fixture
def toy_spec():
    return BackboneSpec(window_len=1, state_dim=1, hidden=[16], d_feat=8)
