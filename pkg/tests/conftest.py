import numpy as np
import pytest
import torch

from models.schemas import DatasetMeta, EnvMeta, HyperParams, ModelConfig
from services.dataset import Dataset, Episode


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _float64_default(monkeypatch):
    monkeypatch.delenv("ORYX_PRECISION", raising=False)
    torch.manual_seed(0)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(obs_dim=5, action_count=3, n_agents=3, embed_dim=8, num_blocks=1, num_heads=2,
                       chunk_size=4, ffn_multiplier=2)


@pytest.fixture
def tiny_hp():
    return HyperParams(batch_size=3, sequence_length=4, alpha_policy=0.5, alpha_critic=10.0)


def make_env_meta(n_agents=3, action_count=3, obs_dim=5, name="synthetic"):
    return EnvMeta(name=name, n_agents=n_agents, action_count=action_count, obs_dim=obs_dim, step_limit=50)


def make_random_dataset(rng, episodes=5, n_agents=3, action_count=3, obs_dim=5, max_length=7,
                        precision="float64"):
    built = []
    for _ in range(episodes):
        length = int(rng.integers(1, max_length + 1))
        rewards = rng.normal(size=length)
        built.append(Episode(
            observations=rng.normal(size=(length, n_agents, obs_dim)),
            actions=rng.integers(0, action_count, size=(length, n_agents)).astype(np.uint32),
            rewards=rewards,
            terminal=bool(rng.integers(2)),
        ))
    meta = DatasetMeta(
        env=make_env_meta(n_agents, action_count, obs_dim),
        n_agents=n_agents,
        transition_count=sum(ep.length for ep in built),
        episode_count=len(built),
        seed=0,
        generator={"policy": "synthetic"},
        precision=precision,
    )
    return Dataset(meta, built)


@pytest.fixture
def random_dataset():
    return make_random_dataset(np.random.default_rng(0))
