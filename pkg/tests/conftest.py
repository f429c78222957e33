import numpy as np
import pytest

from moelab.knowledge import generate_dataset, plant_model, preset
from moelab.model import ModelConfig, init_model


def small_config(**kw) -> ModelConfig:
    base = dict(num_layers=3, d_model=16, num_heads=2, head_dim=8, vocab_size=23, num_experts=5, top_k=2,
                has_shared_expert=True, expert_hidden=6, shared_hidden=7, activation="gelu", seed=11,
                max_seq_len=6)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def dataset():
    return generate_dataset(0, 5, 20, vocab_budget=384)


@pytest.fixture(scope="session")
def deep(dataset):
    cfg, plan = preset("deep", dataset, 0)
    return plant_model(cfg, dataset, plan), plan


@pytest.fixture(scope="session")
def shallow(dataset):
    cfg, plan = preset("shallow", dataset, 0)
    return plant_model(cfg, dataset, plan), plan


@pytest.fixture
def tiny():
    return init_model(small_config())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
