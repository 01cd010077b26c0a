import numpy as np
import pytest
import torch

from speatforge.model import ModelConfig

# Single-threaded torch keeps tiny-model timings flat and runs reproducible.
torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(n_layers=2, hidden_dim=32, ffw_dim=48, n_heads=4,
                       n_clusters=16, input_dim=40)


@pytest.fixture
def grad_config():
    # smallest config worth differentiating through
    return ModelConfig(n_layers=1, hidden_dim=8, ffw_dim=16, n_heads=2,
                       n_clusters=5, input_dim=6)
