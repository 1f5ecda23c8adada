import numpy as np
import pytest
import torch

from windcorr.model import ModelConfig


@pytest.fixture(autouse=True)
def _fixed_torch_state():
    torch.manual_seed(1234)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


@pytest.fixture
def tiny_config():
    return ModelConfig(
        hidden_dim=16,
        n_heads=2,
        n_encoder_layers=2,
        n_decoder_layers=2,
        harmonic_degree=2,
        dropout=0.0,
        max_obs_tokens=64,
    )
