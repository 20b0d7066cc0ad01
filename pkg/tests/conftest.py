from __future__ import annotations

import pytest
import torch

from ntdiff.model import DenoiserConfig, ShiftingDenoiser
from ntdiff.schedule import make_linear_schedule


def pytest_configure(config):
    torch.set_num_threads(1)


@pytest.fixture
def tiny_config():
    return DenoiserConfig(resolution=(8, 8), base_channels=4, depth=3, embed_dim=8, horizons=9, max_level=50)


@pytest.fixture
def tiny_model(tiny_config):
    torch.manual_seed(0)
    return ShiftingDenoiser(tiny_config)


@pytest.fixture
def schedule50():
    return make_linear_schedule(50, 1e-3, 0.2)
