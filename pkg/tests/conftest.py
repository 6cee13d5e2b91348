from __future__ import annotations

import numpy as np
import pytest
import torch

import probprompt  # noqa: F401  (float64 default)
from probprompt.config import acceptance_config
from probprompt.training import make_dataset


@pytest.fixture(scope="session")
def acc_cfg():
    return acceptance_config()


@pytest.fixture(scope="session")
def acc_data(acc_cfg):
    return make_dataset(acc_cfg)


@pytest.fixture
def gen():
    g = torch.Generator()
    g.manual_seed(1234)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
