import numpy as np
import pytest

from fedtrade.engine import TrainingConfig, cell_federation
from fedtrade.model import ModelSpec
from fedtrade.synthdata import make_federation


@pytest.fixture(scope="session")
def cls_federation():
    """Small mixed-shift classification federation shared across tests."""
    fed = cell_federation("cls", 0.6, 0.4, seed=7, n_per_client=(36, 20, 28, 44))
    return fed, make_federation(fed)


@pytest.fixture(scope="session")
def seg_federation():
    fed = cell_federation("seg", 0.5, 0.5, seed=11, n_per_client=(16, 16, 16, 16))
    return fed, make_federation(fed)


@pytest.fixture(scope="session")
def cls_model():
    return ModelSpec("mlp_bn", (32 * 32,), out_dim=2)


@pytest.fixture(scope="session")
def seg_model():
    return ModelSpec("tiny_convseg", (1, 32, 32), out_dim=1)


@pytest.fixture
def tiny_train():
    return TrainingConfig(rounds=2, epochs=1, lr=0.1, batch_size=16)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
