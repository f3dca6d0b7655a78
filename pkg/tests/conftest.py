import numpy as np
import pytest

from mptq.pipeline import make_token_data
from mptq.tensor import init_toy_vit


@pytest.fixture(scope="session")
def small_model():
    return init_toy_vit(3, depth=2)


@pytest.fixture(scope="session")
def small_data():
    return make_token_data(3, samples=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
