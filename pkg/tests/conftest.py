import numpy as np
import pytest

from prompt_impute import autodiff as ad


@pytest.fixture(autouse=True)
def fresh_tape():
    ad.get_tape().reset()
    yield
    ad.get_tape().reset()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
