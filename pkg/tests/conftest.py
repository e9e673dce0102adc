import numpy as np
import pytest

from funet.tensor import set_checked


@pytest.fixture(autouse=True)
def checked_mode():
    prev = set_checked(True)
    yield
    set_checked(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
