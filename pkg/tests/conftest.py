import numpy as np
import pytest

from textsr import tensor as T


@pytest.fixture(autouse=True)
def _fp64_default():
    # Gradient oracles are unreliable in 32-bit; tests opt into 32-bit
    # explicitly when they exercise the training path.
    prev = T.get_precision()
    T.set_precision(64)
    yield
    T.set_precision(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
