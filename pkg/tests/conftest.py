import numpy as np
import pytest

from xres import tensor as T


@pytest.fixture(autouse=True)
def finite_checks():
    """Run every test with forward finite-output assertions enabled."""
    T.set_debug(True)
    yield
    T.set_debug(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(arr, dtype=np.float64):
    """Parameter-like tensor from a numpy array."""
    return T.Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)
