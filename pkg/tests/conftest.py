import numpy as np
import pytest

from sharedformer import autodiff as ad


@pytest.fixture
def float64():
    with ad.precision("float64"):
        yield


@pytest.fixture(autouse=True)
def _reset_dtype():
    yield
    ad.set_default_dtype("float32")


def rng(seed):
    return np.random.default_rng(seed)
