import numpy as np
import pytest
from threadpoolctl import threadpool_limits


@pytest.fixture(scope="session", autouse=True)
def single_threaded_blas():
    # tiny matrices everywhere; thread pools only add contention and noise
    with threadpool_limits(limits=1):
        yield


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
