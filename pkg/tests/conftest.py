import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from radiomap import tensor as T


@pytest.fixture(autouse=True)
def fresh_graph():
    T.get_graph().clear()
    yield
    T.get_graph().clear()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
