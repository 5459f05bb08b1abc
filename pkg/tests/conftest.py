import numpy as np
import pytest

from mfldp.models import const2_model, csma_model, sis_bistable_model


@pytest.fixture(scope="session")
def const2():
    return const2_model()


@pytest.fixture(scope="session")
def sis():
    return sis_bistable_model()


@pytest.fixture(scope="session")
def csma():
    return csma_model()


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(12345))


def kl(x, p):
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    return float(np.sum(x * np.log(x / p)))
