import math

import numpy as np
import pytest

from diffwm import Codec, make_key, make_linear, make_prior


@pytest.fixture(scope="session")
def sched():
    return make_linear()


@pytest.fixture(scope="session")
def prior():
    return make_prior()


@pytest.fixture(scope="session")
def prior1():
    return make_prior(K=1)


@pytest.fixture(scope="session")
def codec():
    return Codec.from_seed(3, 64)


@pytest.fixture(scope="session")
def key(prior):
    return make_key(2, 64, 32, 2.5 * math.sqrt(32), prior.global_mean)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
