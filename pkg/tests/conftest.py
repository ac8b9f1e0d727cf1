import numpy as np
import pytest
from hypothesis import settings

from ctmc_perturb import zoo
from ctmc_perturb.qmatrix import Window

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def two_state_pair():
    return zoo.two_state(), zoo.two_state_perturbation(), Window(1)


@pytest.fixture
def random_pair():
    r, a = zoo.random_pair(20, 7)
    return r, a, Window(19)


@pytest.fixture
def example1_small():
    r, a = zoo.example1()
    return r, a, Window(30)


@pytest.fixture
def rng():
    return np.random.default_rng(20261015)
