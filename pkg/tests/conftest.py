import numpy as np
import pytest

from odevae.datagen import ScenarioConfig, simulate
from odevae.model import init_params, spec_for_scenario
from odevae.odecore import make_scenario_system


@pytest.fixture(scope="session")
def linear2_small():
    return simulate(ScenarioConfig.for_scenario("linear2", n_individuals=12, seed=5))


@pytest.fixture(scope="session")
def linear2_system():
    return make_scenario_system("linear2")


@pytest.fixture
def linear2_params():
    return init_params(spec_for_scenario("linear2"), np.random.default_rng(11), "linear2")


@pytest.fixture
def tiny_params():
    """A model small enough for exhaustive finite-difference checks."""
    from odevae.model import ModelSpec

    spec = ModelSpec(p=4, q=3, n_eta=2)
    return init_params(spec, np.random.default_rng(3), "linear2")


@pytest.fixture
def tiny_dataset():
    return simulate(ScenarioConfig.for_scenario("linear2", n_individuals=4, p_timevars=4, q_baseline=3,
                                                n_informative=2, seed=9))
