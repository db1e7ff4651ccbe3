import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from obcbf.scenario import load_scenario

settings.register_profile("obcbf", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("obcbf")

J_INERTIA = np.diag([0.5186, 0.8006, 0.8006])


@pytest.fixture(scope="session")
def case1():
    return load_scenario("double_integrator.toml")


@pytest.fixture(scope="session")
def case2():
    return load_scenario("spacecraft.toml")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
