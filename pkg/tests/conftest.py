import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedbe.nn_core import ModelSpec, init_model

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")


@pytest.fixture
def small_spec():
    return ModelSpec(L=2, d=16, heads=2, d_ff=32, V=32, T_max=8, K=4)


@pytest.fixture
def small_model(small_spec):
    return init_model(small_spec, seed=3)


@pytest.fixture
def small_batch(small_spec):
    rng = np.random.default_rng(11)
    tokens = rng.integers(0, small_spec.V, size=(5, small_spec.T_max))
    labels = rng.integers(0, small_spec.K, size=5)
    return tokens, labels


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
