"""Shared fixtures for the fairshare test suite"""

import numpy as np
import pytest

from fairshare.capacity import CapacityRegion
from fairshare.scenarios import builtin_scenarios
from fairshare.traffic import TrafficModel


@pytest.fixture(scope="session")
def builtins():
    return builtin_scenarios()


@pytest.fixture
def unit_link():
    return CapacityRegion.single_link(1)


@pytest.fixture
def shared_link():
    return CapacityRegion.single_link(2)


@pytest.fixture
def two_link():
    return CapacityRegion.from_lists([[1, 0, 1], [0, 1, 1]], [1, 1])


@pytest.fixture
def line_network():
    return CapacityRegion.from_lists(
        [[1, 1, 0, 0], [1, 0, 1, 0], [1, 0, 0, 1]],
        [1, 1, 1],
    )


@pytest.fixture
def shared_model():
    return TrafficModel.without_routing([0.3, 0.3], [1.0, 1.0])


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(12345))
