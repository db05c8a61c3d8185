"""
Shared fixtures for the test suite.
"""

import copy

import pytest

from neuro_vesicles.models import ExperimentConfig
from neuro_vesicles.parser import ConfigParser

# Three graph nodes, one per network layer: input(2) -> hidden(3) -> output(1).
CHAIN_CONFIG = {
    "graph": {"num_nodes": 3, "edges": [[0, 1], [1, 2]]},
    "network": {"widths": [2, 3, 1], "learning_rate": 0.05},
    "vesicles": {"content_dim": 2, "num_types": 1},
    "kernels": {"max_emit_per_node": 2},
    "release": {"memory_dim": 2},
    "run": {"seed": 7, "steps": 5},
}


def make_config(**overrides) -> ExperimentConfig:
    """Chain configuration with section-level overrides merged in."""
    data = copy.deepcopy(CHAIN_CONFIG)
    for section, values in overrides.items():
        data.setdefault(section, {}).update(values)
    return ConfigParser.parse_from_dict(data)


@pytest.fixture
def config_factory():
    """Factory building the chain configuration with overrides."""
    return make_config


@pytest.fixture
def chain_dict():
    """Raw mapping of the chain configuration."""
    return copy.deepcopy(CHAIN_CONFIG)


@pytest.fixture
def chain_config() -> ExperimentConfig:
    """Validated chain configuration."""
    return make_config()


@pytest.fixture
def consistency_config() -> ExperimentConfig:
    """Three-node chain with frozen emission at node 0 and geometric decay."""
    return make_config(
        vesicles={"types": [{"decay_rate": 0.2}]},
        density={"frozen_emission": [[0.3], [0.0], [0.0]], "horizon": 20, "n_runs": 10000},
    )
