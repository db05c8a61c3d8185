"""
Neuro-Vesicle simulation engine

Couples a feed-forward network with a population of discrete vesicles that
emit, migrate, dock and release on the network's computation graph, plus the
mean-field density, spiking-network and policy-learning variants.
"""

__version__ = "0.1.0"

from .graph import ComputationGraph, GraphError
from .models import ExperimentConfig, RunMode
from .network import NetworkState
from .parser import ConfigParseError, ConfigParser
from .simulation import CoupledSimulator, RunResult, SimulationAbort, run
from .vesicles import Vesicle, VesicleConfig, VesicleTypeRegistry

__all__ = [
    "ComputationGraph",
    "ConfigParseError",
    "ConfigParser",
    "CoupledSimulator",
    "ExperimentConfig",
    "GraphError",
    "NetworkState",
    "RunMode",
    "RunResult",
    "SimulationAbort",
    "Vesicle",
    "VesicleConfig",
    "VesicleTypeRegistry",
    "run",
]
