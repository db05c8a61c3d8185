"""
Keyed random streams.

Every random decision draws from a generator keyed by (seed, phase, keys...),
so adding or removing one vesicle never shifts another vesicle's draws.
"""

from enum import IntEnum

from numpy.random import PCG64, Generator, SeedSequence


class Phase(IntEnum):
    """Stream namespaces, one per kind of random decision."""
    INIT = 0
    DATA = 1
    EMIT = 2
    SPAWN = 3
    MOVE = 4
    DOCK = 5
    DECAY = 6
    CONSISTENCY = 9
    SNN_TOPOLOGY = 10
    SNN_INPUT = 11
    POLICY = 12
    REGISTRY = 13


def stream(seed: int, phase: Phase, *keys: int) -> Generator:
    """
    Independent generator for one (phase, entity) pair.

    Args:
        seed: Run seed
        phase: Decision namespace
        keys: Further non-negative integer keys (step, vesicle id, node, ...)

    Returns:
        A fresh PCG64 generator; identical arguments give identical draws
    """
    entropy = [int(seed), int(phase), *(int(key) for key in keys)]
    return Generator(PCG64(SeedSequence(entropy)))

