"""
Stochastic kernels: emission, migration, docking and decay.

Kernels are pure functions of the node features, the registry and a random
stream. Probabilities are clamped to [1e-12, 1 - 1e-12].
"""

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np
from numpy.random import Generator
from scipy.special import expit

from .graph import ComputationGraph
from .models import EmissionModel, KernelSpec
from .network import NetworkState
from .rng import Phase, stream
from .vesicles import Vesicle, VesicleConfig, VesicleTypeRegistry

logger = logging.getLogger(__name__)

PROB_EPS = 1e-12
# Hard stop for Poisson inversion; far above any clamp in use.
POISSON_MAX_COUNT = 1000

StreamFor = Callable[[int], Generator]


@dataclass
class EmissionEvent:
    """Number of new vesicles of one type at one node."""
    node: int
    type_id: int
    count: int
    intensity: float


def sigmoid(x: float) -> float:
    """Logistic function clamped away from 0 and 1."""
    return float(np.clip(expit(x), PROB_EPS, 1.0 - PROB_EPS))


def feature_matrix(net: NetworkState, graph: ComputationGraph) -> np.ndarray:
    """Node features of every graph node, one row per node."""
    return np.stack([net.node_features(layer) for layer in graph.layer_of])


def emission_intensity(registry: VesicleTypeRegistry, type_id: int, features: np.ndarray) -> float:
    """lambda = sigma(u_kappa . psi_emit(features))."""
    encoded = registry.emit_encoder(features)
    return sigmoid(float(registry.types[type_id].emit_vec @ encoded))


def emission_intensities(registry: VesicleTypeRegistry, features: np.ndarray) -> np.ndarray:
    """|V| x K matrix of emission intensities."""
    return np.array(
        [[emission_intensity(registry, k, row) for k in range(registry.num_types)] for row in features]
    )


def poisson_inverse(rate: float, u: float) -> int:
    """
    Poisson(rate) draw by CDF inversion of a single uniform.

    Args:
        rate: Non-negative mean
        u: Uniform draw in [0, 1)

    Returns:
        Smallest k with u < F(k)
    """
    prob = np.exp(-rate)
    cdf = prob
    count = 0
    while u >= cdf and count < POISSON_MAX_COUNT:
        count += 1
        prob *= rate / count
        cdf += prob
    return count


def emission_count(spec: KernelSpec, intensity: float, rng: Generator, clamp: bool = True) -> int:
    """Count of new vesicles for one (node, type) under the configured count model."""
    u = float(rng.random())
    if spec.emission_model == EmissionModel.BERNOULLI:
        count = int(u < intensity)
    else:
        count = poisson_inverse(intensity, u)
    return min(count, spec.max_emit_per_node) if clamp else count


def sample_emissions(
    registry: VesicleTypeRegistry,
    features: np.ndarray,
    spec: KernelSpec,
    seed: int,
    step: int,
) -> List[EmissionEvent]:
    """
    Emission events for every (node, type), in node-then-type order.

    Each pair draws from its own stream keyed by (step, node, type).
    """
    events = []
    for node, row in enumerate(features):
        for type_id in range(registry.num_types):
            intensity = emission_intensity(registry, type_id, row)
            count = emission_count(spec, intensity, stream(seed, Phase.EMIT, step, node, type_id))
            events.append(EmissionEvent(node, type_id, count, intensity))
    return events


def migration_distribution(
    registry: VesicleTypeRegistry, vesicle: Vesicle, features: np.ndarray
) -> np.ndarray:
    """
    P(l') proportional to T[l, l'] * exp(gamma * q(l')), q = gradient norm at l'.

    Args:
        registry: Type parameters
        vesicle: Moving vesicle
        features: Node feature matrix (column 2 holds the gradient norm)

    Returns:
        Probability vector over all nodes; a degenerate row becomes a self-loop
    """
    row = registry.transition_matrix(vesicle.type_id)[vesicle.location]
    support = row > 0
    distribution = np.zeros_like(row)
    if not np.any(support):
        distribution[vesicle.location] = 1.0
        return distribution
    scores = registry.types[vesicle.type_id].temperature * features[:, 2]
    scores = scores - scores[support].max()
    weights = np.where(support, row * np.exp(np.where(support, scores, 0.0)), 0.0)
    total = weights.sum()
    if not np.isfinite(total) or total <= 0:
        distribution[vesicle.location] = 1.0
        return distribution
    return weights / total


def sample_move(distribution: np.ndarray, rng: Generator) -> int:
    """Inverse-CDF categorical draw; ties resolve toward the lower node index."""
    cdf = np.cumsum(distribution)
    index = int(np.searchsorted(cdf, float(rng.random()) * cdf[-1], side="right"))
    last_nonzero = int(np.flatnonzero(distribution)[-1])
    return min(index, last_nonzero)


def docking_probability(registry: VesicleTypeRegistry, vesicle: Vesicle, features: np.ndarray) -> float:
    """
    p_dock = sigma(w_kappa . psi_dock([features; content; budget])).

    Args:
        features: Feature row of the vesicle's node
    """
    dock_input = np.concatenate([features, vesicle.content, [vesicle.internal.budget]])
    encoded = registry.dock_encoder(dock_input)
    return sigmoid(float(registry.types[vesicle.type_id].dock_vec @ encoded))


def decay_step(
    cfg: VesicleConfig,
    dt: float,
    rng: Optional[StreamFor] = None,
    noise_std: float = 0.0,
    absorbed: Iterable[int] = (),
    removal_rates: Optional[Sequence[float]] = None,
) -> List[int]:
    """
    Age every vesicle by dt (plus optional Gaussian noise) and remove the dead.

    With `removal_rates` the lifetime countdown is replaced by geometric
    survival: a vesicle of type k is removed with probability removal_rates[k].

    Args:
        cfg: Vesicle multiset, modified in place
        dt: Time step, must be positive
        rng: Maps a vesicle id to its decay stream (needed for noise or geometric removal)
        noise_std: Std of the lifetime noise
        absorbed: Ids removed regardless of lifetime
        removal_rates: Per-type removal probabilities

    Returns:
        Sorted ids of removed vesicles
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if rng is None and (noise_std > 0 or removal_rates is not None):
        raise ValueError("Lifetime noise and geometric removal require a random stream")
    absorbed_ids = set(absorbed)
    removed = []
    for vesicle in cfg.vesicles:
        if removal_rates is not None:
            dead = float(rng(vesicle.id).random()) < removal_rates[vesicle.type_id]
        else:
            vesicle.lifetime -= dt
            if noise_std > 0:
                vesicle.lifetime += noise_std * float(rng(vesicle.id).standard_normal())
            dead = vesicle.lifetime <= 0
        if dead or vesicle.id in absorbed_ids:
            removed.append(vesicle.id)
    cfg.remove(removed)
    return sorted(removed)
