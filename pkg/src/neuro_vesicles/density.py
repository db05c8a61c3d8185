"""
Continuous density relaxation of the vesicle population.

Each (node, type) carries a scalar density rho and a mean content vector C.
The default recursion removes decayed mass before transport,

    rho' = lambda + T^T ((1 - delta) rho),

which is the exact mean of the particle process with geometric removal and
equals the literal form rho + lambda - delta rho + (T^T - I) rho when delta = 0.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .graph import ComputationGraph
from .kernels import EmissionEvent, docking_probability, emission_count, emission_intensities, feature_matrix
from .models import ExperimentConfig, ParticleEngine
from .network import NetworkState, loss
from .release import release_activation
from .rng import Phase, stream
from .simulation import CoupledSimulator, DataStream, KernelController
from .vesicles import Vesicle, VesicleTypeRegistry

logger = logging.getLogger(__name__)

MASS_EPS = 1e-12


@dataclass
class DensityField:
    """rho (|V| x K, non-negative) and mean content (|V| x K x d_c)."""
    rho: np.ndarray
    mean_content: np.ndarray
    clamp_events: int = 0

    @classmethod
    def zeros(cls, num_nodes: int, num_types: int, content_dim: int) -> "DensityField":
        return cls(np.zeros((num_nodes, num_types)), np.zeros((num_nodes, num_types, content_dim)))

    def total_mass(self) -> np.ndarray:
        """Mass per type."""
        return self.rho.sum(axis=0)

    def copy(self) -> "DensityField":
        return DensityField(self.rho.copy(), self.mean_content.copy(), self.clamp_events)


def transition_stack(registry: VesicleTypeRegistry) -> List[np.ndarray]:
    return [registry.transition_matrix(k) for k in range(registry.num_types)]


def decay_rates(registry: VesicleTypeRegistry) -> np.ndarray:
    return np.array([params.decay_rate for params in registry.types])


def density_step(
    field: DensityField,
    registry: VesicleTypeRegistry,
    intensities: np.ndarray,
    emission_content: Optional[np.ndarray] = None,
    literal_vector_form: bool = False,
) -> DensityField:
    """
    One step of the reaction-diffusion recursion for every type.

    Args:
        field: Current field
        registry: Supplies T^(kappa) and delta_kappa
        intensities: Emission intensities lambda, |V| x K
        emission_content: Mean content of newly emitted mass, |V| x K x d_c (zeros by default)
        literal_vector_form: Transport the pre-decay mass; negative results are clamped

    Returns:
        New field (the input is not modified)
    """
    num_nodes, num_types = field.rho.shape
    if emission_content is None:
        emission_content = np.zeros_like(field.mean_content)
    deltas = decay_rates(registry)
    rho_next = np.zeros_like(field.rho)
    content_next = np.zeros_like(field.mean_content)
    clamps = field.clamp_events
    for k, transition in enumerate(transition_stack(registry)):
        rho = field.rho[:, k]
        content = field.mean_content[:, k, :]
        lam = intensities[:, k]
        if literal_vector_form:
            moved = transition.T @ rho
            updated = rho + lam - deltas[k] * rho + (moved - rho)
            numerator = transition.T @ (rho[:, None] * content) - deltas[k] * rho[:, None] * content
        else:
            survived = (1.0 - deltas[k]) * rho
            updated = lam + transition.T @ survived
            numerator = transition.T @ (survived[:, None] * content)
        numerator = numerator + lam[:, None] * emission_content[:, k, :]
        negative = updated < 0
        if np.any(negative):
            for node in np.flatnonzero(negative):
                logger.warning("Clamping negative density %.3e at node %d type %d", updated[node], node, k)
            clamps += int(negative.sum())
            updated = np.where(negative, 0.0, updated)
        rho_next[:, k] = updated
        massive = updated >= MASS_EPS
        safe = np.where(massive, updated, 1.0)
        content_next[:, k, :] = np.where(massive[:, None], numerator / safe[:, None], 0.0)
    return DensityField(rho_next, content_next, clamps)


def emission_field(registry: VesicleTypeRegistry, features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Intensities and mean emitted content at every (node, type) from node features."""
    intensities = emission_intensities(registry, features)
    content = np.stack(
        [
            np.stack([registry.content_distribution(k, row)[0] for k in range(registry.num_types)])
            for row in features
        ]
    )
    return intensities, content


def expected_release(
    field: DensityField,
    registry: VesicleTypeRegistry,
    node: int,
    h: np.ndarray,
    fold_dock_prob: bool = False,
    features: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Expected activation delta sum_k rho[node, k] * R_act(h, C[node, k]) at full budget.

    Args:
        fold_dock_prob: Also weight each type by p_dock evaluated at its mean content
        features: Feature row of the node (required when fold_dock_prob is set)
    """
    total = np.zeros_like(h, dtype=float)
    for k in range(registry.num_types):
        mass = field.rho[node, k]
        if mass == 0:
            continue
        mean_vesicle = Vesicle(id=-1, content=field.mean_content[node, k], type_id=k, location=node, lifetime=1.0)
        delta = mass * release_activation(registry, mean_vesicle, h)
        if fold_dock_prob:
            if features is None:
                raise ValueError("fold_dock_prob needs the node's features")
            delta = docking_probability(registry, mean_vesicle, features) * delta
        total = total + delta
    return total


@dataclass
class ConsistencyReport:
    """Per-(step, node, type) z-scores of particle means against the density recursion."""
    max_deviation: float
    argmax: Tuple[int, int, int]
    horizon: int
    n_runs: int
    deviations: np.ndarray
    density: np.ndarray = field(repr=False)
    particle_mean: np.ndarray = field(repr=False)

    def to_dict(self) -> Dict[str, object]:
        return {
            "max_deviation": float(self.max_deviation),
            "argmax": {"step": self.argmax[0], "node": self.argmax[1], "type": self.argmax[2]},
            "horizon": self.horizon,
            "n_runs": self.n_runs,
            "deviations": np.round(self.deviations, 12).tolist(),
        }


def _z_scores(samples: np.ndarray, expected: np.ndarray) -> np.ndarray:
    n_runs = samples.shape[0]
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(n_runs)
    diff = np.abs(mean - expected)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.where(diff > 0, np.inf, 0.0))
    return z


def particle_counts_step(
    counts: np.ndarray,
    transitions: List[np.ndarray],
    deltas: np.ndarray,
    intensities: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Advance n_runs independent particle populations by one step.

    Survival is binomial(1 - delta), routing is multinomial over T rows and
    emission is Poisson(lambda). Shape is (n_runs, |V|, K).
    """
    n_runs, num_nodes, num_types = counts.shape
    survivors = rng.binomial(counts, 1.0 - deltas[None, None, :])
    routed = np.zeros_like(counts)
    for k, transition in enumerate(transitions):
        for node in range(num_nodes):
            moved = rng.multinomial(survivors[:, node, k], transition[node])
            routed[:, :, k] += moved
    return routed + rng.poisson(intensities[None, :, :], size=counts.shape)


class FrozenEmissionController(KernelController):
    """
    Kernel-driven migration with fixed emission rates and docking switched off.

    Counts are unclamped Poisson (or Bernoulli) draws of the frozen rates. The
    population right after emission is recorded every step.
    """

    def __init__(self, intensities: np.ndarray):
        self.intensities = intensities
        self.observed: List[np.ndarray] = []

    def emissions(self, sim: CoupledSimulator, step: int, features: np.ndarray) -> List[EmissionEvent]:
        num_nodes, num_types = self.intensities.shape
        counts = np.zeros((num_nodes, num_types))
        for vesicle in sim.vesicles:
            counts[vesicle.location, vesicle.type_id] += 1
        events = []
        for node in range(num_nodes):
            for type_id in range(num_types):
                intensity = float(self.intensities[node, type_id])
                rng = stream(sim.seed, Phase.EMIT, step, node, type_id)
                count = emission_count(sim.config.kernels, intensity, rng, clamp=False)
                counts[node, type_id] += count
                events.append(EmissionEvent(node, type_id, count, intensity))
        self.observed.append(counts)
        return events

    def dock(self, sim: CoupledSimulator, step: int, vesicle: Vesicle, features: np.ndarray) -> bool:
        return False


def simulator_counts(
    config: ExperimentConfig, intensities: np.ndarray, horizon: int, n_runs: int, seed: int
) -> np.ndarray:
    """
    Post-emission populations of `n_runs` kernel-driven particle runs.

    Each run is a `CoupledSimulator` with geometric decay, vesicle phases every
    step and its own seed drawn from the consistency stream.

    Returns:
        Counts of shape (n_runs, horizon, |V|, K)
    """
    run_config = config.model_copy(deep=True)
    run_config.kernels.geometric_decay = True
    run_config.run.vesicle_every = 1
    if any(params.temperature != 0 for params in run_config.vesicles.types):
        logger.warning("Gradient-biased migration is not part of the density recursion; set temperature to 0")
    run_seeds = stream(seed, Phase.CONSISTENCY).integers(0, 2**31 - 1, size=n_runs)
    samples = np.zeros((n_runs, horizon) + intensities.shape)
    for index, run_seed in enumerate(run_seeds):
        controller = FrozenEmissionController(intensities)
        simulator = CoupledSimulator(run_config, int(run_seed), controller=controller)
        for _ in range(horizon):
            simulator.step()
        if horizon:
            samples[index] = np.stack(controller.observed)
    return samples


def consistency_check(
    config: ExperimentConfig,
    horizon: Optional[int] = None,
    n_runs: Optional[int] = None,
    seed: Optional[int] = None,
) -> ConsistencyReport:
    """
    Compare the mean of many particle runs with the density recursion.

    Docking and release are off and decay is geometric with rate delta_kappa, so
    the particle process is linear and the recursion is its exact mean.

    Args:
        config: Resolved configuration (frozen_emission, if given, fixes lambda)
        horizon: Steps to compare (density.horizon by default)
        n_runs: Independent particle runs (density.n_runs by default)
        seed: Run seed (run.seed by default)

    Returns:
        ConsistencyReport with z-scores for steps 1..horizon
    """
    horizon = config.density.horizon if horizon is None else horizon
    n_runs = config.density.n_runs if n_runs is None else n_runs
    seed = config.run.seed if seed is None else seed
    graph, registry, net = _density_components(config, seed)
    if config.density.frozen_emission is not None:
        intensities = np.asarray(config.density.frozen_emission, dtype=float)
    else:
        net.forward(np.zeros(net.widths[0]))
        intensities = emission_intensities(registry, feature_matrix(net, graph))
    transitions = transition_stack(registry)
    deltas = decay_rates(registry)
    num_nodes, num_types = graph.num_nodes, registry.num_types
    logger.info(
        "Consistency check: horizon=%d runs=%d engine=%s", horizon, n_runs, config.density.particle_engine.value
    )

    density = DensityField.zeros(num_nodes, num_types, registry.content_dim)
    simulated = None
    if config.density.particle_engine == ParticleEngine.SIMULATOR:
        simulated = simulator_counts(config, intensities, horizon, n_runs, seed)
    counts = np.zeros((n_runs, num_nodes, num_types), dtype=np.int64)
    rng = stream(seed, Phase.CONSISTENCY)
    deviations = np.zeros((horizon, num_nodes, num_types))
    density_traj = np.zeros((horizon, num_nodes, num_types))
    particle_traj = np.zeros((horizon, num_nodes, num_types))
    for t in range(horizon):
        density = density_step(density, registry, intensities, literal_vector_form=config.density.literal_vector_form)
        if simulated is None:
            counts = particle_counts_step(counts, transitions, deltas, intensities, rng)
            samples = counts.astype(float)
        else:
            samples = simulated[:, t]
        deviations[t] = _z_scores(samples, density.rho)
        density_traj[t] = density.rho
        particle_traj[t] = samples.mean(axis=0)
    if horizon == 0:
        return ConsistencyReport(0.0, (0, 0, 0), 0, n_runs, deviations, density_traj, particle_traj)
    flat_index = int(np.argmax(deviations))
    step, node, type_id = np.unravel_index(flat_index, deviations.shape)
    return ConsistencyReport(
        max_deviation=float(deviations.max()),
        argmax=(int(step) + 1, int(node), int(type_id)),
        horizon=horizon,
        n_runs=n_runs,
        deviations=deviations,
        density=density_traj,
        particle_mean=particle_traj,
    )


def _density_components(config: ExperimentConfig, seed: int) -> Tuple[ComputationGraph, VesicleTypeRegistry, NetworkState]:
    graph = ComputationGraph.from_spec(config.graph)
    net = NetworkState.initialize(config.network, seed)
    registry = VesicleTypeRegistry.for_network(config.vesicles, config.release, graph, net, seed)
    return graph, registry, net


@dataclass
class DensityRun:
    """Density trajectory rows and per-step summaries."""
    rows: List[Dict[str, float]]
    total_mass: List[List[float]]
    expected_release_norm: List[float]
    losses: List[float]
    clamp_events: int
    final: DensityField


def run_density(config: ExperimentConfig, seed: Optional[int] = None, steps: Optional[int] = None) -> DensityRun:
    """
    Density-mode run.

    With `density.frozen_emission` the field is driven by fixed intensities;
    otherwise a live base network is trained by plain SGD and its features
    drive emission. The expected activation release at every node is reported.
    """
    seed = config.run.seed if seed is None else seed
    steps = config.run.steps if steps is None else steps
    graph, registry, net = _density_components(config, seed)
    data = DataStream(config.data, config.network.widths[0], config.network.widths[-1], seed)
    field_state = DensityField.zeros(graph.num_nodes, registry.num_types, registry.content_dim)
    frozen = config.density.frozen_emission
    lr = config.network.learning_rate
    rows: List[Dict[str, float]] = []
    masses, release_norms, losses = [], [], []
    logger.info("Density run: seed=%d steps=%d", seed, steps)
    for t in range(steps):
        x, y = data.batch(t)
        yhat = net.forward(x)
        value = loss(yhat, y)
        net.backward(y)
        features = feature_matrix(net, graph)
        if frozen is not None:
            intensities = np.asarray(frozen, dtype=float)
            content = np.zeros_like(field_state.mean_content)
        else:
            intensities, content = emission_field(registry, features)
        field_state = density_step(
            field_state, registry, intensities, content, literal_vector_form=config.density.literal_vector_form
        )
        norm = 0.0
        for node, layer in enumerate(graph.layer_of):
            delta = expected_release(
                field_state, registry, node, net.activations[layer],
                fold_dock_prob=config.density.fold_dock_prob, features=features[node],
            )
            norm += float(np.linalg.norm(delta))
        net.sgd_update(net.grads, [lr] * net.num_layers)
        net.record_loss(value)
        for node in range(graph.num_nodes):
            for k in range(registry.num_types):
                rows.append(
                    {
                        "step": t,
                        "node": node,
                        "type": k,
                        "rho": float(field_state.rho[node, k]),
                        "content_norm": float(np.linalg.norm(field_state.mean_content[node, k])),
                    }
                )
        masses.append(field_state.total_mass().tolist())
        release_norms.append(norm)
        losses.append(value)
    return DensityRun(rows, masses, release_norms, losses, field_state.clamp_events, field_state)
