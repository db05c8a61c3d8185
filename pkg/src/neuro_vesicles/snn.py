"""
Spiking overlay: LIF neurons, eligibility traces and vesicle-gated plasticity.

Neurons and traces are clock-driven (forward Euler at `snn.dt`). Vesicles are
event-driven: their kernels run only at spike times and between events they
only age, with lifetimes anchored to their emission time.
"""

import heapq
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .graph import ComputationGraph
from .kernels import docking_probability, migration_distribution, sample_emissions, sample_move
from .models import ExperimentConfig, PlasticityRule, SnnSpec
from .rng import Phase, stream
from .vesicles import Vesicle, VesicleConfig, VesicleTypeRegistry, spawn

logger = logging.getLogger(__name__)

# Node features at event times: [window spike count, u, 0, meta].
SNN_FEATURE_DIM = 4


class TimeRegressionError(ValueError):
    """Raised when asked to advance to an earlier time."""
    pass


@dataclass
class LifNeuron:
    """Leaky integrate-and-fire state."""
    u: float = 0.0
    threshold: float = 1.0
    tau_m: float = 10.0
    refractory: float = 0.0
    refractory_until: float = float("-inf")


@dataclass
class Synapse:
    """Synapse pre -> post with weight and eligibility trace."""
    pre: int
    post: int
    w: float
    e_trace: float = 0.0
    tau_e: float = 5.0


@dataclass(order=True, frozen=True)
class SpikeEvent:
    """Spike of `neuron` at `time`; orders by time, then neuron index."""
    time: float
    neuron: int


class SpikeScheduler:
    """Min-heap of pending spike events."""

    def __init__(self, events: Iterable[SpikeEvent] = ()):
        self._heap: List[SpikeEvent] = list(events)
        heapq.heapify(self._heap)

    def __len__(self) -> int:
        return len(self._heap)

    def push(self, event: SpikeEvent) -> None:
        heapq.heappush(self._heap, event)

    def peek(self) -> Optional[SpikeEvent]:
        return self._heap[0] if self._heap else None

    def pop(self) -> SpikeEvent:
        return heapq.heappop(self._heap)


def lif_step(neuron: LifNeuron, input_current: float, dt: float, time: float = 0.0) -> Tuple[LifNeuron, bool]:
    """
    Forward-Euler membrane update; spikes when u reaches the threshold.

    Args:
        neuron: State, updated in place
        input_current: Total input I over this step
        dt: Step size
        time: Current time, used for the refractory window

    Returns:
        (neuron, spiked)
    """
    if time < neuron.refractory_until:
        neuron.u = 0.0
        return neuron, False
    neuron.u = neuron.u + (dt / neuron.tau_m) * (-neuron.u + input_current)
    if neuron.u >= neuron.threshold:
        neuron.u = 0.0
        neuron.refractory_until = time + neuron.refractory
        return neuron, True
    return neuron, False


def trace_step(
    synapse: Synapse,
    pre_spiked: bool,
    post_spiked: bool,
    dt: float,
    a_plus: float = 1.0,
    a_minus: float = 1.0,
) -> float:
    """
    e <- e + (dt / tau_e) * (-e + F), F = A+ on a pre spike, -A- on a lone post spike.

    Returns:
        The updated trace (also stored on the synapse)
    """
    if pre_spiked:
        impulse = a_plus
    elif post_spiked:
        impulse = -a_minus
    else:
        impulse = 0.0
    synapse.e_trace = synapse.e_trace + (dt / synapse.tau_e) * (-synapse.e_trace + impulse)
    return synapse.e_trace


def modulatory_field(
    cfg: VesicleConfig,
    registry: VesicleTypeRegistry,
    graph: ComputationGraph,
    synapse: Synapse,
    radius: int = 1,
    neighborhood: Optional[Set[int]] = None,
) -> float:
    """
    m_ij = sum of tanh(a_kappa . c) * budget over vesicles inside N(i, j).

    Args:
        neighborhood: Precomputed N(i, j); derived from the graph when omitted
    """
    if neighborhood is None:
        neighborhood = graph.synapse_neighborhood(synapse.post, synapse.pre, radius)
    return float(sum(registry.modulation_strength(v) for v in cfg.vesicles if v.location in neighborhood))


def three_factor_update(synapse: Synapse, m: float, eta: float) -> float:
    """Delta w = eta * e * m, applied to the synapse immediately."""
    delta = eta * synapse.e_trace * m
    synapse.w += delta
    return delta


def darwin3_plasticity(
    synapse: Synapse,
    stdp_pre: float,
    stdp_post: float,
    stdp_mod: float,
    a_pre: float,
    a_post: float,
    a_mod: float,
) -> float:
    """
    Generic three-term rule A_pre*STDP_pre + A_post*STDP_post + A_mod*STDP_mod.

    A_mod is the modulation strength of the vesicles docked near the synapse;
    the caller applies the returned delta.
    """
    return a_pre * stdp_pre + a_post * stdp_post + a_mod * stdp_mod


def age_to(vesicle: Vesicle, time: float) -> float:
    """Anchored aging: tau(t) = tau_0 - (t - t_birth)."""
    vesicle.lifetime = vesicle.initial_lifetime - (time - vesicle.born_at)
    return vesicle.lifetime


@dataclass
class AdvanceResult:
    """Events processed by one `event_driven_advance` call."""
    events: List[SpikeEvent] = field(default_factory=list)
    event_times: List[float] = field(default_factory=list)
    kernel_evaluations: int = 0
    removed: List[int] = field(default_factory=list)


def _expire(vesicles: VesicleConfig, time: float) -> List[int]:
    expired = [v.id for v in vesicles.vesicles if age_to(v, time) <= 0]
    vesicles.remove(expired)
    return expired


def event_driven_advance(
    scheduler: SpikeScheduler,
    vesicles: VesicleConfig,
    from_time: float,
    to_time: float,
    on_event: Optional[Callable[[float, List[SpikeEvent]], None]] = None,
) -> AdvanceResult:
    """
    Process spike events in [from_time, to_time], aging vesicles between them.

    Kernels (`on_event`) run once per distinct event time after expired
    vesicles are removed; vesicles are finally aged to `to_time`.

    Raises:
        TimeRegressionError: If to_time < from_time
    """
    if to_time < from_time:
        raise TimeRegressionError(f"Cannot advance from t={from_time} back to t={to_time}")
    result = AdvanceResult()
    while scheduler.peek() is not None and scheduler.peek().time <= to_time:
        time = scheduler.peek().time
        batch = []
        while scheduler.peek() is not None and scheduler.peek().time == time:
            batch.append(scheduler.pop())
        if time < from_time:
            continue
        result.removed.extend(_expire(vesicles, time))
        result.events.extend(batch)
        result.event_times.append(time)
        if on_event is not None:
            on_event(time, batch)
        result.kernel_evaluations += 1
    result.removed.extend(_expire(vesicles, to_time))
    return result


def dense_lifetime_reference(
    vesicles: Sequence[Vesicle], spike_times: Sequence[float], dt: float, steps: int
) -> Dict[float, Dict[int, float]]:
    """
    Clock-driven reference: decrement every lifetime by dt per step, remove at <= 0.

    Births must fall on the dt grid. Snapshots are taken at spike times.

    Returns:
        Map spike time -> {vesicle id: lifetime} of vesicles alive at that time
    """
    lifetimes = {v.id: v.initial_lifetime for v in vesicles}
    births = {v.id: v.born_at for v in vesicles}
    wanted = set(spike_times)
    snapshots: Dict[float, Dict[int, float]] = {}
    for k in range(steps + 1):
        time = k * dt
        for vesicle_id in list(lifetimes):
            if births[vesicle_id] < time:
                lifetimes[vesicle_id] -= dt
                if lifetimes[vesicle_id] <= 0:
                    del lifetimes[vesicle_id]
        if time in wanted:
            snapshots[time] = {
                vesicle_id: lifetime for vesicle_id, lifetime in lifetimes.items() if births[vesicle_id] <= time
            }
    return snapshots


@dataclass
class SnnRun:
    """Spike raster, weight trajectories and the plasticity audit of one run."""
    spikes: List[Tuple[float, int]]
    weights: List[Tuple[float, int, int, float]]
    audit: List[Tuple[float, int, int, float, bool]]
    kernel_evaluations: int
    vesicle_counts: List[int]


class SnnSimulator:
    """
    Recurrent LIF population with event-driven vesicles on the per-neuron graph.

    Args:
        config: Resolved configuration (snn, vesicles, kernels sections)
        seed: Run seed
    """

    def __init__(self, config: ExperimentConfig, seed: int):
        self.config = config
        self.spec: SnnSpec = config.snn
        self.seed = seed
        n = self.spec.num_neurons
        topology = stream(seed, Phase.SNN_TOPOLOGY)
        connect = topology.random((n, n)) < self.spec.connection_prob
        np.fill_diagonal(connect, False)
        edges = [(int(pre), int(post)) for pre, post in zip(*np.nonzero(connect))]
        self.graph = ComputationGraph.from_edges(n, edges)
        self.neurons = [
            LifNeuron(threshold=self.spec.threshold, tau_m=self.spec.tau_m, refractory=self.spec.refractory)
            for _ in range(n)
        ]
        self.synapses = [
            Synapse(pre, post, self.spec.initial_weight, tau_e=self.spec.tau_e) for pre, post in self.graph.edges
        ]
        self.neighborhoods = [
            self.graph.synapse_neighborhood(s.post, s.pre, self.spec.neighborhood_radius) for s in self.synapses
        ]
        self.registry = VesicleTypeRegistry(
            config.vesicles, config.release, self.graph, [1] * n, [], SNN_FEATURE_DIM, seed
        )
        self.vesicles = VesicleConfig()
        self.scheduler = SpikeScheduler()
        self.absorbers = set(config.kernels.absorber_nodes) & set(range(n))
        dropped = sorted(set(config.kernels.absorber_nodes) - self.absorbers)
        if dropped:
            logger.warning("Ignoring absorber nodes %s outside the %d neurons", dropped, n)
        self.time = 0.0
        self.event_index = 0
        self.kernel_evaluations = 0
        self._recent: List[SpikeEvent] = []
        self._docked_strength: List[Tuple[int, float]] = []
        self._last_spikes: Set[int] = set()

    def _features(self, time: float) -> np.ndarray:
        window_start = time - self.spec.spike_window
        self._recent = [event for event in self._recent if event.time > window_start]
        counts = np.zeros(self.spec.num_neurons)
        for event in self._recent:
            counts[event.neuron] += 1
        u = np.array([neuron.u for neuron in self.neurons])
        zeros = np.zeros(self.spec.num_neurons)
        return np.column_stack([counts, u, zeros, zeros])

    def _on_event(self, time: float, events: List[SpikeEvent]) -> None:
        """Emission, migration and docking at one event time."""
        key = self.event_index
        self.event_index += 1
        features = self._features(time)
        for emission in sample_emissions(self.registry, features, self.config.kernels, self.seed, key):
            for _ in range(emission.count):
                vesicle_id = self.vesicles.allocate_id()
                self.vesicles.add(
                    spawn(
                        self.registry, emission.type_id, emission.node, features[emission.node],
                        stream(self.seed, Phase.SPAWN, vesicle_id), vesicle_id=vesicle_id, born_at=time,
                    )
                )
        docked, absorbed = [], []
        for vesicle in self.vesicles:
            distribution = migration_distribution(self.registry, vesicle, features)
            vesicle.location = sample_move(distribution, stream(self.seed, Phase.MOVE, key, vesicle.id))
            probability = docking_probability(self.registry, vesicle, features[vesicle.location])
            if float(stream(self.seed, Phase.DOCK, key, vesicle.id).random()) < probability:
                docked.append(vesicle)
                if vesicle.location in self.absorbers:
                    absorbed.append(vesicle.id)
        # modulation is read at docking, then the budget halves
        self._docked_strength = [(v.location, self.registry.modulation_strength(v)) for v in docked]
        for vesicle in docked:
            vesicle.internal.budget *= 0.5
        self.vesicles.remove(absorbed)

    def step(self) -> Tuple[List[int], List[Tuple[float, int, int, float, bool]]]:
        """
        Advance neurons, traces, vesicles and weights by one clock step.

        Returns:
            (spiking neurons, audit rows of this step)
        """
        spec = self.spec
        time = self.time
        inputs = stream(self.seed, Phase.SNN_INPUT, int(round(time / spec.dt)))
        external = (inputs.random(spec.num_neurons) < spec.input_rate) * spec.input_current
        current = external.astype(float)
        for synapse in self.synapses:
            if synapse.pre in self._last_spikes:
                current[synapse.post] += synapse.w
        spikes = []
        for index, neuron in enumerate(self.neurons):
            _, spiked = lif_step(neuron, float(current[index]), spec.dt, time)
            if spiked:
                spikes.append(index)
                event = SpikeEvent(time, index)
                self.scheduler.push(event)
                self._recent.append(event)
        spiked_set = set(spikes)

        self._docked_strength = []
        advance = event_driven_advance(self.scheduler, self.vesicles, time, time, on_event=self._on_event)
        self.kernel_evaluations += advance.kernel_evaluations

        audit = []
        for synapse, neighborhood in zip(self.synapses, self.neighborhoods):
            trace_step(synapse, synapse.pre in spiked_set, synapse.post in spiked_set, spec.dt, spec.a_plus, spec.a_minus)
            # absorbed vesicles are gone from the population but docked this step
            present = any(v.location in neighborhood for v in self.vesicles) or any(
                node in neighborhood for node, _ in self._docked_strength
            )
            if spec.plasticity == PlasticityRule.THREE_FACTOR:
                m = modulatory_field(self.vesicles, self.registry, self.graph, synapse, neighborhood=neighborhood)
                delta = three_factor_update(synapse, m, spec.learning_rate)
            else:
                a_mod = sum(strength for node, strength in self._docked_strength if node in neighborhood)
                mod_spike = 1.0 if any(node in neighborhood for node, _ in self._docked_strength) else 0.0
                delta = spec.learning_rate * darwin3_plasticity(
                    synapse,
                    stdp_pre=float(synapse.pre in spiked_set),
                    stdp_post=float(synapse.post in spiked_set),
                    stdp_mod=mod_spike * synapse.e_trace,
                    a_pre=spec.a_pre,
                    a_post=spec.a_post,
                    a_mod=a_mod,
                )
                synapse.w += delta
            if delta != 0 or present:
                audit.append((time, synapse.pre, synapse.post, float(delta), bool(present)))
        self._last_spikes = spiked_set
        self.time = time + spec.dt
        return spikes, audit

    def run(self, steps: int) -> SnnRun:
        spikes: List[Tuple[float, int]] = []
        weights: List[Tuple[float, int, int, float]] = []
        audit: List[Tuple[float, int, int, float, bool]] = []
        counts = []
        logger.info("SNN run: neurons=%d synapses=%d steps=%d", self.spec.num_neurons, len(self.synapses), steps)
        for _ in range(steps):
            time = self.time
            fired, rows = self.step()
            spikes.extend((time, neuron) for neuron in fired)
            weights.extend((time, s.pre, s.post, s.w) for s in self.synapses)
            audit.extend(rows)
            counts.append(len(self.vesicles))
        return SnnRun(spikes, weights, audit, self.kernel_evaluations, counts)


def run_snn(config: ExperimentConfig, seed: Optional[int] = None, steps: Optional[int] = None) -> SnnRun:
    """SNN-mode run with the configured seed and step count unless overridden."""
    seed = config.run.seed if seed is None else seed
    steps = config.run.steps if steps is None else steps
    return SnnSimulator(config, seed).run(steps)
