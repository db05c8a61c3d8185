"""
Coupled network-vesicle simulation.

One step runs, in order: forward pass (with memory read injection), backward
pass, emission, migration, docking and release, decay, and the SGD update.
Random decisions are delegated to a controller so that the same loop serves
kernel-driven, scripted and policy-driven runs.
"""

import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from .graph import ComputationGraph
from .kernels import (
    EmissionEvent,
    decay_step,
    docking_probability,
    feature_matrix,
    migration_distribution,
    sample_emissions,
    sample_move,
)
from .models import DataKind, DataSpec, ExperimentConfig
from .network import LayerParams, NetworkState, loss
from .release import (
    ReleaseEffect,
    ReleaseOp,
    RuleModulation,
    compose_rules,
    compute_effect,
    consume_budget,
    enabled_ops,
    memory_read_inject,
    write_value,
)
from .rng import Phase, stream
from .vesicles import Vesicle, VesicleConfig, VesicleTypeRegistry, joint_state_snapshot, spawn

logger = logging.getLogger(__name__)


class EventPhase(str, Enum):
    """Event kinds, listed in their within-step order."""
    EMIT = "emit"
    MOVE = "move"
    DOCK = "dock"
    RELEASE = "release"
    DECAY = "decay"
    UPDATE = "update"


PHASE_RANK = {phase: rank for rank, phase in enumerate(EventPhase)}


class SimulationAbort(RuntimeError):
    """Raised when any state becomes non-finite; carries the tail of the event log."""

    def __init__(self, step: int, reason: str, log_tail: str):
        super().__init__(f"Simulation aborted at step {step}: {reason}\nLast events:\n{log_tail}")
        self.step = step
        self.reason = reason
        self.log_tail = log_tail


@dataclass
class Event:
    """One structured event record."""
    step: int
    phase: EventPhase
    vesicle_id: Optional[int]
    node: Optional[int]
    payload: Dict[str, Any] = field(default_factory=dict)

    def to_record(self) -> Dict[str, Any]:
        return {
            "step": self.step,
            "phase": self.phase.value,
            "vesicle_id": self.vesicle_id,
            "node": self.node,
            "payload": self.payload,
        }


class EventLog:
    """Append-only record of every emission, move, dock, release, decay and update."""

    def __init__(self) -> None:
        self._events: List[Event] = []

    def __len__(self) -> int:
        return len(self._events)

    def __iter__(self):
        return iter(self._events)

    def append(
        self,
        step: int,
        phase: EventPhase,
        vesicle_id: Optional[int] = None,
        node: Optional[int] = None,
        **payload: Any,
    ) -> None:
        self._events.append(Event(step, phase, vesicle_id, node, payload))

    def for_step(self, step: int) -> List[Event]:
        return [event for event in self._events if event.step == step]

    def count(self, step: int, phase: EventPhase) -> int:
        return sum(1 for event in self._events if event.step == step and event.phase == phase)

    def to_ndjson(self) -> str:
        """Newline-delimited JSON, one record per event, keys sorted."""
        return "".join(json.dumps(event.to_record(), sort_keys=True) + "\n" for event in self._events)

    def tail(self, n: int = 20) -> str:
        return "".join(json.dumps(event.to_record(), sort_keys=True) + "\n" for event in self._events[-n:])

    @classmethod
    def from_ndjson(cls, text: str) -> "EventLog":
        """Reload a log written by `to_ndjson`."""
        log = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            record = json.loads(line)
            log._events.append(
                Event(record["step"], EventPhase(record["phase"]), record["vesicle_id"], record["node"], record["payload"])
            )
        return log

    def population_trajectory(self, steps: int, initial: int = 0) -> List[int]:
        """Vesicle count after every step, rebuilt from emit and decay records."""
        delta = [0] * steps
        for event in self._events:
            if event.phase == EventPhase.EMIT:
                delta[event.step] += 1
            elif event.phase == EventPhase.DECAY:
                delta[event.step] -= 1
        trajectory, current = [], initial
        for change in delta:
            current += change
            trajectory.append(current)
        return trajectory


@dataclass
class StepReport:
    """Per-step scalar metrics; counters reconcile with the event log."""
    step: int
    loss_pre: float
    loss_post: float
    n_vesicles: int
    emissions: int
    docks: int
    removals: int
    per_node_counts: List[int]

    def as_row(self) -> Dict[str, Any]:
        row = asdict(self)
        row["per_node_counts"] = ";".join(str(count) for count in self.per_node_counts)
        return row


class DataStream:
    """
    Synthetic regression samples, one per step, keyed by the run seed.

    `planted`: y = tanh(A x) with a fixed random A. `sine`: y = sin(x)
    truncated or zero-padded to the output width.
    """

    def __init__(self, spec: DataSpec, in_width: int, out_width: int, seed: int):
        self.spec = spec
        self.in_width = in_width
        self.out_width = out_width
        self.seed = seed
        self._planted = stream(seed, Phase.DATA, 0).standard_normal((out_width, in_width)) / np.sqrt(in_width)

    def batch(self, step: int) -> Tuple[np.ndarray, np.ndarray]:
        rng = stream(self.seed, Phase.DATA, 1, step)
        x = rng.standard_normal(self.in_width)
        if self.spec.kind == DataKind.PLANTED:
            y = np.tanh(self._planted @ x)
        else:
            y = np.zeros(self.out_width)
            width = min(self.in_width, self.out_width)
            y[:width] = np.sin(x[:width])
        if self.spec.noise_std > 0:
            y = y + self.spec.noise_std * rng.standard_normal(self.out_width)
        return x, y


class VesicleController:
    """Source of the stochastic decisions of one step."""

    def begin_step(self, sim: "CoupledSimulator", step: int, features: np.ndarray) -> None:
        """Called once per vesicle phase before emission."""

    def emissions(self, sim: "CoupledSimulator", step: int, features: np.ndarray) -> List[EmissionEvent]:
        raise NotImplementedError

    def move(self, sim: "CoupledSimulator", step: int, vesicle: Vesicle, features: np.ndarray) -> int:
        raise NotImplementedError

    def dock(self, sim: "CoupledSimulator", step: int, vesicle: Vesicle, features: np.ndarray) -> bool:
        raise NotImplementedError

    def release_ops(self, sim: "CoupledSimulator", step: int, vesicle: Vesicle) -> FrozenSet[ReleaseOp]:
        return frozenset(sim.ops)


class KernelController(VesicleController):
    """Samples every decision from the registry's kernels with per-vesicle streams."""

    def emissions(self, sim: "CoupledSimulator", step: int, features: np.ndarray) -> List[EmissionEvent]:
        return sample_emissions(sim.registry, features, sim.config.kernels, sim.seed, step)

    def move(self, sim: "CoupledSimulator", step: int, vesicle: Vesicle, features: np.ndarray) -> int:
        distribution = migration_distribution(sim.registry, vesicle, features)
        return sample_move(distribution, stream(sim.seed, Phase.MOVE, step, vesicle.id))

    def dock(self, sim: "CoupledSimulator", step: int, vesicle: Vesicle, features: np.ndarray) -> bool:
        probability = docking_probability(sim.registry, vesicle, features[vesicle.location])
        return float(stream(sim.seed, Phase.DOCK, step, vesicle.id).random()) < probability


class ScriptedController(VesicleController):
    """
    Deterministic decisions for scripted scenarios.

    Args:
        emissions: Map step -> [(node, type_id, count)]; a callable is also accepted
        moves: Whether vesicles migrate through the kernels (False keeps them in place)
        dock_all: Dock every vesicle every step
    """

    def __init__(
        self,
        emissions: Any = None,
        moves: bool = False,
        dock_all: bool = True,
    ):
        self._emissions = emissions or {}
        self._moves = moves
        self._dock_all = dock_all
        self._kernels = KernelController()

    def emissions(self, sim: "CoupledSimulator", step: int, features: np.ndarray) -> List[EmissionEvent]:
        scripted = self._emissions(step) if callable(self._emissions) else self._emissions.get(step, [])
        return [EmissionEvent(node, type_id, count, 1.0) for node, type_id, count in scripted]

    def move(self, sim: "CoupledSimulator", step: int, vesicle: Vesicle, features: np.ndarray) -> int:
        if self._moves:
            return self._kernels.move(sim, step, vesicle, features)
        return vesicle.location

    def dock(self, sim: "CoupledSimulator", step: int, vesicle: Vesicle, features: np.ndarray) -> bool:
        if self._dock_all:
            return True
        return self._kernels.dock(sim, step, vesicle, features)


class CoupledSimulator:
    """
    Owner of one run's joint state S_t = (theta, h, V_t, memories).

    Args:
        config: Resolved experiment configuration
        seed: Run seed
        controller: Decision source (kernels by default)
    """

    def __init__(self, config: ExperimentConfig, seed: int, controller: Optional[VesicleController] = None):
        self.config = config
        self.seed = seed
        self.graph = ComputationGraph.from_spec(config.graph)
        self.net = NetworkState.initialize(config.network, seed)
        self.net.attach_memories(self.graph.num_nodes, config.release.memory_dim)
        self.registry = VesicleTypeRegistry.for_network(config.vesicles, config.release, self.graph, self.net, seed)
        self.vesicles = VesicleConfig()
        self.controller = controller or KernelController()
        self.log = EventLog()
        self.data = DataStream(config.data, config.network.widths[0], config.network.widths[-1], seed)
        self.ops = enabled_ops(config.release)
        self.absorbers = set(config.kernels.absorber_nodes)
        self.step_index = 0
        self._nodes_by_layer = {
            layer: self.graph.nodes_in_layer(layer) for layer in range(self.net.num_layers + 1)
        }

    def _memory_hook(self, layer: int, h: np.ndarray) -> np.ndarray:
        for node in self._nodes_by_layer.get(layer, []):
            h = memory_read_inject(self.net.memories[node], h, self.registry.read_projection[node])
        return h

    def _layer_params(self, node: int) -> Optional[LayerParams]:
        layer = self.graph.layer_of[node]
        return self.net.params[layer - 1] if layer > 0 else None

    def digest(self) -> str:
        return joint_state_snapshot(self.net, self.vesicles)

    def step(self, x: Optional[np.ndarray] = None, y: Optional[np.ndarray] = None) -> StepReport:
        """
        Advance the joint state by one step.

        Args:
            x: Input sample (drawn from the data stream when omitted)
            y: Target sample

        Returns:
            StepReport for this step

        Raises:
            SimulationAbort: If any state becomes non-finite
        """
        t = self.step_index
        if x is None or y is None:
            x, y = self.data.batch(t)
        memory_hook = self._memory_hook if ReleaseOp.MEMORY in self.ops else None

        # forward, backward
        yhat = self.net.forward(x, modulate=memory_hook)
        loss_pre = loss(yhat, y)
        self.net.backward(y)
        grads = list(self.net.grads)

        emissions = docks = removals = 0
        loss_post = loss_pre
        rule_mods: Dict[int, List[RuleModulation]] = defaultdict(list)
        if t % self.config.run.vesicle_every == 0:
            features = feature_matrix(self.net, self.graph)
            self.controller.begin_step(self, t, features)
            emissions = self._emit(t, features)
            self._migrate(t, features)
            docked = self._dock(t, features)
            docks = len(docked)
            loss_post = self._release(t, docked, y, memory_hook, rule_mods)
            removals = self._decay(t, docked)

        # parameter update with pre-release gradients
        lr = self.config.network.learning_rate
        update_grads, rates = [], []
        for index, grad in enumerate(grads):
            layer = index + 1
            if rule_mods.get(layer):
                grad, scale = compose_rules(rule_mods[layer], grad)
                update_grads.append(grad)
                rates.append(lr * scale)
            else:
                update_grads.append(grad)
                rates.append(lr)
        self.net.sgd_update(update_grads, rates)
        self.net.record_loss(loss_pre)
        self.log.append(t, EventPhase.UPDATE, loss_pre=loss_pre, loss_post=loss_post)

        if not self.net.is_finite() or not np.isfinite(loss_post):
            logger.error("Non-finite state at step %d", t)
            raise SimulationAbort(t, "non-finite network state", self.log.tail())

        self.step_index += 1
        return StepReport(
            step=t,
            loss_pre=loss_pre,
            loss_post=loss_post,
            n_vesicles=len(self.vesicles),
            emissions=emissions,
            docks=docks,
            removals=removals,
            per_node_counts=self.vesicles.counts_per_node(self.graph.num_nodes).tolist(),
        )

    def _emit(self, t: int, features: np.ndarray) -> int:
        emitted = 0
        for event in self.controller.emissions(self, t, features):
            for _ in range(event.count):
                vesicle_id = self.vesicles.allocate_id()
                vesicle = spawn(
                    self.registry,
                    event.type_id,
                    event.node,
                    features[event.node],
                    stream(self.seed, Phase.SPAWN, vesicle_id),
                    vesicle_id=vesicle_id,
                    born_at=float(t),
                )
                self.vesicles.add(vesicle)
                self.log.append(
                    t, EventPhase.EMIT, vesicle_id, event.node,
                    type_id=event.type_id, lifetime=vesicle.lifetime, intensity=event.intensity,
                )
                emitted += 1
        return emitted

    def _migrate(self, t: int, features: np.ndarray) -> None:
        for vesicle in self.vesicles:
            target = self.controller.move(self, t, vesicle, features)
            self.log.append(t, EventPhase.MOVE, vesicle.id, target, source=vesicle.location)
            vesicle.location = target

    def _dock(self, t: int, features: np.ndarray) -> List[Vesicle]:
        docked = []
        for vesicle in self.vesicles:
            if self.controller.dock(self, t, vesicle, features):
                docked.append(vesicle)
                self.log.append(t, EventPhase.DOCK, vesicle.id, vesicle.location, budget=vesicle.internal.budget)
        return docked

    def _release(
        self,
        t: int,
        docked: Sequence[Vesicle],
        y: np.ndarray,
        memory_hook: Optional[Callable[[int, np.ndarray], np.ndarray]],
        rule_mods: Dict[int, List[RuleModulation]],
    ) -> float:
        """Apply release effects; returns the loss of the vesicle-modified output."""
        pre_release = [self.net.activations[layer].copy() for layer in self.graph.layer_of]
        effects: List[ReleaseEffect] = []
        for vesicle in docked:
            ops = self.controller.release_ops(self, t, vesicle)
            effects.append(
                compute_effect(self.registry, vesicle, ops, pre_release[vesicle.location], self._layer_params(vesicle.location))
            )

        # activation deltas compose in parallel against pre-release activations
        layer_deltas: Dict[int, np.ndarray] = {}
        for effect in effects:
            if effect.delta_h is None or not np.any(effect.delta_h):
                continue
            layer = self.graph.layer_of[effect.node]
            layer_deltas[layer] = layer_deltas[layer] + effect.delta_h if layer in layer_deltas else effect.delta_h
        if layer_deltas:
            lowest = min(layer_deltas)
            self.net.set_activation(lowest, self.net.activations[lowest] + layer_deltas[lowest])

            def tail_hook(layer: int, h: np.ndarray) -> np.ndarray:
                if memory_hook is not None:
                    h = memory_hook(layer, h)
                return h + layer_deltas[layer] if layer in layer_deltas else h

            self.net.forward(None, modulate=tail_hook, start_layer=lowest + 1)
        loss_post = loss(self.net.activations[-1], y)

        rho = self.config.release.rho_write
        for effect, vesicle in sorted(zip(effects, docked), key=lambda pair: pair[1].id):
            if effect.delta_theta is not None and not effect.delta_theta.is_zero:
                self.net.apply_param_delta(effect.delta_theta.layer, effect.delta_theta.matrix())
            if effect.rule_mod is not None and not effect.rule_mod.is_identity:
                rule_mods[effect.rule_mod.layer].append(effect.rule_mod)
            if effect.memory_write is not None:
                write_value(self.net.memories[effect.node], effect.memory_write, rho)
            self.log.append(t, EventPhase.RELEASE, vesicle.id, effect.node, **effect.summary())
            consume_budget(vesicle)
        return loss_post

    def _decay(self, t: int, docked: Sequence[Vesicle]) -> int:
        locations = {vesicle.id: vesicle.location for vesicle in self.vesicles}
        absorbed = [vesicle.id for vesicle in docked if vesicle.location in self.absorbers]
        kernels = self.config.kernels
        removed = decay_step(
            self.vesicles,
            kernels.dt,
            rng=lambda vesicle_id: stream(self.seed, Phase.DECAY, t, vesicle_id),
            noise_std=kernels.decay_noise_std,
            absorbed=absorbed,
            removal_rates=[params.decay_rate for params in self.registry.types] if kernels.geometric_decay else None,
        )
        for vesicle_id in removed:
            self.log.append(t, EventPhase.DECAY, vesicle_id, locations[vesicle_id], absorbed=vesicle_id in absorbed)
        return len(removed)


@dataclass
class RunResult:
    """Outcome of `run`: per-step reports, per-step digests and the event log."""
    trajectory: List[StepReport]
    initial_digest: str
    digests: List[str]
    log: EventLog
    simulator: CoupledSimulator

    @property
    def final_digest(self) -> str:
        return self.digests[-1] if self.digests else self.initial_digest


def run(
    config: ExperimentConfig,
    seed: Optional[int] = None,
    steps: Optional[int] = None,
    controller: Optional[VesicleController] = None,
) -> RunResult:
    """
    Deterministic particle-mode run.

    Args:
        config: Resolved configuration
        seed: Overrides run.seed
        steps: Overrides run.steps
        controller: Decision source (kernels by default)

    Returns:
        RunResult with one StepReport and one digest per step
    """
    seed = config.run.seed if seed is None else seed
    steps = config.run.steps if steps is None else steps
    sim = CoupledSimulator(config, seed, controller)
    logger.info("Particle run: seed=%d steps=%d nodes=%d", seed, steps, sim.graph.num_nodes)
    initial = sim.digest()
    trajectory, digests = [], []
    for _ in range(steps):
        trajectory.append(sim.step())
        digests.append(sim.digest())
    return RunResult(trajectory, initial, digests, sim.log, sim)


def baseline_sgd(config: ExperimentConfig, seed: int, steps: int) -> List[np.ndarray]:
    """Plain SGD on the base network with the run's data stream; flat params after every step."""
    net = NetworkState.initialize(config.network, seed)
    data = DataStream(config.data, config.network.widths[0], config.network.widths[-1], seed)
    lr = config.network.learning_rate
    history = []
    for t in range(steps):
        x, y = data.batch(t)
        net.forward(x)
        net.backward(y)
        net.sgd_update(net.grads, [lr] * net.num_layers)
        history.append(net.flat_params())
    return history
