"""
Vesicle state, the vesicle multiset and the per-type parameter registry.

The registry owns every learnable symbol of the vesicle dynamics: the shared
emission and docking encoders, per-type emission/docking vectors, content
maps, transition scores and the release maps of every operator.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.random import Generator

from .graph import ComputationGraph
from .models import LifetimeDistribution, ReleaseSpec, VesicleSpec, VesicleTypeSpec
from .network import NetworkState
from .rng import Phase, stream

logger = logging.getLogger(__name__)

LIFETIME_FLOOR = 0.5
MIN_CONTENT_STD = 1e-8


@dataclass
class InternalState:
    """Residual release budget in [0, 1] and a discrete mode."""
    budget: float = 1.0
    mode: int = 0


@dataclass
class Vesicle:
    """
    One vesicle v = (c, kappa, l, tau, s) with a stable run-local id.

    Attributes:
        id: Identifier unique within a run
        content: Content vector of width d_c
        type_id: Vesicle type in [0, K)
        location: Current graph node
        lifetime: Remaining lifetime in simulation time units
        internal: Release budget and mode
        born_at: Emission time
        initial_lifetime: Lifetime sampled at emission
    """
    id: int
    content: np.ndarray
    type_id: int
    location: int
    lifetime: float
    internal: InternalState = field(default_factory=InternalState)
    born_at: float = 0.0
    initial_lifetime: float = 0.0

    def __post_init__(self) -> None:
        if not self.initial_lifetime:
            self.initial_lifetime = self.lifetime


@dataclass
class VesicleConfig:
    """The multiset V_t, kept sorted by id."""
    vesicles: List[Vesicle] = field(default_factory=list)
    next_id: int = 0

    def __len__(self) -> int:
        return len(self.vesicles)

    def __iter__(self):
        return iter(self.vesicles)

    def allocate_id(self) -> int:
        vesicle_id = self.next_id
        self.next_id += 1
        return vesicle_id

    def add(self, vesicle: Vesicle) -> None:
        self.vesicles.append(vesicle)

    def remove(self, ids: Sequence[int]) -> None:
        doomed = set(ids)
        self.vesicles = [v for v in self.vesicles if v.id not in doomed]

    def by_id(self, vesicle_id: int) -> Optional[Vesicle]:
        for vesicle in self.vesicles:
            if vesicle.id == vesicle_id:
                return vesicle
        return None

    def counts_per_node(self, num_nodes: int) -> np.ndarray:
        counts = np.zeros(num_nodes, dtype=int)
        for vesicle in self.vesicles:
            counts[vesicle.location] += 1
        return counts

    def counts_per_node_type(self, num_nodes: int, num_types: int) -> np.ndarray:
        counts = np.zeros((num_nodes, num_types), dtype=int)
        for vesicle in self.vesicles:
            counts[vesicle.location, vesicle.type_id] += 1
        return counts


@dataclass
class Encoder:
    """Affine map followed by tanh: psi(x) = tanh(W x + b)."""
    weight: np.ndarray
    bias: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(self.weight @ x + self.bias)


@dataclass
class RuleMaps:
    """
    Gradient-rule release maps of one (type, layer).

    alpha(c) = 1 + A_alpha c, beta(c) = A_beta c over the flattened (W, b)
    gradient, and lr-scale(c) = softplus(a.c + b0) / softplus(b0).
    """
    alpha_map: np.ndarray
    beta_map: np.ndarray
    lr_vec: np.ndarray
    lr_bias: float = 0.0


@dataclass
class TypeParams:
    """Every learnable parameter and hyperparameter of one vesicle type."""
    spec: VesicleTypeSpec
    emit_vec: np.ndarray
    dock_vec: np.ndarray
    content_mean_weight: np.ndarray
    content_mean_bias: np.ndarray
    content_logstd_weight: np.ndarray
    content_logstd_bias: np.ndarray
    transition_scores: np.ndarray
    temperature: float
    act_weight: List[np.ndarray]
    act_bias: List[np.ndarray]
    param_u: Dict[int, np.ndarray]
    param_v: Dict[int, np.ndarray]
    param_step: Dict[int, float]
    rule: Dict[int, RuleMaps]
    memory_projection: np.ndarray
    mod_strength: np.ndarray

    @property
    def decay_rate(self) -> float:
        return self.spec.decay_rate


def _uniform(rng: Generator, scale: float, shape) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape)


class VesicleTypeRegistry:
    """
    Per-type parameter bundle over a fixed graph.

    Args:
        vesicle_spec: Vesicle section of the config
        release_spec: Release section of the config
        graph: Substrate the vesicles move on
        node_widths: Activation width at every node
        layer_shapes: (d_out, d_in) of every parameterized layer, 1-based via index + 1
        feature_dim: Width of node feature vectors
        seed: Run seed
    """

    def __init__(
        self,
        vesicle_spec: VesicleSpec,
        release_spec: ReleaseSpec,
        graph: ComputationGraph,
        node_widths: Sequence[int],
        layer_shapes: Sequence[Tuple[int, int]],
        feature_dim: int,
        seed: int,
    ):
        self.graph = graph
        self.content_dim = vesicle_spec.content_dim
        self.memory_dim = release_spec.memory_dim
        self.feature_dim = feature_dim
        self.node_widths = list(node_widths)
        self.layer_shapes = list(layer_shapes)
        self._mask = graph.migration_mask()

        rng = stream(seed, Phase.REGISTRY)
        d_f, d_c = feature_dim, vesicle_spec.content_dim
        self.emit_encoder = Encoder(
            _uniform(rng, 1.0 / np.sqrt(d_f), (vesicle_spec.emit_dim, d_f)), np.zeros(vesicle_spec.emit_dim)
        )
        dock_in = d_f + d_c + 1
        self.dock_encoder = Encoder(
            _uniform(rng, 1.0 / np.sqrt(dock_in), (vesicle_spec.dock_dim, dock_in)), np.zeros(vesicle_spec.dock_dim)
        )
        self.read_projection = [np.zeros((width, self.memory_dim)) for width in self.node_widths]
        self.types: List[TypeParams] = [
            self._init_type(type_spec, vesicle_spec, rng) for type_spec in vesicle_spec.types
        ]
        self._transition_cache: Dict[int, Tuple[bytes, np.ndarray]] = {}

    @classmethod
    def for_network(
        cls,
        vesicle_spec: VesicleSpec,
        release_spec: ReleaseSpec,
        graph: ComputationGraph,
        net: NetworkState,
        seed: int,
    ) -> "VesicleTypeRegistry":
        """Registry whose release maps are shaped for a base network's layers."""
        node_widths = [net.widths[layer] for layer in graph.layer_of]
        layer_shapes = [layer.weight.shape for layer in net.params]
        return cls(vesicle_spec, release_spec, graph, node_widths, layer_shapes, net.feature_dim, seed)

    def _init_type(self, spec: VesicleTypeSpec, vesicle_spec: VesicleSpec, rng: Generator) -> TypeParams:
        d_f, d_c = self.feature_dim, self.content_dim
        num_nodes = self.graph.num_nodes
        param_u, param_v, param_step, rule = {}, {}, {}, {}
        for index, (d_out, d_in) in enumerate(self.layer_shapes):
            layer = index + 1
            param_u[layer] = np.zeros((d_out, d_c))
            param_v[layer] = np.zeros((d_in, d_c))
            param_step[layer] = spec.param_step
            n_params = d_out * d_in + d_out
            rule[layer] = RuleMaps(np.zeros((n_params, d_c)), np.zeros((n_params, d_c)), np.zeros(d_c))
        return TypeParams(
            spec=spec,
            emit_vec=spec.emit_gain * _uniform(rng, 1.0 / np.sqrt(vesicle_spec.emit_dim), vesicle_spec.emit_dim),
            dock_vec=spec.dock_gain * _uniform(rng, 1.0 / np.sqrt(vesicle_spec.dock_dim), vesicle_spec.dock_dim),
            content_mean_weight=np.zeros((d_c, d_f)),
            content_mean_bias=np.zeros(d_c),
            content_logstd_weight=np.zeros((d_c, d_f)),
            content_logstd_bias=np.full(d_c, np.log(spec.content_std)),
            transition_scores=np.zeros((num_nodes, num_nodes)),
            temperature=spec.temperature,
            act_weight=[np.zeros((2 * width, d_c)) for width in self.node_widths],
            act_bias=[np.zeros(2 * width) for width in self.node_widths],
            param_u=param_u,
            param_v=param_v,
            param_step=param_step,
            rule=rule,
            memory_projection=_uniform(rng, 1.0 / np.sqrt(d_c), (self.memory_dim, d_c)),
            mod_strength=spec.mod_gain * _uniform(rng, 1.0 / np.sqrt(d_c), d_c),
        )

    @property
    def num_types(self) -> int:
        return len(self.types)

    def transition_matrix(self, type_id: int) -> np.ndarray:
        """
        Row-stochastic T^(kappa): masked row-softmax of the free score matrix.

        Entries outside the migration mask (adjacency plus terminal self-loops)
        are exactly zero.
        """
        scores = self.types[type_id].transition_scores
        key = scores.tobytes()
        cached = self._transition_cache.get(type_id)
        if cached is not None and cached[0] == key:
            return cached[1]
        masked = np.where(self._mask, scores, -np.inf)
        masked = masked - masked.max(axis=1, keepdims=True)
        weights = np.where(self._mask, np.exp(masked), 0.0)
        matrix = weights / weights.sum(axis=1, keepdims=True)
        matrix.setflags(write=False)
        self._transition_cache[type_id] = (key, matrix)
        return matrix

    def content_distribution(self, type_id: int, features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Mean and std of P_c at a node's features (std clamped to >= 1e-8)."""
        params = self.types[type_id]
        mean = params.content_mean_weight @ features + params.content_mean_bias
        log_std = params.content_logstd_weight @ features + params.content_logstd_bias
        return mean, np.maximum(np.exp(log_std), MIN_CONTENT_STD)

    def film_params(self, type_id: int, node: int, content: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(gamma, beta) = W_act c + b_act, split in halves of the node width."""
        params = self.types[type_id]
        out = params.act_weight[node] @ content + params.act_bias[node]
        width = self.node_widths[node]
        return out[:width], out[width:]

    def modulation_strength(self, vesicle: Vesicle) -> float:
        """alpha_kappa(c, s) = tanh(a_kappa . c) * budget."""
        a = self.types[vesicle.type_id].mod_strength
        return float(np.tanh(a @ vesicle.content) * vesicle.internal.budget)


def sample_lifetime(spec: VesicleTypeSpec, rng: Generator) -> float:
    """Fixed lifetime, or an exponential draw resampled until it reaches the floor."""
    if spec.lifetime_dist == LifetimeDistribution.FIXED:
        return float(spec.lifetime_mean)
    lifetime = float(rng.exponential(spec.lifetime_mean))
    while lifetime < LIFETIME_FLOOR:
        lifetime = float(rng.exponential(spec.lifetime_mean))
    return lifetime


def spawn(
    registry: VesicleTypeRegistry,
    type_id: int,
    location: int,
    features: np.ndarray,
    rng: Generator,
    vesicle_id: int = 0,
    born_at: float = 0.0,
) -> Vesicle:
    """
    Draw a fresh vesicle from the emission distributions at a node.

    Args:
        registry: Type parameters
        type_id: Vesicle type
        location: Emitting node
        features: Node features feeding the content map
        rng: Stream dedicated to this vesicle
        vesicle_id: Identifier to assign
        born_at: Emission time

    Returns:
        Vesicle with full budget and mode 0
    """
    if not 0 <= type_id < registry.num_types:
        raise IndexError(f"Vesicle type {type_id} is outside [0, {registry.num_types})")
    mean, std = registry.content_distribution(type_id, features)
    content = mean + std * rng.standard_normal(registry.content_dim)
    lifetime = sample_lifetime(registry.types[type_id].spec, rng)
    return Vesicle(
        id=vesicle_id,
        content=content,
        type_id=type_id,
        location=location,
        lifetime=lifetime,
        internal=InternalState(),
        born_at=born_at,
        initial_lifetime=lifetime,
    )


def joint_state_snapshot(net: NetworkState, cfg: VesicleConfig) -> str:
    """
    SHA-256 digest of parameters, activations, vesicles and memories.

    Returns:
        Hex digest; any bit change in the joint state changes it
    """
    digest = hashlib.sha256()
    for layer in net.params:
        digest.update(np.ascontiguousarray(layer.weight, dtype=np.float64).tobytes())
        digest.update(np.ascontiguousarray(layer.bias, dtype=np.float64).tobytes())
    digest.update(b"|activations|")
    for h in net.activations:
        digest.update(np.ascontiguousarray(h, dtype=np.float64).tobytes())
    digest.update(b"|vesicles|")
    for vesicle in sorted(cfg.vesicles, key=lambda v: v.id):
        header = np.array([vesicle.id, vesicle.type_id, vesicle.location, vesicle.internal.mode], dtype=np.int64)
        digest.update(header.tobytes())
        scalars = np.array([vesicle.lifetime, vesicle.internal.budget], dtype=np.float64)
        digest.update(scalars.tobytes())
        digest.update(np.ascontiguousarray(vesicle.content, dtype=np.float64).tobytes())
    digest.update(b"|memories|")
    for memory in net.memories:
        digest.update(np.ascontiguousarray(memory.slot, dtype=np.float64).tobytes())
        digest.update(np.int64(memory.write_count).tobytes())
    return digest.hexdigest()
