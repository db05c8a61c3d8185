"""
Release operators applied when a vesicle docks.

Four channels: FiLM-style activation modulation, rank-one parameter deltas,
gradient-rule modulation and external-memory writes (with additive read
injection on the next forward pass).
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from .models import ReleaseSpec
from .network import DimensionError, ExternalMemory, LayerParams, StaleGradientError
from .vesicles import Vesicle, VesicleTypeRegistry

logger = logging.getLogger(__name__)


class ReleaseOp(str, Enum):
    """Release channels, in application order after activation deltas."""
    ACTIVATION = "activation"
    PARAMETER = "parameter"
    RULE = "rule"
    MEMORY = "memory"


RELEASE_ORDER: Tuple[ReleaseOp, ...] = (ReleaseOp.ACTIVATION, ReleaseOp.PARAMETER, ReleaseOp.RULE, ReleaseOp.MEMORY)


def enabled_ops(spec: ReleaseSpec) -> Tuple[ReleaseOp, ...]:
    """Operators switched on in the config, in canonical order."""
    return tuple(op for op in RELEASE_ORDER if getattr(spec, op.value))


@dataclass
class RankOneDelta:
    """Parameter delta scale * u w^T for one layer."""
    layer: int
    u: np.ndarray
    w: np.ndarray
    scale: float

    def matrix(self) -> np.ndarray:
        return self.scale * np.outer(self.u, self.w)

    @property
    def is_zero(self) -> bool:
        return self.scale == 0 or not np.any(self.u) or not np.any(self.w)


@dataclass
class RuleModulation:
    """Elementwise gradient map g' = alpha * g + beta and a learning-rate scale for one layer."""
    layer: int
    alpha: np.ndarray
    beta: np.ndarray
    lr_scale: float

    def apply(self, grad: LayerParams) -> LayerParams:
        """Modulate a layer's gradient bundle, flattened as (weight, bias)."""
        flat = grad.flat
        if flat.shape != self.alpha.shape:
            raise DimensionError(f"Rule map width {self.alpha.shape} does not match gradient {flat.shape}")
        modulated = self.alpha * flat + self.beta
        n_weight = grad.weight.size
        return LayerParams(modulated[:n_weight].reshape(grad.weight.shape), modulated[n_weight:])

    @property
    def is_identity(self) -> bool:
        return self.lr_scale == 1.0 and not np.any(self.alpha != 1.0) and not np.any(self.beta)


@dataclass
class ReleaseEffect:
    """Everything one docking vesicle releases at its node."""
    vesicle_id: int
    node: int
    delta_h: Optional[np.ndarray] = None
    delta_theta: Optional[RankOneDelta] = None
    rule_mod: Optional[RuleModulation] = None
    memory_write: Optional[np.ndarray] = None

    def summary(self) -> Dict[str, float]:
        """Scalar magnitudes for the event log."""
        payload: Dict[str, float] = {}
        if self.delta_h is not None:
            payload["delta_h_norm"] = float(np.linalg.norm(self.delta_h))
        if self.delta_theta is not None:
            payload["delta_theta_norm"] = float(np.linalg.norm(self.delta_theta.matrix()))
        if self.rule_mod is not None:
            payload["lr_scale"] = float(self.rule_mod.lr_scale)
        if self.memory_write is not None:
            payload["memory_write_norm"] = float(np.linalg.norm(self.memory_write))
        return payload


def _softplus(x: float) -> float:
    return float(np.logaddexp(0.0, x))


def release_activation(registry: VesicleTypeRegistry, vesicle: Vesicle, h: np.ndarray) -> np.ndarray:
    """
    Budget-scaled FiLM delta: budget * (gamma * h + beta).

    Raises:
        DimensionError: If h does not have the node's width
    """
    gamma, beta = registry.film_params(vesicle.type_id, vesicle.location, vesicle.content)
    if h.shape != gamma.shape:
        raise DimensionError(f"Activation width {h.shape} does not match release width {gamma.shape}")
    return vesicle.internal.budget * (gamma * h + beta)


def release_parameters(
    registry: VesicleTypeRegistry, vesicle: Vesicle, layer: LayerParams
) -> Optional[RankOneDelta]:
    """
    Rank-one delta eta * budget * (U c)(V c)^T for the layer at the vesicle's node.

    Returns:
        None for input-layer nodes, which own no weights

    Raises:
        DimensionError: If the release maps do not fit the layer
    """
    layer_index = registry.graph.layer_of[vesicle.location]
    if layer_index == 0:
        return None
    params = registry.types[vesicle.type_id]
    u = params.param_u[layer_index] @ vesicle.content
    w = params.param_v[layer_index] @ vesicle.content
    if (u.size, w.size) != layer.weight.shape:
        raise DimensionError(f"Rank-one factors {(u.size, w.size)} do not fit weight {layer.weight.shape}")
    return RankOneDelta(layer_index, u, w, params.param_step[layer_index] * vesicle.internal.budget)


def rule_modulation(registry: VesicleTypeRegistry, vesicle: Vesicle) -> Optional[RuleModulation]:
    """
    alpha(c), beta(c) and the lr scale softplus(a.c + b0) / softplus(b0).

    All three deviations from the identity rule (alpha - 1, beta, lr scale - 1)
    are scaled by the vesicle's budget.
    """
    layer_index = registry.graph.layer_of[vesicle.location]
    if layer_index == 0:
        return None
    maps = registry.types[vesicle.type_id].rule[layer_index]
    budget = vesicle.internal.budget
    alpha = 1.0 + budget * (maps.alpha_map @ vesicle.content)
    beta = budget * (maps.beta_map @ vesicle.content)
    ratio = _softplus(float(maps.lr_vec @ vesicle.content) + maps.lr_bias) / _softplus(maps.lr_bias)
    lr_scale = 1.0 + budget * (ratio - 1.0)
    return RuleModulation(layer_index, alpha, beta, lr_scale)


def release_rule(
    registry: VesicleTypeRegistry, vesicle: Vesicle, grad: LayerParams, grads_fresh: bool = True
) -> Tuple[LayerParams, float]:
    """
    Vesicle-conditioned gradient g' = alpha(c) * g + beta(c) and its lr scale.

    Raises:
        StaleGradientError: If the gradient does not belong to the current parameters
    """
    if not grads_fresh:
        raise StaleGradientError("Rule release requires fresh gradients")
    modulation = rule_modulation(registry, vesicle)
    if modulation is None:
        return grad, 1.0
    return modulation.apply(grad), modulation.lr_scale


def memory_write(
    mem: ExternalMemory, vesicle: Vesicle, registry: VesicleTypeRegistry, rho: float = 0.1
) -> ExternalMemory:
    """EMA write slot <- (1 - rho) * slot + rho * P_kappa c; updates in place."""
    projected = registry.types[vesicle.type_id].memory_projection @ vesicle.content
    return write_value(mem, projected, rho)


def write_value(mem: ExternalMemory, value: np.ndarray, rho: float) -> ExternalMemory:
    """EMA write of an already projected value."""
    mem.slot = (1.0 - rho) * mem.slot + rho * value
    mem.write_count += 1
    return mem


def memory_read_inject(mem: ExternalMemory, h: np.ndarray, projection: np.ndarray) -> np.ndarray:
    """h + Q slot; h is returned untouched when the injection is zero."""
    injection = projection @ mem.slot
    if not np.any(injection):
        return h
    return h + injection


def combined_release(
    registry: VesicleTypeRegistry, docked: Sequence[Vesicle], node_activations: Sequence[np.ndarray]
) -> Dict[int, np.ndarray]:
    """
    Summed activation deltas per node, each computed against the pre-release activation.

    Args:
        registry: Type parameters
        docked: Vesicles docking this step
        node_activations: Pre-release activation of every node

    Returns:
        Mapping node -> total delta; nodes without docks are absent
    """
    totals: Dict[int, np.ndarray] = {}
    for vesicle in sorted(docked, key=lambda v: v.id):
        delta = release_activation(registry, vesicle, node_activations[vesicle.location])
        if vesicle.location in totals:
            totals[vesicle.location] = totals[vesicle.location] + delta
        else:
            totals[vesicle.location] = delta
    return totals


def compute_effect(
    registry: VesicleTypeRegistry,
    vesicle: Vesicle,
    ops: FrozenSet[ReleaseOp],
    pre_release_h: np.ndarray,
    layer: Optional[LayerParams],
) -> ReleaseEffect:
    """
    Evaluate the selected operators for one docking vesicle at its current budget.

    Args:
        ops: Operators to apply
        pre_release_h: Activation at the vesicle's node before any release this step
        layer: Parameters of the node's layer (None for input nodes)
    """
    effect = ReleaseEffect(vesicle.id, vesicle.location)
    if ReleaseOp.ACTIVATION in ops:
        effect.delta_h = release_activation(registry, vesicle, pre_release_h)
    if ReleaseOp.PARAMETER in ops and layer is not None:
        effect.delta_theta = release_parameters(registry, vesicle, layer)
    if ReleaseOp.RULE in ops:
        effect.rule_mod = rule_modulation(registry, vesicle)
    if ReleaseOp.MEMORY in ops:
        effect.memory_write = registry.types[vesicle.type_id].memory_projection @ vesicle.content
    return effect


def consume_budget(vesicle: Vesicle) -> None:
    """Halve the release budget after a dock."""
    vesicle.internal.budget *= 0.5


def compose_rules(modulations: List[RuleModulation], grad: LayerParams) -> Tuple[LayerParams, float]:
    """Apply several rule modulations to one layer in order; lr scales multiply."""
    scale = 1.0
    for modulation in modulations:
        grad = modulation.apply(grad)
        scale *= modulation.lr_scale
    return grad, scale
