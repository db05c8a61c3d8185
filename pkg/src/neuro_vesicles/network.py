"""
Layered tanh-affine base network with closed-form backpropagation.

Hidden layers use tanh, the output layer is linear. The loss is
0.5 * ||yhat - y||^2 / d.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .models import NetworkSpec
from .rng import Phase, stream

logger = logging.getLogger(__name__)

# Called after each layer's output is computed; may return a replacement vector.
ActivationHook = Callable[[int, np.ndarray], np.ndarray]


class DimensionError(ValueError):
    """Raised when vector or matrix widths do not match the network layout."""
    pass


class StaleGradientError(RuntimeError):
    """Raised when gradients are used or computed against outdated state."""
    pass


@dataclass
class LayerParams:
    """Weight matrix (d_out x d_in) and bias (d_out) of one layer."""
    weight: np.ndarray
    bias: np.ndarray

    @property
    def flat(self) -> np.ndarray:
        """Weight and bias concatenated into one vector."""
        return np.concatenate([self.weight.ravel(), self.bias])

    def copy(self) -> "LayerParams":
        return LayerParams(self.weight.copy(), self.bias.copy())


def loss(yhat: np.ndarray, y: np.ndarray) -> float:
    """
    Scaled squared error 0.5 * ||yhat - y||^2 / d.

    Raises:
        DimensionError: If the widths differ
    """
    yhat = np.asarray(yhat, dtype=float)
    y = np.asarray(y, dtype=float)
    if yhat.shape != y.shape:
        raise DimensionError(f"Prediction width {yhat.shape} does not match target width {y.shape}")
    diff = yhat - y
    return float(0.5 * np.dot(diff, diff) / diff.size)


@dataclass
class ExternalMemory:
    """Per-node memory slot M of width d_m."""
    slot: np.ndarray
    write_count: int = 0

    @classmethod
    def empty(cls, width: int) -> "ExternalMemory":
        return cls(np.zeros(width))


class NetworkState:
    """
    Parameters, activations, gradients and meta state of the base network.

    activations[0] is the input and activations[l] the output of layer l.
    Gradients are valid only while `params_version` matches the version that
    produced them.
    """

    def __init__(self, params: List[LayerParams], meta_window: int = 16, meta_dim: int = 0):
        self.params = params
        self.widths = [params[0].weight.shape[1]] + [layer.weight.shape[0] for layer in params]
        self.activations: List[np.ndarray] = []
        self.preactivations: List[Optional[np.ndarray]] = []
        self.grads: List[LayerParams] = []
        self.meta = np.zeros(meta_dim)
        self.memories: List[ExternalMemory] = []
        self.meta_window = meta_window
        self._loss_history: List[float] = []
        self._params_version = 0
        self._forward_version: Optional[int] = None
        self._grad_version: Optional[int] = None

    @classmethod
    def initialize(cls, spec: NetworkSpec, seed: int) -> "NetworkState":
        """
        Fan-in uniform initialization U(-a, a), a = 1/sqrt(d_in) unless configured.

        Args:
            spec: Network section of the config
            seed: Run seed
        """
        rng = stream(seed, Phase.INIT)
        params = []
        for d_in, d_out in zip(spec.widths[:-1], spec.widths[1:]):
            scale = spec.init_scale if spec.init_scale is not None else 1.0 / np.sqrt(d_in)
            weight = rng.uniform(-scale, scale, size=(d_out, d_in))
            bias = rng.uniform(-scale, scale, size=d_out)
            params.append(LayerParams(weight, bias))
        return cls(params, meta_window=spec.meta_window, meta_dim=1)

    @property
    def num_layers(self) -> int:
        return len(self.params)

    @property
    def grads_fresh(self) -> bool:
        """True when gradients were computed for the current parameters."""
        return self._grad_version is not None and self._grad_version == self._params_version

    def _mark_params_changed(self) -> None:
        self._params_version += 1

    def forward(
        self,
        x: np.ndarray,
        modulate: Optional[ActivationHook] = None,
        start_layer: int = 0,
    ) -> np.ndarray:
        """
        Run the tanh-affine composition and store every activation.

        Args:
            x: Input vector of width d_0
            modulate: Optional hook applied to each computed layer output
            start_layer: First layer to recompute; 0 starts from x, k > 0 reuses the
                stored activations[:k] (x is then ignored)

        Returns:
            Output activation h^(L)

        Raises:
            DimensionError: If x has the wrong width
        """
        if start_layer <= 0:
            x = np.asarray(x, dtype=float)
            if x.shape != (self.widths[0],):
                raise DimensionError(f"Input width {x.shape} does not match {self.widths[0]}")
            if modulate is not None:
                x = modulate(0, x.copy())
            self.activations = [x.copy()]
            self.preactivations = [None]
            start_layer = 1
        else:
            del self.activations[start_layer:]
            del self.preactivations[start_layer:]
        for layer_index in range(start_layer, self.num_layers + 1):
            layer = self.params[layer_index - 1]
            z = layer.weight @ self.activations[layer_index - 1] + layer.bias
            h = np.tanh(z) if layer_index < self.num_layers else z.copy()
            if modulate is not None:
                h = modulate(layer_index, h)
            self.activations.append(h)
            self.preactivations.append(z)
        self._forward_version = self._params_version
        return self.activations[-1]

    def set_activation(self, layer: int, h: np.ndarray) -> None:
        """Overwrite the stored output of a layer (used before re-running the tail)."""
        if h.shape != self.activations[layer].shape:
            raise DimensionError(f"Activation width {h.shape} does not match layer {layer}")
        self.activations[layer] = h

    def backward(self, y: np.ndarray) -> None:
        """
        Exact reverse-mode gradients of the loss for every layer.

        Tanh derivatives are taken at the stored pre-activations, so injected
        activation changes act as additive perturbations on the path.

        Raises:
            StaleGradientError: If parameters changed since the last forward pass
            DimensionError: If y has the wrong width
        """
        if self._forward_version is None or self._forward_version != self._params_version:
            raise StaleGradientError("backward requires a forward pass on the current parameters")
        y = np.asarray(y, dtype=float)
        output = self.activations[-1]
        if y.shape != output.shape:
            raise DimensionError(f"Target width {y.shape} does not match output {output.shape}")
        delta = (output - y) / output.size
        grads: List[LayerParams] = [None] * self.num_layers  # type: ignore[list-item]
        for layer_index in range(self.num_layers, 0, -1):
            if layer_index < self.num_layers:
                delta = delta * (1.0 - np.tanh(self.preactivations[layer_index]) ** 2)
            prev = self.activations[layer_index - 1]
            grads[layer_index - 1] = LayerParams(np.outer(delta, prev), delta.copy())
            delta = self.params[layer_index - 1].weight.T @ delta
        self.grads = grads
        self._grad_version = self._params_version

    def apply_param_delta(self, layer: int, delta_weight: np.ndarray) -> None:
        """Add a weight delta to a layer (1-based); marks gradients stale."""
        target = self.params[layer - 1].weight
        if delta_weight.shape != target.shape:
            raise DimensionError(f"Delta shape {delta_weight.shape} does not match layer {layer} weight {target.shape}")
        target += delta_weight
        self._mark_params_changed()

    def sgd_update(self, grads: Sequence[LayerParams], learning_rates: Sequence[float]) -> None:
        """theta <- theta - lr_l * g_l for every layer."""
        for layer, grad, lr in zip(self.params, grads, learning_rates):
            layer.weight -= lr * grad.weight
            layer.bias -= lr * grad.bias
        self._mark_params_changed()

    def grad_norm(self, layer: int) -> float:
        """Frobenius norm of the gradient bundle of a layer; 0 for the input or stale grads."""
        if layer == 0 or not self.grads_fresh:
            return 0.0
        return float(np.linalg.norm(self.grads[layer - 1].flat))

    def node_features(self, layer: int) -> np.ndarray:
        """
        Feature vector [mean(h), std(h), grad_norm, *meta] of a layer.

        Args:
            layer: Layer index in [0, L]
        """
        h = self.activations[layer]
        return np.concatenate([[float(np.mean(h)), float(np.std(h)), self.grad_norm(layer)], self.meta])

    def record_loss(self, value: float) -> None:
        """Update the meta state: running mean of the last `meta_window` losses."""
        if self.meta.size == 0:
            return
        self._loss_history.append(float(value))
        if len(self._loss_history) > self.meta_window:
            self._loss_history.pop(0)
        self.meta = np.array([float(np.mean(self._loss_history))])

    @property
    def feature_dim(self) -> int:
        return 3 + self.meta.size

    def flat_params(self) -> np.ndarray:
        """All parameters concatenated layer by layer."""
        return np.concatenate([layer.flat for layer in self.params])

    def attach_memories(self, num_nodes: int, width: int) -> None:
        """Give every graph node an empty memory slot."""
        self.memories = [ExternalMemory.empty(width) for _ in range(num_nodes)]

    def clone(self) -> "NetworkState":
        """Deep copy of parameters and meta state (activations are not copied)."""
        other = NetworkState(
            [layer.copy() for layer in self.params], meta_window=self.meta_window, meta_dim=self.meta.size
        )
        other.meta = self.meta.copy()
        other._loss_history = list(self._loss_history)
        other.memories = [ExternalMemory(memory.slot.copy(), memory.write_count) for memory in self.memories]
        return other

    def is_finite(self) -> bool:
        arrays = [layer.flat for layer in self.params] + list(self.activations) + [m.slot for m in self.memories]
        return all(np.all(np.isfinite(array)) for array in arrays)
