"""
Test cases for the base network: forward pass, loss and backpropagation.
"""

import numpy as np
import pytest

from neuro_vesicles.models import NetworkSpec
from neuro_vesicles.network import (
    DimensionError,
    LayerParams,
    NetworkState,
    StaleGradientError,
    loss,
)


def scalar_net(weight: float, bias: float = 0.0) -> NetworkState:
    """Single linear output layer with one input and one output."""
    return NetworkState([LayerParams(np.array([[weight]]), np.array([bias]))])


def finite_difference_grads(net: NetworkState, x: np.ndarray, y: np.ndarray, eps: float = 1e-5):
    """Central differences of loss(forward(x)) for every parameter."""
    grads = []
    for layer in net.params:
        grad_w = np.zeros_like(layer.weight)
        grad_b = np.zeros_like(layer.bias)
        for array, grad in ((layer.weight, grad_w), (layer.bias, grad_b)):
            for index in np.ndindex(array.shape):
                original = array[index]
                array[index] = original + eps
                plus = loss(net.forward(x), y)
                array[index] = original - eps
                minus = loss(net.forward(x), y)
                array[index] = original
                grad[index] = (plus - minus) / (2 * eps)
        grads.append(LayerParams(grad_w, grad_b))
    return grads


class TestLoss:
    """Test cases for the squared-error loss."""

    def test_examples(self):
        """Test hand-evaluated loss values."""
        assert loss(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0
        assert loss(np.array([1.0, 0.0]), np.array([0.0, 0.0])) == pytest.approx(0.25)
        assert loss(np.array([2.0, -1.0]), np.array([0.0, 1.0])) == pytest.approx(2.0)

    def test_width_mismatch(self):
        """Test differing widths raise."""
        with pytest.raises(DimensionError):
            loss(np.zeros(2), np.zeros(3))


class TestForward:
    """Test cases for the forward pass."""

    def test_zero_network(self):
        """Test an all-zero network outputs zero."""
        net = NetworkState(
            [LayerParams(np.zeros((3, 2)), np.zeros(3)), LayerParams(np.zeros((1, 3)), np.zeros(1))]
        )

        assert np.array_equal(net.forward(np.array([0.7, -2.0])), np.zeros(1))

    def test_scalar_tanh_hidden_layer(self):
        """Test tanh at a hidden layer."""
        net = NetworkState(
            [LayerParams(np.array([[1.0]]), np.zeros(1)), LayerParams(np.array([[1.0]]), np.zeros(1))]
        )
        net.forward(np.array([0.5]))

        assert net.activations[1][0] == pytest.approx(0.462117, abs=1e-6)
        assert net.activations[2][0] == pytest.approx(np.tanh(0.5))
        np.testing.assert_allclose(net.forward(np.array([0.0])), [0.0])

    def test_output_layer_is_linear(self):
        """Test the last layer applies no nonlinearity."""
        assert scalar_net(2.0, 1.0).forward(np.array([3.0]))[0] == pytest.approx(7.0)

    def test_input_width_checked(self):
        """Test a wrong input width raises."""
        with pytest.raises(DimensionError):
            scalar_net(1.0).forward(np.zeros(2))

    def test_forward_is_pure(self):
        """Test repeated forward passes are bitwise identical."""
        net = NetworkState.initialize(NetworkSpec(widths=[3, 4, 2]), seed=5)
        x = np.array([0.1, -0.4, 0.9])
        first = [h.copy() for h in (net.forward(x), *net.activations)]
        second = [h.copy() for h in (net.forward(x), *net.activations)]

        for a, b in zip(first, second):
            assert np.array_equal(a, b)

    def test_tail_rerun_reuses_prefix(self):
        """Test restarting at a layer keeps earlier activations."""
        net = NetworkState.initialize(NetworkSpec(widths=[2, 3, 1]), seed=1)
        x = np.array([0.3, -0.2])
        net.forward(x)
        shifted = net.activations[1] + 0.5
        net.set_activation(1, shifted)
        out = net.forward(x, start_layer=2)

        layer = net.params[1]
        np.testing.assert_allclose(out, layer.weight @ shifted + layer.bias)
        assert np.array_equal(net.activations[1], shifted)

    def test_modulate_hook(self):
        """Test the hook can replace a layer output."""
        net = scalar_net(1.0)
        out = net.forward(np.array([1.0]), modulate=lambda layer, h: h * 3 if layer == 1 else h)

        assert out[0] == pytest.approx(3.0)

    def test_initialize_scale(self):
        """Test default init lies within 1/sqrt(fan_in)."""
        net = NetworkState.initialize(NetworkSpec(widths=[4, 9, 1]), seed=0)

        assert np.abs(net.params[0].weight).max() <= 0.5
        assert np.abs(net.params[1].weight).max() <= 1.0 / 3.0
        assert net.feature_dim == 4


class TestBackward:
    """Test cases for gradients."""

    def test_zero_at_minimum(self):
        """Test gradients vanish when the prediction equals the target."""
        net = NetworkState.initialize(NetworkSpec(widths=[2, 3, 2]), seed=2)
        y = net.forward(np.array([0.5, -0.5])).copy()
        net.backward(y)

        for grad in net.grads:
            assert not np.any(grad.flat)

    def test_linear_closed_form(self):
        """Test a one-layer net against (yhat - y) x^T / d."""
        net = NetworkState([LayerParams(np.array([[0.5, -1.0], [2.0, 0.0]]), np.array([0.1, 0.2]))])
        x = np.array([1.0, 2.0])
        y = np.array([0.0, 1.0])
        yhat = net.forward(x)
        net.backward(y)

        np.testing.assert_allclose(net.grads[0].weight, np.outer(yhat - y, x) / 2)
        np.testing.assert_allclose(net.grads[0].bias, (yhat - y) / 2)

    @pytest.mark.parametrize("widths, seed", [([2, 3, 1], 0), ([3, 4, 2], 1), ([2, 3, 3, 2], 2)])
    def test_finite_differences(self, widths, seed):
        """Test backprop against central differences."""
        net = NetworkState.initialize(NetworkSpec(widths=widths), seed=seed)
        rng = np.random.default_rng(seed)
        x = rng.normal(size=widths[0])
        y = rng.normal(size=widths[-1])
        numeric = finite_difference_grads(net, x, y)
        net.forward(x)
        net.backward(y)

        for analytic, approx in zip(net.grads, numeric):
            np.testing.assert_allclose(analytic.flat, approx.flat, rtol=1e-6, atol=1e-9)

    def test_stale_forward(self):
        """Test backward after a parameter change raises."""
        net = scalar_net(1.0)
        net.forward(np.array([1.0]))
        net.apply_param_delta(1, np.array([[0.1]]))

        with pytest.raises(StaleGradientError):
            net.backward(np.array([0.0]))

    def test_grad_norm_zero_when_stale(self):
        """Test features report zero gradient norm after an update."""
        net = scalar_net(1.0)
        net.forward(np.array([1.0]))
        net.backward(np.array([0.0]))
        assert net.grad_norm(1) > 0

        net.sgd_update(net.grads, [0.1])
        assert not net.grads_fresh
        assert net.grad_norm(1) == 0.0


class TestNodeFeatures:
    """Test cases for node feature vectors."""

    def test_hand_computed_features(self):
        """Test h=(1,-1), ||g||=2 and no meta gives (0, 1, 2)."""
        net = NetworkState([LayerParams(np.eye(2), np.zeros(2))])
        net.forward(np.array([0.0, 0.0]))
        net.backward(np.array([0.0, 0.0]))
        net.activations[1] = np.array([1.0, -1.0])
        net.grads[0] = LayerParams(np.array([[2.0, 0.0], [0.0, 0.0]]), np.zeros(2))

        np.testing.assert_allclose(net.node_features(1), [0.0, 1.0, 2.0])

    def test_zero_and_constant_features(self):
        """Test zero and constant activation vectors."""
        net = NetworkState([LayerParams(np.zeros((3, 2)), np.full(3, 0.4))], meta_dim=1)
        net.forward(np.zeros(2))

        np.testing.assert_allclose(net.node_features(0), np.zeros(4))
        np.testing.assert_allclose(net.node_features(1), [0.4, 0.0, 0.0, 0.0], atol=1e-15)

    def test_meta_running_mean(self):
        """Test the meta state averages the last window of losses."""
        net = NetworkState([LayerParams(np.eye(1), np.zeros(1))], meta_window=2, meta_dim=1)
        for value in (1.0, 3.0, 5.0):
            net.record_loss(value)

        np.testing.assert_allclose(net.meta, [4.0])
        assert net.feature_dim == 4

    def test_clone_is_independent(self):
        """Test a clone does not share parameter storage."""
        net = NetworkState.initialize(NetworkSpec(widths=[2, 2]), seed=4)
        net.attach_memories(2, 3)
        other = net.clone()
        other.params[0].weight += 1.0
        other.memories[0].slot += 1.0

        assert not np.allclose(net.params[0].weight, other.params[0].weight)
        assert not np.any(net.memories[0].slot)
        assert np.array_equal(net.meta, other.meta)
