"""
Test cases for the spiking overlay.
"""

import numpy as np
import pytest

from neuro_vesicles.graph import ComputationGraph
from neuro_vesicles.models import NetworkSpec, ReleaseSpec, VesicleSpec
from neuro_vesicles.network import NetworkState
from neuro_vesicles.snn import (
    LifNeuron,
    SpikeEvent,
    SpikeScheduler,
    Synapse,
    TimeRegressionError,
    darwin3_plasticity,
    dense_lifetime_reference,
    event_driven_advance,
    lif_step,
    modulatory_field,
    run_snn,
    three_factor_update,
    trace_step,
)
from neuro_vesicles.vesicles import Vesicle, VesicleConfig, VesicleTypeRegistry


def make_vesicle(vesicle_id: int, location: int = 0, lifetime: float = 3.0, born_at: float = 0.0) -> Vesicle:
    return Vesicle(
        id=vesicle_id, content=np.array([1.0, 0.0]), type_id=0, location=location, lifetime=lifetime, born_at=born_at
    )


def spiking_config(config_factory, kernels=None, **snn):
    """Small recurrent population driven hard enough to spike every few steps."""
    values = {"num_neurons": 6, "connection_prob": 0.5, "input_current": 20.0, "input_rate": 0.3}
    values.update(snn)
    return config_factory(snn=values, kernels=kernels or {})


class TestLifStep:
    """Test cases for the LIF membrane update."""

    def test_euler_hand_step(self):
        """Test u=1, I=0, tau_m=10, dt=1 gives u=0.9."""
        neuron, spiked = lif_step(LifNeuron(u=1.0, tau_m=10.0), 0.0, 1.0)

        assert neuron.u == pytest.approx(0.9)
        assert not spiked

    def test_geometric_decay(self):
        """Test zero input decays u by (1 - dt/tau_m) per step without spiking."""
        neuron = LifNeuron(u=0.8, tau_m=10.0)
        for k in range(1, 1001):
            _, spiked = lif_step(neuron, 0.0, 1.0, time=float(k))
            assert not spiked
            assert neuron.u == pytest.approx(0.8 * 0.9**k, abs=1e-12)

    def test_threshold_reached_exactly(self):
        """Test u landing on the threshold spikes and resets."""
        neuron, spiked = lif_step(LifNeuron(u=0.0, threshold=1.0, tau_m=1.0), 1.0, 1.0)

        assert spiked
        assert neuron.u == 0.0

    def test_refractory_window(self):
        """Test no spike fires inside the refractory window."""
        neuron = LifNeuron(tau_m=1.0, refractory=2.0)
        _, first = lif_step(neuron, 5.0, 1.0, time=0.0)
        _, second = lif_step(neuron, 5.0, 1.0, time=1.0)
        _, third = lif_step(neuron, 5.0, 1.0, time=2.0)

        assert (first, second, third) == (True, False, True)


class TestTraceStep:
    """Test cases for eligibility traces."""

    def test_decay_hand_step(self):
        """Test e=1, tau_e=5, dt=1 decays to 0.8."""
        synapse = Synapse(0, 1, w=0.5, e_trace=1.0, tau_e=5.0)

        assert trace_step(synapse, False, False, 1.0) == pytest.approx(0.8)
        assert synapse.e_trace == pytest.approx(0.8)

    def test_geometric_decay(self):
        """Test traces follow (1 - dt/tau_e)^k over 1000 quiet steps."""
        synapse = Synapse(0, 1, w=0.5, e_trace=1.0, tau_e=5.0)
        for k in range(1, 1001):
            trace_step(synapse, False, False, 1.0)
            assert synapse.e_trace == pytest.approx(0.8**k, abs=1e-12)

    def test_pre_spike_impulse(self):
        """Test a pre spike with A+ = 1, tau_e = dt = 1 sets e = 1."""
        synapse = Synapse(0, 1, w=0.5, tau_e=1.0)

        assert trace_step(synapse, True, True, 1.0, a_plus=1.0) == 1.0

    def test_post_only_depresses(self):
        """Test a lone post spike drives the trace toward -A-."""
        synapse = Synapse(0, 1, w=0.5, tau_e=1.0)

        assert trace_step(synapse, False, True, 1.0, a_minus=0.5) == -0.5


class TestPlasticityRules:
    """Test cases for the three-factor and generic weight updates."""

    def test_three_factor_zero_factors(self):
        """Test m = 0 or e = 0 leaves the weight untouched."""
        synapse = Synapse(0, 1, w=0.5, e_trace=3.0)
        assert three_factor_update(synapse, 0.0, 0.1) == 0.0

        synapse = Synapse(0, 1, w=0.5, e_trace=0.0)
        assert three_factor_update(synapse, 2.0, 0.1) == 0.0
        assert synapse.w == 0.5

    def test_three_factor_hand_example(self):
        """Test eta=0.1, e=2, m=0.5 gives 0.1 and applies it."""
        synapse = Synapse(0, 1, w=0.5, e_trace=2.0)

        assert three_factor_update(synapse, 0.5, 0.1) == pytest.approx(0.1)
        assert synapse.w == pytest.approx(0.6)

    def test_generic_rule_no_vesicles(self):
        """Test zero amplitudes and no docked vesicles give zero."""
        synapse = Synapse(0, 1, w=0.5, e_trace=1.0)

        assert darwin3_plasticity(synapse, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0) == 0.0

    def test_generic_rule_reduces_to_three_factor(self):
        """Test the modulatory term alone equals the three-factor update."""
        synapse = Synapse(0, 1, w=0.5, e_trace=2.0)
        generic = darwin3_plasticity(synapse, 0.0, 0.0, synapse.e_trace, 0.0, 0.0, 0.5)

        assert generic == three_factor_update(synapse, 0.5, 1.0)

    def test_generic_rule_hand_sum(self):
        """Test (1, 2, 3) . (0.1, 0.1, 0.1) = 0.6."""
        synapse = Synapse(0, 1, w=0.5)

        assert darwin3_plasticity(synapse, 1.0, 2.0, 3.0, 0.1, 0.1, 0.1) == pytest.approx(0.6)


class TestModulatoryField:
    """Test cases for the vesicle-carried modulatory field."""

    def setup_method(self):
        self.graph = ComputationGraph.from_edges(3, [(0, 1), (1, 2)], layer_of=[0, 1, 2])
        net = NetworkState.initialize(NetworkSpec(widths=[2, 3, 1]), seed=0)
        self.registry = VesicleTypeRegistry.for_network(
            VesicleSpec(content_dim=2, num_types=1), ReleaseSpec(), self.graph, net, seed=0
        )
        self.registry.types[0].mod_strength = np.array([np.arctanh(0.7), 0.0])
        self.synapse = Synapse(0, 1, w=0.5, e_trace=1.0)

    def field(self, vesicles) -> float:
        return modulatory_field(VesicleConfig(vesicles), self.registry, self.graph, self.synapse, radius=0)

    def test_empty(self):
        """Test no vesicles give m = 0."""
        assert self.field([]) == 0.0

    def test_singleton_and_additivity(self):
        """Test one vesicle gives its strength and an identical twin doubles it."""
        assert self.field([make_vesicle(0, 1)]) == pytest.approx(0.7)
        assert self.field([make_vesicle(0, 1), make_vesicle(1, 1)]) == pytest.approx(1.4)

    def test_budget_scaling(self):
        """Test a spent budget scales the strength."""
        vesicle = make_vesicle(0, 0)
        vesicle.internal.budget = 0.5

        assert self.field([vesicle]) == pytest.approx(0.35)

    def test_locality(self):
        """Test vesicles outside N(i, j) leave the field and the update bitwise unchanged."""
        near = [make_vesicle(0, 0), make_vesicle(1, 1)]
        distant = near + [make_vesicle(2, 2), make_vesicle(3, 2)]

        assert self.field(near) == self.field(distant)
        first, second = Synapse(0, 1, w=0.5, e_trace=1.3), Synapse(0, 1, w=0.5, e_trace=1.3)
        assert three_factor_update(first, self.field(near), 0.1) == three_factor_update(second, self.field(distant), 0.1)


class TestSpikeScheduler:
    """Test cases for spike event ordering."""

    def test_time_then_neuron_order(self):
        """Test events pop by time with ties broken by neuron index."""
        scheduler = SpikeScheduler([SpikeEvent(2.0, 0), SpikeEvent(1.0, 3)])
        scheduler.push(SpikeEvent(1.0, 1))
        scheduler.push(SpikeEvent(0.5, 7))
        order = [scheduler.pop() for _ in range(len(scheduler))]

        assert order == [SpikeEvent(0.5, 7), SpikeEvent(1.0, 1), SpikeEvent(1.0, 3), SpikeEvent(2.0, 0)]
        assert scheduler.peek() is None


class TestEventDrivenAdvance:
    """Test cases for event-driven vesicle aging."""

    def test_pure_aging(self):
        """Test no spikes in [0, 10] expires a tau=3 vesicle without kernel evaluations."""
        vesicles = VesicleConfig([make_vesicle(0, lifetime=3.0)])
        result = event_driven_advance(SpikeScheduler(), vesicles, 0.0, 10.0)

        assert result.kernel_evaluations == 0
        assert result.removed == [0]
        assert len(vesicles) == 0

    def test_kernels_per_event_time(self):
        """Test spikes at t=1 and t=2 evaluate kernels exactly twice."""
        calls = []
        scheduler = SpikeScheduler([SpikeEvent(1.0, 0), SpikeEvent(2.0, 4), SpikeEvent(2.0, 1)])
        vesicles = VesicleConfig([make_vesicle(0, lifetime=50.0)])
        result = event_driven_advance(scheduler, vesicles, 0.0, 10.0, on_event=lambda t, batch: calls.append((t, batch)))

        assert result.kernel_evaluations == 2
        assert result.event_times == [1.0, 2.0]
        assert [t for t, _ in calls] == [1.0, 2.0]
        assert [event.neuron for event in calls[1][1]] == [1, 4]

    def test_events_beyond_window_stay_queued(self):
        """Test events after to_time are left for a later advance."""
        scheduler = SpikeScheduler([SpikeEvent(1.0, 0), SpikeEvent(6.0, 0)])
        event_driven_advance(scheduler, VesicleConfig(), 0.0, 5.0)

        assert len(scheduler) == 1
        assert scheduler.peek().time == 6.0

    def test_time_regression(self):
        """Test advancing backwards raises."""
        with pytest.raises(TimeRegressionError):
            event_driven_advance(SpikeScheduler(), VesicleConfig(), 5.0, 4.0)

    def test_aging_is_exact(self):
        """Test total lifetime reduction equals the window length for random spike trains."""
        rng = np.random.default_rng(0)
        for _ in range(20):
            times = np.sort(rng.uniform(0.0, 50.0, size=rng.integers(0, 40)))
            scheduler = SpikeScheduler(SpikeEvent(float(t), int(rng.integers(0, 5))) for t in times)
            vesicles = VesicleConfig([make_vesicle(0, lifetime=100.0)])
            for start, stop in [(0.0, 12.5), (12.5, 31.0), (31.0, 50.0)]:
                event_driven_advance(scheduler, vesicles, start, stop)

            assert vesicles.vesicles[0].lifetime == 50.0

    def test_matches_clock_driven_reference(self):
        """Test lifetimes at spike times agree with per-step dt decrements over 100 random trains."""
        rng = np.random.default_rng(1)
        for _ in range(100):
            lifetimes = rng.uniform(0.5, 20.0, size=6)
            births = rng.integers(0, 3, size=6).astype(float)
            vesicles = [make_vesicle(i, lifetime=float(tau), born_at=float(b)) for i, (tau, b) in enumerate(zip(lifetimes, births))]
            spike_times = sorted({float(t) for t in rng.integers(3, 25, size=rng.integers(1, 12))})
            reference = dense_lifetime_reference(vesicles, spike_times, dt=1.0, steps=25)

            observed = {}
            population = VesicleConfig(vesicles)

            def snapshot(time, _batch):
                observed[time] = {v.id: v.lifetime for v in population}

            scheduler = SpikeScheduler(SpikeEvent(t, int(rng.integers(0, 5))) for t in spike_times)
            event_driven_advance(scheduler, population, 3.0, 25.0, on_event=snapshot)

            assert sorted(observed) == sorted(reference)
            for time, alive in reference.items():
                assert sorted(observed[time]) == sorted(alive)
                for vesicle_id, lifetime in alive.items():
                    assert observed[time][vesicle_id] == pytest.approx(lifetime, abs=1e-9)


class TestRunSnn:
    """Test cases for full spiking runs."""

    def test_deterministic(self, config_factory):
        """Test one seed reproduces spikes, weights and the audit."""
        config = spiking_config(config_factory)
        first = run_snn(config, seed=3, steps=40)
        second = run_snn(config, seed=3, steps=40)

        assert first.spikes
        assert first.spikes == second.spikes
        assert first.weights == second.weights
        assert first.audit == second.audit

    def test_zero_steps(self, config_factory):
        """Test steps=0 yields empty outputs."""
        result = run_snn(spiking_config(config_factory), seed=0, steps=0)

        assert (result.spikes, result.weights, result.audit, result.kernel_evaluations) == ([], [], [], 0)

    def test_kernels_only_at_spike_times(self, config_factory):
        """Test one kernel evaluation per distinct spike time."""
        result = run_snn(spiking_config(config_factory), seed=5, steps=60)

        assert result.kernel_evaluations == len({time for time, _ in result.spikes})

    @pytest.mark.parametrize("plasticity", ["three_factor", "generic"])
    def test_gating_soundness(self, config_factory, plasticity):
        """Test every nonzero weight change had a vesicle in the synapse neighborhood."""
        config = spiking_config(config_factory, plasticity=plasticity, learning_rate=0.1)
        result = run_snn(config, seed=2, steps=80)

        assert any(delta != 0 for *_, delta, _ in result.audit)
        for time, pre, post, delta, present in result.audit:
            if delta != 0:
                assert present, (time, pre, post)

    def test_weight_rows_per_step(self, config_factory):
        """Test one weight row per synapse per step."""
        result = run_snn(spiking_config(config_factory), seed=0, steps=10)
        per_step = {}
        for time, *_ in result.weights:
            per_step[time] = per_step.get(time, 0) + 1

        assert sorted(per_step) == [float(k) for k in range(10)]
        assert len(set(per_step.values())) == 1
        assert len(result.vesicle_counts) == 10

    @pytest.mark.parametrize("seed", [2, 3, 4])
    def test_gating_soundness_with_absorbers(self, config_factory, seed):
        """Test weight changes caused by vesicles absorbed on docking are audited as present."""
        config = spiking_config(
            config_factory, kernels={"absorber_nodes": [0, 1, 2]}, plasticity="generic", learning_rate=0.1
        )
        result = run_snn(config, seed=seed, steps=80)

        for time, pre, post, delta, present in result.audit:
            if delta != 0:
                assert present, (time, pre, post, delta)

    @pytest.mark.parametrize("plasticity", ["three_factor", "generic"])
    def test_weights_frozen_without_vesicles(self, config_factory, plasticity):
        """Test no emissions keep every weight at its initial value over 10^4 steps."""
        config = spiking_config(
            config_factory,
            kernels={"max_emit_per_node": 0},
            plasticity=plasticity,
            learning_rate=0.1,
            a_pre=0.0,
            a_post=0.0,
        )
        result = run_snn(config, seed=1, steps=10_000)

        assert result.spikes
        assert max(result.vesicle_counts) == 0
        assert {weight for *_, weight in result.weights} == {config.snn.initial_weight}
        assert all(delta == 0 for *_, delta, _ in result.audit)
