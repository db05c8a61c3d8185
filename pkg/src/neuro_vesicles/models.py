"""
Experiment configuration models using Pydantic.

This module defines the validated configuration tree for a Neuro-Vesicle
experiment: the graph substrate, the base network, vesicle types, kernel and
release settings, and the density, spiking and policy overlays.
"""

from enum import Enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class RunMode(str, Enum):
    """Simulation modes dispatched by the CLI."""
    PARTICLE = "particle"
    DENSITY = "density"
    CONSISTENCY = "consistency"
    SNN = "snn"
    RL = "rl"


class DataKind(str, Enum):
    """Synthetic regression tasks feeding the base network."""
    PLANTED = "planted"
    SINE = "sine"


class EmissionModel(str, Enum):
    """Count distribution for new vesicles per (node, type)."""
    POISSON = "poisson"
    BERNOULLI = "bernoulli"


class LifetimeDistribution(str, Enum):
    """Distribution of a freshly emitted vesicle's lifetime."""
    EXPONENTIAL = "exponential"
    FIXED = "fixed"


class PlasticityRule(str, Enum):
    """Synaptic update rule used by the spiking overlay."""
    THREE_FACTOR = "three_factor"
    GENERIC = "generic"


class ParticleEngine(str, Enum):
    """Particle process the consistency check compares against."""
    COUNTS = "counts"
    SIMULATOR = "simulator"


class _Section(BaseModel):
    """Base for all config sections: unknown keys are rejected."""
    model_config = ConfigDict(extra="forbid", use_enum_values=False)


class GraphSpec(_Section):
    """
    Directed computational graph G=(V,E).

    Attributes:
        num_nodes: Number of nodes |V|
        edges: Ordered (source, target) pairs
        layer_of: Base-network layer index of every node (defaults to min(node, L))
        allow_self_loops: Whether (u, u) edges are accepted
    """
    num_nodes: int = Field(..., ge=1, description="Number of graph nodes")
    edges: List[Tuple[int, int]] = Field(default_factory=list, description="Directed edges")
    layer_of: Optional[List[int]] = Field(default=None, description="Layer index per node")
    allow_self_loops: bool = Field(default=False, description="Accept (u, u) edges")

    @field_validator("edges")
    @classmethod
    def validate_unique_edges(cls, v: List[Tuple[int, int]]) -> List[Tuple[int, int]]:
        """Reject duplicated edges and keep a sorted canonical order."""
        if len(v) != len(set(v)):
            raise ValueError("Duplicate edges found")
        return sorted(v)

    @model_validator(mode="after")
    def validate_endpoints(self) -> "GraphSpec":
        """Ensure every edge endpoint and layer entry refers to an existing node."""
        for source, target in self.edges:
            if not (0 <= source < self.num_nodes and 0 <= target < self.num_nodes):
                raise ValueError(f"Edge ({source}, {target}) references a node outside [0, {self.num_nodes})")
            if source == target and not self.allow_self_loops:
                raise ValueError(f"Self-loop ({source}, {target}) requires allow_self_loops")
        if self.layer_of is not None and len(self.layer_of) != self.num_nodes:
            raise ValueError("layer_of must list exactly one layer per node")
        return self


class NetworkSpec(_Section):
    """Layered tanh-affine base network."""
    widths: List[int] = Field(..., min_length=2, description="Layer widths d_0..d_L")
    init_scale: Optional[float] = Field(default=None, gt=0, description="Uniform init half-width; None = 1/sqrt(d_in)")
    learning_rate: float = Field(default=0.05, gt=0, description="Plain SGD step size")
    meta_window: int = Field(default=16, ge=1, description="Steps in the running-loss meta state")

    @field_validator("widths")
    @classmethod
    def validate_widths(cls, v: List[int]) -> List[int]:
        """Every layer needs at least one unit."""
        if any(width < 1 for width in v):
            raise ValueError("Layer widths must be positive")
        return v

    @property
    def num_layers(self) -> int:
        """Number of parameterized layers L."""
        return len(self.widths) - 1


class DataSpec(_Section):
    """Synthetic per-step regression batches."""
    kind: DataKind = Field(default=DataKind.PLANTED, description="Target generator")
    noise_std: float = Field(default=0.0, ge=0, description="Gaussian target noise")


class VesicleTypeSpec(_Section):
    """Hyperparameters of one vesicle type kappa."""
    lifetime_mean: float = Field(default=3.0, gt=0, description="Mean of P_tau")
    lifetime_dist: LifetimeDistribution = Field(default=LifetimeDistribution.EXPONENTIAL)
    decay_rate: float = Field(default=0.1, ge=0, le=1, description="Density-mode decay delta_kappa")
    temperature: float = Field(default=1.0, description="Migration score temperature gamma_kappa")
    param_step: float = Field(default=0.01, description="Rank-one release step eta_kappa")
    emit_gain: float = Field(default=1.0, description="Init scale of the emission vector u_kappa")
    dock_gain: float = Field(default=1.0, description="Init scale of the docking vector w_kappa")
    content_std: float = Field(default=1.0, gt=0, description="Initial std of emitted content")
    mod_gain: float = Field(default=1.0, description="Init scale of the SNN modulation vector a_kappa")

    @model_validator(mode="after")
    def validate_fixed_lifetime(self) -> "VesicleTypeSpec":
        """Fixed lifetimes obey the same 0.5-step floor as sampled ones."""
        if self.lifetime_dist == LifetimeDistribution.FIXED and self.lifetime_mean < 0.5:
            raise ValueError("A fixed lifetime_mean must be at least 0.5")
        return self


class VesicleSpec(_Section):
    """Vesicle population settings shared by every type."""
    content_dim: int = Field(default=4, ge=1, description="Content width d_c")
    num_types: int = Field(default=1, ge=1, description="Number of vesicle types K")
    emit_dim: int = Field(default=4, ge=1, description="Emission encoder width d_e")
    dock_dim: int = Field(default=4, ge=1, description="Docking encoder width")
    types: List[VesicleTypeSpec] = Field(default_factory=list, description="Per-type settings")

    @model_validator(mode="after")
    def fill_types(self) -> "VesicleSpec":
        """Expand missing per-type entries to explicit defaults."""
        if not self.types:
            self.types = [VesicleTypeSpec() for _ in range(self.num_types)]
        if len(self.types) != self.num_types:
            raise ValueError(f"types lists {len(self.types)} entries but num_types is {self.num_types}")
        return self


class KernelSpec(_Section):
    """Emission, migration and decay kernel settings."""
    max_emit_per_node: int = Field(default=4, ge=0, description="Clamp on emitted count per (node, type)")
    emission_model: EmissionModel = Field(default=EmissionModel.POISSON)
    decay_noise_std: float = Field(default=0.0, ge=0, description="Std of epsilon_noise")
    absorber_nodes: List[int] = Field(default_factory=list, description="Docking here removes the vesicle")
    dt: float = Field(default=1.0, gt=0, description="Lifetime decrement per step")
    geometric_decay: bool = Field(
        default=False, description="Remove each vesicle with probability decay_rate per step instead of counting down"
    )


class ReleaseSpec(_Section):
    """Release operator switches and memory settings."""
    activation: bool = Field(default=True, description="Enable FiLM activation release")
    parameter: bool = Field(default=True, description="Enable rank-one parameter release")
    rule: bool = Field(default=True, description="Enable gradient-rule release")
    memory: bool = Field(default=True, description="Enable external-memory write")
    memory_dim: int = Field(default=2, ge=1, description="Memory slot width d_m")
    rho_write: float = Field(default=0.1, gt=0, le=1, description="EMA write rate")


class DensitySpec(_Section):
    """Density relaxation and particle consistency settings."""
    frozen_emission: Optional[List[List[float]]] = Field(
        default=None, description="Fixed |V|xK emission intensities; None = network-driven"
    )
    literal_vector_form: bool = Field(default=False, description="Transport pre-decay mass (clamped)")
    fold_dock_prob: bool = Field(default=False, description="Scale expected release by mean p_dock")
    horizon: int = Field(default=20, ge=0, description="Consistency-check horizon")
    n_runs: int = Field(default=10000, ge=2, description="Particle runs in the consistency check")
    particle_engine: ParticleEngine = Field(
        default=ParticleEngine.COUNTS,
        description="counts: vectorized count process; simulator: kernel-driven particle runs",
    )

    @field_validator("frozen_emission")
    @classmethod
    def validate_frozen(cls, v: Optional[List[List[float]]]) -> Optional[List[List[float]]]:
        """Intensities are non-negative rates."""
        if v is not None and any(value < 0 for row in v for value in row):
            raise ValueError("Emission intensities must be non-negative")
        return v


class SnnSpec(_Section):
    """Spiking overlay settings (time units are simulation time)."""
    num_neurons: int = Field(default=8, ge=2)
    connection_prob: float = Field(default=0.3, ge=0, le=1)
    initial_weight: float = Field(default=0.5)
    dt: float = Field(default=1.0, gt=0)
    tau_m: float = Field(default=10.0, gt=0, description="Membrane time constant")
    tau_e: float = Field(default=5.0, gt=0, description="Eligibility-trace time constant")
    threshold: float = Field(default=1.0, gt=0)
    refractory: float = Field(default=2.0, ge=0)
    a_plus: float = Field(default=1.0, description="Pre-spike STDP impulse")
    a_minus: float = Field(default=1.0, description="Post-only STDP impulse")
    neighborhood_radius: int = Field(default=1, ge=0)
    spike_window: float = Field(default=5.0, gt=0, description="Local window for event-time features")
    learning_rate: float = Field(default=0.01, description="Three-factor eta")
    input_rate: float = Field(default=0.2, ge=0, le=1, description="External spike probability per step")
    input_current: float = Field(default=1.5, description="Current injected by an external spike")
    plasticity: PlasticityRule = Field(default=PlasticityRule.THREE_FACTOR)
    a_pre: float = Field(default=0.0, description="Generic rule pre-term amplitude")
    a_post: float = Field(default=0.0, description="Generic rule post-term amplitude")


class RlSpec(_Section):
    """Policy-gradient overlay settings."""
    gamma: float = Field(default=0.99, gt=0, le=1)
    learning_rate: float = Field(default=0.01, gt=0)
    omega_coeff: float = Field(default=0.01, ge=0, description="Vesicle-count penalty")
    horizon: int = Field(default=20, ge=0)
    episodes: int = Field(default=10, ge=0)
    hidden_dim: int = Field(default=8, ge=1)
    baseline_decay: float = Field(default=0.99, ge=0, lt=1)


class RunSpec(_Section):
    """Run-level settings; CLI flags override these."""
    seed: int = Field(default=0, ge=0)
    steps: int = Field(default=100, ge=0)
    mode: RunMode = Field(default=RunMode.PARTICLE)
    vesicle_every: int = Field(default=1, ge=1, description="Vesicle phases run every k-th step")
    output_dir: str = Field(default="runs/out")
    emit_plots: bool = Field(default=False)


class ExperimentConfig(_Section):
    """
    Complete experiment configuration.

    Attributes:
        graph: Graph substrate
        network: Base network
        data: Synthetic batches
        vesicles: Vesicle population and per-type settings
        kernels: Stochastic kernel settings
        release: Release operators
        density: Density relaxation
        snn: Spiking overlay
        rl: Policy-gradient overlay
        run: Seed, steps, mode and outputs
    """
    graph: GraphSpec
    network: NetworkSpec
    data: DataSpec = Field(default_factory=DataSpec)
    vesicles: VesicleSpec = Field(default_factory=VesicleSpec)
    kernels: KernelSpec = Field(default_factory=KernelSpec)
    release: ReleaseSpec = Field(default_factory=ReleaseSpec)
    density: DensitySpec = Field(default_factory=DensitySpec)
    snn: SnnSpec = Field(default_factory=SnnSpec)
    rl: RlSpec = Field(default_factory=RlSpec)
    run: RunSpec = Field(default_factory=RunSpec)

    @model_validator(mode="after")
    def validate_cross_sections(self) -> "ExperimentConfig":
        """Check constraints that span several sections."""
        num_layers = self.network.num_layers
        if self.graph.layer_of is None:
            self.graph.layer_of = [min(node, num_layers) for node in range(self.graph.num_nodes)]
        for node, layer in enumerate(self.graph.layer_of):
            if not 0 <= layer <= num_layers:
                raise ValueError(f"graph.layer_of[{node}]={layer} is outside [0, {num_layers}]")
        for source, target in self.graph.edges:
            if self.graph.layer_of[source] > self.graph.layer_of[target]:
                raise ValueError(f"Edge ({source}, {target}) runs against the layer order")
        # in snn mode vesicles live on the per-neuron graph
        if self.run.mode == RunMode.SNN:
            node_count, node_kind = self.snn.num_neurons, "neuron"
        else:
            node_count, node_kind = self.graph.num_nodes, "graph node"
        for node in self.kernels.absorber_nodes:
            if not 0 <= node < node_count:
                raise ValueError(f"kernels.absorber_nodes entry {node} is not a {node_kind}")
        frozen = self.density.frozen_emission
        if frozen is not None:
            if len(frozen) != self.graph.num_nodes or any(len(row) != self.vesicles.num_types for row in frozen):
                raise ValueError("density.frozen_emission must have shape num_nodes x num_types")
        return self

    @property
    def node_widths(self) -> List[int]:
        """Activation width seen at every graph node."""
        assert self.graph.layer_of is not None
        return [self.network.widths[layer] for layer in self.graph.layer_of]
