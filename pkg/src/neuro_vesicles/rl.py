"""
Policy-controlled vesicles trained with REINFORCE.

A factored policy replaces the kernels' samplers: per-node emission
Bernoullis, per-vesicle move categoricals over migration neighbors, per-vesicle
dock Bernoullis and a per-dock categorical over subsets of the enabled release
operators. Score functions are computed in closed form.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
from numpy.random import Generator
from scipy.special import expit, logsumexp

from .kernels import EmissionEvent
from .models import ExperimentConfig
from .release import ReleaseOp, enabled_ops
from .rng import Phase, stream
from .simulation import CoupledSimulator, VesicleController
from .vesicles import Vesicle, VesicleConfig

logger = logging.getLogger(__name__)

EMIT, MOVE, DOCK, RELEASE = "emit", "move", "dock", "release"
HEAD_CODES = {EMIT: 0, MOVE: 1, DOCK: 2, RELEASE: 3}


def reward(loss_value: float, cfg: VesicleConfig, omega_coeff: float) -> float:
    """r = -loss - omega_coeff * N_t."""
    return -float(loss_value) - omega_coeff * len(cfg)


class PolicyParams:
    """
    Named parameter arrays of the factored policy.

    A shared tanh feature map embeds every node's state row; the heads read
    the embeddings.
    """

    def __init__(self, arrays: Dict[str, np.ndarray]):
        self.arrays = arrays
        self.last_update_norm = 0.0

    @classmethod
    def initialize(
        cls, input_dim: int, hidden_dim: int, num_types: int, num_subsets: int, seed: int, scale: float = 0.1
    ) -> "PolicyParams":
        rng = stream(seed, Phase.POLICY)
        return cls(
            {
                "shared_w": rng.uniform(-scale, scale, (hidden_dim, input_dim)),
                "shared_b": np.zeros(hidden_dim),
                "emit_w": rng.uniform(-scale, scale, (num_types, hidden_dim)),
                "emit_b": np.zeros(num_types),
                "move_w": rng.uniform(-scale, scale, (num_types, hidden_dim)),
                "dock_w": rng.uniform(-scale, scale, (num_types, hidden_dim)),
                "dock_b": np.zeros(num_types),
                "release_w": rng.uniform(-scale, scale, (num_subsets, hidden_dim)),
                "release_b": np.zeros(num_subsets),
            }
        )

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def embed(self, states: np.ndarray) -> np.ndarray:
        """Node embeddings tanh(X W^T + b), one row per node."""
        return np.tanh(states @ self.arrays["shared_w"].T + self.arrays["shared_b"])

    def zeros_like(self) -> Dict[str, np.ndarray]:
        return {name: np.zeros_like(array) for name, array in self.arrays.items()}

    def copy(self) -> "PolicyParams":
        return PolicyParams({name: array.copy() for name, array in self.arrays.items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(array)) for array in self.arrays.values())


@dataclass(frozen=True)
class Decision:
    """
    One sampled head output.

    Attributes:
        head: emit, move, dock or release
        node: Node whose embedding feeds the head
        type_id: Vesicle type selecting the head row
        choice: Bernoulli outcome or categorical index
        candidates: Move targets (move head only)
        entity: Vesicle id, or node * K + type for emissions
    """
    head: str
    node: int
    type_id: int
    choice: int
    candidates: Tuple[int, ...] = ()
    entity: int = 0


def _bernoulli_log_prob(logit: float, taken: int) -> float:
    return -float(np.logaddexp(0.0, -logit)) if taken else -float(np.logaddexp(0.0, logit))


def _head_logits(policy: PolicyParams, embeddings: np.ndarray, decision: Decision) -> np.ndarray:
    z = embeddings[decision.node]
    if decision.head == EMIT:
        return np.array([policy["emit_w"][decision.type_id] @ z + policy["emit_b"][decision.type_id]])
    if decision.head == DOCK:
        return np.array([policy["dock_w"][decision.type_id] @ z + policy["dock_b"][decision.type_id]])
    if decision.head == MOVE:
        return embeddings[list(decision.candidates)] @ policy["move_w"][decision.type_id]
    return policy["release_w"] @ z + policy["release_b"]


def action_log_prob(policy: PolicyParams, embeddings: np.ndarray, decision: Decision) -> float:
    """log pi(decision | state); used both when sampling and on replay."""
    logits = _head_logits(policy, embeddings, decision)
    if decision.head in (EMIT, DOCK):
        return _bernoulli_log_prob(float(logits[0]), decision.choice)
    return float(logits[decision.choice] - logsumexp(logits))


def action_score(
    policy: PolicyParams, states: np.ndarray, decisions: Sequence[Decision]
) -> Dict[str, np.ndarray]:
    """
    Closed-form gradient of sum_d log pi(d | states) with respect to every parameter array.

    Args:
        states: Policy input rows, one per node
        decisions: Decisions sampled from those states
    """
    grads = policy.zeros_like()
    embeddings = policy.embed(states)
    d_embed = np.zeros_like(embeddings)
    for decision in decisions:
        logits = _head_logits(policy, embeddings, decision)
        z = embeddings[decision.node]
        k = decision.type_id
        if decision.head in (EMIT, DOCK):
            g = decision.choice - float(expit(logits[0]))
            prefix = "emit" if decision.head == EMIT else "dock"
            grads[f"{prefix}_w"][k] += g * z
            grads[f"{prefix}_b"][k] += g
            d_embed[decision.node] += g * policy[f"{prefix}_w"][k]
            continue
        probs = np.exp(logits - logsumexp(logits))
        g = -probs
        g[decision.choice] += 1.0
        if decision.head == MOVE:
            candidates = list(decision.candidates)
            grads["move_w"][k] += g @ embeddings[candidates]
            for weight, node in zip(g, candidates):
                d_embed[node] += weight * policy["move_w"][k]
        else:
            grads["release_w"] += np.outer(g, z)
            grads["release_b"] += g
            d_embed[decision.node] += policy["release_w"].T @ g
    d_pre = d_embed * (1.0 - embeddings ** 2)
    grads["shared_w"] += d_pre.T @ states
    grads["shared_b"] += d_pre.sum(axis=0)
    return grads


def _sample_bernoulli(logit: float, rng: Generator) -> int:
    return int(float(rng.random()) < float(expit(logit)))


def _sample_categorical(logits: np.ndarray, rng: Generator) -> int:
    probs = np.exp(logits - logsumexp(logits))
    cdf = np.cumsum(probs)
    index = int(np.searchsorted(cdf, float(rng.random()) * cdf[-1], side="right"))
    return min(index, len(probs) - 1)


def sample_decision(
    policy: PolicyParams, embeddings: np.ndarray, template: Decision, rng: Generator
) -> Tuple[Decision, float]:
    """Fill in the choice of a decision template and return it with its log-probability."""
    logits = _head_logits(policy, embeddings, template)
    if template.head in (EMIT, DOCK):
        choice = _sample_bernoulli(float(logits[0]), rng)
    else:
        choice = _sample_categorical(logits, rng)
    decision = Decision(template.head, template.node, template.type_id, choice, template.candidates, template.entity)
    return decision, action_log_prob(policy, embeddings, decision)


def subset_ops(index: int, ops: Sequence[ReleaseOp]) -> FrozenSet[ReleaseOp]:
    """Operator subset encoded by the bits of `index`."""
    return frozenset(op for bit, op in enumerate(ops) if index >> bit & 1)


def policy_states(features: np.ndarray, cfg: VesicleConfig, num_types: int) -> np.ndarray:
    """Per-node policy input: node features followed by per-type vesicle counts."""
    counts = cfg.counts_per_node_type(features.shape[0], num_types).astype(float)
    return np.hstack([features, counts])


def sample_actions(
    policy: PolicyParams,
    states: np.ndarray,
    rng: Generator,
    vesicles: Sequence[Vesicle] = (),
    migration_mask: Optional[np.ndarray] = None,
    num_ops: int = 0,
) -> Tuple[List[Decision], float]:
    """
    Sample every head once: emissions per (node, type), then move, dock and
    release for each given vesicle (release only when it docks).

    Returns:
        (decisions, total log-probability)
    """
    embeddings = policy.embed(states)
    num_nodes = states.shape[0]
    num_types = policy["emit_w"].shape[0]
    decisions, total = [], 0.0
    for node in range(num_nodes):
        for k in range(num_types):
            decision, log_prob = sample_decision(policy, embeddings, Decision(EMIT, node, k, 0), rng)
            decisions.append(decision)
            total += log_prob
    for vesicle in vesicles:
        location = vesicle.location
        if migration_mask is not None:
            candidates = tuple(int(n) for n in np.flatnonzero(migration_mask[location]))
            decision, log_prob = sample_decision(
                policy, embeddings, Decision(MOVE, location, vesicle.type_id, 0, candidates, vesicle.id), rng
            )
            decisions.append(decision)
            total += log_prob
            location = candidates[decision.choice]
        decision, log_prob = sample_decision(
            policy, embeddings, Decision(DOCK, location, vesicle.type_id, 0, (), vesicle.id), rng
        )
        decisions.append(decision)
        total += log_prob
        if decision.choice and num_ops:
            decision, log_prob = sample_decision(
                policy, embeddings, Decision(RELEASE, location, vesicle.type_id, 0, (), vesicle.id), rng
            )
            decisions.append(decision)
            total += log_prob
    return decisions, total


@dataclass
class TrajectoryStep:
    """State rows, sampled decisions, their total log-probability and the reward."""
    states: Optional[np.ndarray]
    decisions: List[Decision] = field(default_factory=list)
    log_prob: float = 0.0
    reward: float = 0.0


@dataclass
class Trajectory:
    """One episode of policy-controlled simulation."""
    steps: List[TrajectoryStep] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def rewards(self) -> List[float]:
        return [step.reward for step in self.steps]


def compute_returns(rewards: Sequence[float], gamma: float) -> np.ndarray:
    """R_t = r_t + gamma * R_{t+1}, zero beyond the horizon."""
    returns = np.zeros(len(rewards))
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * running
        returns[t] = running
    return returns


def replay_log_prob(policy: PolicyParams, step: TrajectoryStep) -> float:
    """Recompute a step's log-probability from its stored states and decisions."""
    if step.states is None:
        return 0.0
    embeddings = policy.embed(step.states)
    total = 0.0
    for decision in step.decisions:
        total += action_log_prob(policy, embeddings, decision)
    return total


class ReturnBaseline:
    """Exponential running mean of returns, one value per time index."""

    def __init__(self, decay: float = 0.99):
        self.decay = decay
        self.values: Dict[int, float] = {}

    def value(self, t: int) -> float:
        return self.values.get(t, 0.0)

    def update(self, t: int, observed: float) -> None:
        self.values[t] = self.decay * self.value(t) + (1.0 - self.decay) * observed


def reinforce_update(
    policy: PolicyParams,
    trajectories: Sequence[Trajectory],
    gamma: float,
    learning_rate: float,
    baseline: Optional[ReturnBaseline] = None,
) -> PolicyParams:
    """
    phi <- phi + lr * sum_t grad log pi(a_t | s_t) * (R_t - b_t).

    The baseline is read before it absorbs this batch's returns. The norm of
    the applied step is stored on `policy.last_update_norm`.
    """
    baseline = baseline if baseline is not None else ReturnBaseline()
    total = policy.zeros_like()
    observed: List[Tuple[int, float]] = []
    for trajectory in trajectories:
        returns = compute_returns(trajectory.rewards, gamma)
        for t, (step, ret) in enumerate(zip(trajectory.steps, returns)):
            advantage = ret - baseline.value(t)
            observed.append((t, float(ret)))
            if step.states is None or not step.decisions or advantage == 0:
                continue
            score = action_score(policy, step.states, step.decisions)
            for name in total:
                total[name] += advantage * score[name]
    squared = 0.0
    for name, grad in total.items():
        policy.arrays[name] = policy.arrays[name] + learning_rate * grad
        squared += float(np.sum((learning_rate * grad) ** 2))
    policy.last_update_norm = float(np.sqrt(squared))
    for t, ret in observed:
        baseline.update(t, ret)
    return policy


class PolicyController(VesicleController):
    """
    Delegates every vesicle decision of a `CoupledSimulator` to the policy and
    records it with its log-probability.
    """

    def __init__(self, policy: PolicyParams, seed: int, episode: int = 0):
        self.policy = policy
        self.seed = seed
        self.episode = episode
        self.current = TrajectoryStep(states=None)
        self._embeddings: Optional[np.ndarray] = None
        self._mask: Optional[np.ndarray] = None

    def start(self) -> None:
        self.current = TrajectoryStep(states=None)

    def _record(self, sim: CoupledSimulator, step: int, template: Decision) -> Decision:
        rng = stream(self.seed, Phase.POLICY, self.episode, step, HEAD_CODES[template.head], template.entity)
        decision, log_prob = sample_decision(self.policy, self._embeddings, template, rng)
        self.current.decisions.append(decision)
        self.current.log_prob += log_prob
        return decision

    def begin_step(self, sim: CoupledSimulator, step: int, features: np.ndarray) -> None:
        states = policy_states(features, sim.vesicles, sim.registry.num_types)
        self.current.states = states
        self._embeddings = self.policy.embed(states)
        if self._mask is None:
            self._mask = sim.graph.migration_mask()

    def emissions(self, sim: CoupledSimulator, step: int, features: np.ndarray) -> List[EmissionEvent]:
        events = []
        num_types = sim.registry.num_types
        for node in range(sim.graph.num_nodes):
            for k in range(num_types):
                decision = self._record(sim, step, Decision(EMIT, node, k, 0, (), node * num_types + k))
                logit = _head_logits(self.policy, self._embeddings, decision)[0]
                events.append(EmissionEvent(node, k, decision.choice, float(expit(logit))))
        return events

    def move(self, sim: CoupledSimulator, step: int, vesicle: Vesicle, features: np.ndarray) -> int:
        candidates = tuple(int(n) for n in np.flatnonzero(self._mask[vesicle.location]))
        decision = self._record(
            sim, step, Decision(MOVE, vesicle.location, vesicle.type_id, 0, candidates, vesicle.id)
        )
        return candidates[decision.choice]

    def dock(self, sim: CoupledSimulator, step: int, vesicle: Vesicle, features: np.ndarray) -> bool:
        decision = self._record(sim, step, Decision(DOCK, vesicle.location, vesicle.type_id, 0, (), vesicle.id))
        return bool(decision.choice)

    def release_ops(self, sim: CoupledSimulator, step: int, vesicle: Vesicle) -> FrozenSet[ReleaseOp]:
        if not sim.ops:
            return frozenset()
        decision = self._record(sim, step, Decision(RELEASE, vesicle.location, vesicle.type_id, 0, (), vesicle.id))
        return subset_ops(decision.choice, sim.ops)


def build_policy(config: ExperimentConfig, seed: int) -> PolicyParams:
    """Policy sized for a config's graph, types and enabled release operators."""
    num_types = config.vesicles.num_types
    input_dim = 4 + num_types  # [mean, std, grad_norm, meta] + per-type counts
    num_ops = len(enabled_ops(config.release))
    return PolicyParams.initialize(input_dim, config.rl.hidden_dim, num_types, 2 ** num_ops, seed)


def rl_episode(
    config: ExperimentConfig,
    policy: PolicyParams,
    horizon: int,
    seed: int,
    episode: int = 0,
) -> Trajectory:
    """
    Run the coupled simulation for `horizon` steps with the policy in control.

    Every episode starts from the freshly initialized network of `seed`.
    """
    controller = PolicyController(policy, seed, episode)
    sim = CoupledSimulator(config, seed, controller)
    trajectory = Trajectory()
    for _ in range(horizon):
        controller.start()
        report = sim.step()
        controller.current.reward = reward(report.loss_post, sim.vesicles, config.rl.omega_coeff)
        trajectory.steps.append(controller.current)
    return trajectory


@dataclass
class RlRun:
    """Per-episode returns and baseline values."""
    returns: List[float]
    baselines: List[float]
    policy: PolicyParams


def run_rl(config: ExperimentConfig, seed: Optional[int] = None) -> RlRun:
    """Train the policy for `rl.episodes` episodes, one REINFORCE update per episode."""
    seed = config.run.seed if seed is None else seed
    spec = config.rl
    policy = build_policy(config, seed)
    baseline = ReturnBaseline(spec.baseline_decay)
    returns, baselines = [], []
    logger.info("RL run: seed=%d episodes=%d horizon=%d", seed, spec.episodes, spec.horizon)
    for episode in range(spec.episodes):
        trajectory = rl_episode(config, policy, spec.horizon, seed, episode)
        episode_return = float(compute_returns(trajectory.rewards, spec.gamma)[0]) if len(trajectory) else 0.0
        baselines.append(baseline.value(0))
        returns.append(episode_return)
        reinforce_update(policy, [trajectory], spec.gamma, spec.learning_rate, baseline)
        logger.debug("Episode %d return %.6f", episode, episode_return)
    return RlRun(returns, baselines, policy)


# Single-step bandit on the release head: one node, a constant zero state row.
BANDIT_STATES = np.zeros((1, 1))


def bandit_policy(num_arms: int = 2, seed: int = 0) -> PolicyParams:
    """Policy whose release head is a softmax over the arms; zero weights keep every other array at zero."""
    return PolicyParams.initialize(input_dim=1, hidden_dim=1, num_types=1, num_subsets=num_arms, seed=seed, scale=0.0)


def arm_probabilities(policy: PolicyParams) -> np.ndarray:
    """pi(arm) of every arm of a bandit policy."""
    embeddings = policy.embed(BANDIT_STATES)
    arms = policy["release_b"].shape[0]
    return np.exp([action_log_prob(policy, embeddings, Decision(RELEASE, 0, 0, arm)) for arm in range(arms)])


def bandit_trajectory(policy: PolicyParams, rewards: Sequence[float], rng: Generator) -> Trajectory:
    """One pull: a single release decision rewarded by its arm."""
    decision, log_prob = sample_decision(policy, policy.embed(BANDIT_STATES), Decision(RELEASE, 0, 0, 0), rng)
    return Trajectory([TrajectoryStep(BANDIT_STATES, [decision], log_prob, float(rewards[decision.choice]))])


def bandit_gradient_estimate(
    policy: PolicyParams, rewards: Sequence[float], episodes: int, rng: Generator, baseline: float = 0.0
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Monte-Carlo REINFORCE gradient of the bandit return with respect to the arm logits.

    Arms are drawn from the policy; each pull contributes its `action_score`
    times (reward - baseline).

    Returns:
        (mean gradient, standard error per component)
    """
    rewards = np.asarray(rewards, dtype=float)
    probs = arm_probabilities(policy)
    # the score of a pull depends only on the arm
    scores = np.stack(
        [action_score(policy, BANDIT_STATES, [Decision(RELEASE, 0, 0, arm)])["release_b"] for arm in range(len(probs))]
    )
    arms = rng.choice(len(probs), size=episodes, p=probs / probs.sum())
    samples = scores[arms] * (rewards[arms] - baseline)[:, None]
    return samples.mean(axis=0), samples.std(axis=0, ddof=1) / np.sqrt(episodes)


def train_bandit(
    rewards: Sequence[float], updates: int, learning_rate: float, seed: int, baseline_decay: float = 0.99
) -> PolicyParams:
    """
    Train a bandit policy with one pull and one `reinforce_update` per update.

    Returns:
        The trained policy (see `arm_probabilities`)
    """
    policy = bandit_policy(len(rewards), seed)
    baseline = ReturnBaseline(baseline_decay)
    for update in range(updates):
        trajectory = bandit_trajectory(policy, rewards, stream(seed, Phase.POLICY, update))
        reinforce_update(policy, [trajectory], 1.0, learning_rate, baseline)
    return policy
