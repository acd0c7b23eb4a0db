"""Off-policy critic training with augmentation-combination gradients.

A discrete soft-greedy Q-learner stands in for a continuous-control
actor-critic: the TD target takes an exact max over the four grid
actions, actions are sampled from softmax(Q / temperature) during
training and greedily during evaluation, and only the critic is learned.

Per update, the same minibatch and the same (never augmented) TD
targets feed one loss per member of the augmentation combination; the
per-loss gradients are combined according to the configured aggregation
mode, uniform averaging being the known-problematic baseline that the
conflict-aware step is measured against.

Random streams (init, environment, exploration, batch sampling,
augmentation, damping) are spawned independently from the run seed, so
modes that draw from one stream leave the others untouched and runs are
reproducible end to end.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from . import augbox, pixelworld
from .diagnostics import MetricsLog, StepRecord
from .errors import StructuralError
from .gradkit import (
    AgreementMode,
    DampingDistribution,
    GradientSet,
    StepDiagnostics,
    WeightVector,
    cg2a_step,
    conflict_mask,
    gas_weights,
    pairwise_cosines,
    sample_damping,
    sgs_apply,
    weighted_combine,
)
from .gradtape import (
    ParamSet,
    QNetworkSpec,
    backward,
    critic_loss,
    init_params,
    q_forward,
    q_values,
)

NUM_ACTIONS = len(pixelworld.Action)


class Aggregation(enum.Enum):
    CG2A = "cg2a"
    NAIVE_AVERAGE = "naive_average"
    GAS_ONLY = "gas_only"
    SGS_ONLY = "sgs_only"
    SINGLE_AUG = "single_aug"
    NO_AUG = "no_aug"

    @classmethod
    def parse(cls, name: str) -> "Aggregation":
        for mode in cls:
            if mode.value == name:
                return mode
        raise StructuralError(f"unknown aggregation mode {name!r}")


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    done: bool


@dataclass
class Batch:
    obs: np.ndarray        # (B, C, H, W) float32 in [0, 1]
    actions: np.ndarray    # (B,) int64
    rewards: np.ndarray    # (B,) float64
    next_obs: np.ndarray   # (B, C, H, W) float32
    dones: np.ndarray      # (B,) bool


def _to_uint8(obs: np.ndarray) -> np.ndarray:
    if obs.dtype == np.uint8:
        return obs
    return np.rint(np.asarray(obs) * 255.0).astype(np.uint8)


class ReplayBuffer:
    """Uniform-sampling ring buffer; observations stored as uint8."""

    def __init__(self, capacity: int, obs_shape: tuple[int, int, int]):
        if capacity < 1:
            raise StructuralError("buffer capacity must be positive")
        self.capacity = capacity
        self._obs = np.zeros((capacity,) + obs_shape, dtype=np.uint8)
        self._next_obs = np.zeros((capacity,) + obs_shape, dtype=np.uint8)
        self._actions = np.zeros(capacity, dtype=np.int64)
        self._rewards = np.zeros(capacity, dtype=np.float64)
        self._dones = np.zeros(capacity, dtype=bool)
        self._cursor = 0
        self._size = 0

    @property
    def size(self) -> int:
        return self._size

    def add(self, transition: Transition):
        i = self._cursor
        self._obs[i] = _to_uint8(transition.obs)
        self._next_obs[i] = _to_uint8(transition.next_obs)
        self._actions[i] = transition.action
        self._rewards[i] = transition.reward
        self._dones[i] = transition.done
        self._cursor = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample_indices(self, rng: np.random.Generator, batch_size: int) -> np.ndarray:
        if self._size == 0:
            raise StructuralError("cannot sample from an empty buffer")
        return rng.integers(0, self._size, size=batch_size)

    def sample(self, rng: np.random.Generator, batch_size: int) -> Batch:
        idx = self.sample_indices(rng, batch_size)
        scale = np.float32(1.0 / 255.0)
        return Batch(
            obs=self._obs[idx].astype(np.float32) * scale,
            actions=self._actions[idx],
            rewards=self._rewards[idx],
            next_obs=self._next_obs[idx].astype(np.float32) * scale,
            dones=self._dones[idx],
        )


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 30_000
    warmup_steps: int = 500
    batch_size: int = 32
    buffer_capacity: int = 20_000
    discount: float = 0.9
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    target_sync_period: int = 500
    temperature_start: float = 1.0
    temperature_end: float = 0.2
    temperature_anneal_fraction: float = 0.5
    aggregation: Aggregation = Aggregation.CG2A
    agreement_mode: AgreementMode = AgreementMode.SIGN_SYMMETRIC
    damping: DampingDistribution = field(default_factory=DampingDistribution)
    combination: tuple[augbox.AugmentationSpec, ...] = field(
        default_factory=augbox.default_combination
    )
    distractor_seed: int = 7
    distractor_count: int = 64
    seed: int = 0
    variant: pixelworld.EnvVariant = pixelworld.EnvVariant.TRAIN
    render_size: int = pixelworld.DEFAULT_RENDER_SIZE
    conv_channels: tuple[int, ...] = (8, 16)
    kernel_size: int = 3
    stride: int = 2
    hidden_sizes: tuple[int, ...] = (64,)

    def __post_init__(self):
        if self.total_steps < 0 or self.warmup_steps < 0:
            raise StructuralError("step counts must be non-negative")
        if self.batch_size < 1 or self.buffer_capacity < 1:
            raise StructuralError("batch size and buffer capacity must be positive")
        if not 0.0 <= self.discount < 1.0:
            raise StructuralError(f"discount must lie in [0, 1), got {self.discount}")
        if self.learning_rate <= 0.0:
            raise StructuralError("learning rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise StructuralError(f"unknown optimizer {self.optimizer!r}")
        if self.target_sync_period < 1:
            raise StructuralError("target sync period must be positive")
        if self.temperature_start < 0 or self.temperature_end < 0:
            raise StructuralError("temperatures must be non-negative")
        if not 0.0 <= self.temperature_anneal_fraction <= 1.0:
            raise StructuralError("anneal fraction must lie in [0, 1]")
        if not self.combination or self.combination[0].kind != augbox.IDENTITY:
            raise StructuralError("combination must start with the identity")
        if self.distractor_count < 1:
            raise StructuralError("distractor count must be positive")

    def network_spec(self) -> QNetworkSpec:
        channels = 3 * pixelworld.FRAME_STACK
        return QNetworkSpec(
            input_shape=(channels, self.render_size, self.render_size),
            conv_channels=self.conv_channels,
            kernel_size=self.kernel_size,
            stride=self.stride,
            hidden_sizes=self.hidden_sizes,
            num_actions=NUM_ACTIONS,
        )

    def effective_combination(self) -> tuple[augbox.AugmentationSpec, ...]:
        """The combination actually trained on under this aggregation mode."""
        if self.aggregation is Aggregation.NO_AUG:
            return self.combination[:1]
        if self.aggregation is Aggregation.SINGLE_AUG:
            for spec in self.combination[1:]:
                return (self.combination[0], spec)
            return self.combination[:1]
        return self.combination


# ---------------------------------------------------------------------------
# update-step pieces


def td_targets(spec: QNetworkSpec, target_params: ParamSet, batch: Batch, discount: float) -> np.ndarray:
    """Bootstrap targets r + discount * (1 - done) * max_a Q_target(next, a).

    Successor observations are used exactly as stored: no augmentation
    touches them, and no gradient flows through the result.
    """
    best = q_values(spec, target_params, batch.next_obs).max(axis=1).astype(np.float64)
    return batch.rewards + discount * (~batch.dones) * best


def critic_gradient_set(
    spec: QNetworkSpec,
    params: ParamSet,
    batch: Batch,
    combination,
    bank: augbox.DistractorBank | None,
    rng: np.random.Generator,
    targets: np.ndarray,
) -> tuple[GradientSet, list[float]]:
    """One flat gradient per combination member, all against one target."""
    grads, losses = [], []
    for aug_spec in combination:
        aug_obs = augbox.batch_apply(batch.obs, aug_spec, bank, rng)
        q, tape = q_forward(spec, params, aug_obs)
        loss = critic_loss(q, batch.actions, targets)
        grads.append(backward(tape, loss))
        losses.append(float(loss.value))
    return GradientSet(grads), losses


@dataclass
class OptimizerState:
    kind: str
    count: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def init_optimizer(kind: str, param_count: int) -> OptimizerState:
    if kind == "adam":
        return OptimizerState("adam", 0, np.zeros(param_count), np.zeros(param_count))
    if kind == "sgd":
        return OptimizerState("sgd")
    raise StructuralError(f"unknown optimizer {kind!r}")


def optimizer_update(
    params: ParamSet, grad: np.ndarray, state: OptimizerState, learning_rate: float
) -> tuple[ParamSet, OptimizerState]:
    """Apply one SGD or Adam step; math in float64, stored dtype preserved."""
    flat = params.flatten().astype(np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != flat.shape:
        raise StructuralError(f"gradient length {grad.shape} != parameter count {flat.shape}")
    if state.kind == "sgd":
        new_flat = flat - learning_rate * grad
        new_state = state
    else:
        beta1, beta2, eps = 0.9, 0.999, 1e-8
        count = state.count + 1
        m = beta1 * state.m + (1 - beta1) * grad
        v = beta2 * state.v + (1 - beta2) * grad * grad
        m_hat = m / (1 - beta1**count)
        v_hat = v / (1 - beta2**count)
        new_flat = flat - learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        new_state = OptimizerState("adam", count, m, v)
    return params.unflatten(new_flat.astype(params.dtype)), new_state


def sync_target(params: ParamSet, target_params: ParamSet, step_count: int, period: int) -> ParamSet:
    """Hard-copy the online parameters every ``period`` steps."""
    if (step_count + 1) % period == 0:
        return params.copy()
    return target_params


def select_action(
    spec: QNetworkSpec,
    params: ParamSet,
    obs: np.ndarray,
    temperature: float,
    rng: np.random.Generator | None,
) -> int:
    """Sample from softmax(Q / temperature); temperature 0 is a pure argmax."""
    if temperature < 0:
        raise StructuralError("temperature must be non-negative")
    values = q_values(spec, params, obs[None])[0].astype(np.float64)
    if temperature == 0.0:
        return int(np.argmax(values))
    z = values / temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(values.size, p=p))


def _aggregate(
    gset: GradientSet,
    mode: Aggregation,
    agreement: AgreementMode,
    damping: DampingDistribution,
    rng: np.random.Generator,
) -> tuple[np.ndarray, StepDiagnostics]:
    """Combine a gradient set under one aggregation mode.

    Diagnostics (norms, cosines, conflict fraction) are always computed
    from the raw set so baseline runs record the same statistics the
    conflict-aware run does; weights and gamma reflect what was applied.
    """
    if mode is Aggregation.CG2A:
        return cg2a_step(gset, rng, agreement, damping)
    mask = conflict_mask(gset, agreement)
    if mode is Aggregation.SGS_ONLY:
        gamma = sample_damping(rng, damping)
        surged = sgs_apply(gset, mask, gamma)
    else:
        gamma = 1.0
        surged = gset
    if mode is Aggregation.GAS_ONLY:
        weights = gas_weights(gset)
    else:
        weights = WeightVector.uniform(gset.count)
    combined = weighted_combine(surged, weights)
    diag = StepDiagnostics(
        per_grad_l2_norm=np.linalg.norm(gset.stacked, axis=1),
        pairwise_cosine=pairwise_cosines(gset),
        weights=weights,
        conflict_fraction=float(np.count_nonzero(~mask)) / gset.length,
        gamma_sampled=gamma,
    )
    return combined, diag


def temperature_at(config: TrainConfig, step: int) -> float:
    horizon = config.temperature_anneal_fraction * config.total_steps
    if horizon <= 0 or step >= horizon:
        return config.temperature_end
    frac = step / horizon
    return config.temperature_start + frac * (config.temperature_end - config.temperature_start)


# ---------------------------------------------------------------------------
# training and evaluation


def train(config: TrainConfig, checkpoint_hook=None) -> tuple[ParamSet, MetricsLog]:
    """Run the full act/store/update loop; returns final params and the log.

    ``checkpoint_hook(step, params, opt_state, target_params)`` is
    invoked after every update when provided (the CLI uses it to persist
    checkpoints on a cadence).
    """
    spec = config.network_spec()
    seed_seq = np.random.SeedSequence(config.seed)
    init_ss, env_ss, explore_ss, batch_ss, aug_ss, damp_ss = seed_seq.spawn(6)
    init_seed = int(np.random.default_rng(init_ss).integers(0, 2**31 - 1))
    params = init_params(spec, init_seed, dtype=np.float32)
    target_params = params.copy()
    opt_state = init_optimizer(config.optimizer, params.size)
    env_rng = np.random.default_rng(env_ss)
    explore_rng = np.random.default_rng(explore_ss)
    batch_rng = np.random.default_rng(batch_ss)
    aug_rng = np.random.default_rng(aug_ss)
    damp_rng = np.random.default_rng(damp_ss)

    bank = augbox.DistractorBank(
        config.distractor_seed, config.distractor_count, config.render_size, config.render_size
    )
    combination = config.effective_combination()
    buffer = ReplayBuffer(config.buffer_capacity, spec.input_shape)
    metrics = MetricsLog()

    def new_episode():
        episode_seed = int(env_rng.integers(0, 2**31 - 1))
        return pixelworld.reset(episode_seed, config.variant, config.render_size)

    state, obs = new_episode()
    episode_return = 0.0
    episode_length = 0

    for t in range(config.total_steps):
        action = select_action(spec, params, obs, temperature_at(config, t), explore_rng)
        prev_obs = obs
        state, result = pixelworld.step(state, action)
        obs = result.observation
        buffer.add(Transition(prev_obs, action, result.reward, obs, result.done))
        episode_return += result.reward
        episode_length += 1

        record = StepRecord(step=t)
        if result.done:
            record.episode_return = episode_return
            record.episode_length = episode_length
            episode_return = 0.0
            episode_length = 0
            state, obs = new_episode()

        if t >= config.warmup_steps:
            batch = buffer.sample(batch_rng, config.batch_size)
            targets = td_targets(spec, target_params, batch, config.discount)
            gset, losses = critic_gradient_set(
                spec, params, batch, combination, bank, aug_rng, targets
            )
            combined, diag = _aggregate(
                gset, config.aggregation, config.agreement_mode, config.damping, damp_rng
            )
            params, opt_state = optimizer_update(params, combined, opt_state, config.learning_rate)
            target_params = sync_target(params, target_params, t, config.target_sync_period)
            record.losses = losses
            record.weights = [float(w) for w in diag.weights.w]
            record.fallback_used = diag.weights.fallback_used
            record.conflict_fraction = diag.conflict_fraction
            record.gamma = diag.gamma_sampled
            record.grad_norms = [float(n) for n in diag.per_grad_l2_norm]
            record.cosines = [[float(c) for c in row] for row in diag.pairwise_cosine]
            if checkpoint_hook is not None:
                checkpoint_hook(t, params, opt_state, target_params)

        metrics.append(record)

    return params, metrics


@dataclass
class EvalReport:
    variant: str
    episodes: int
    seed: int
    mean_return: float
    std_return: float
    returns: list[float]

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "episodes": self.episodes,
            "seed": self.seed,
            "mean_return": self.mean_return,
            "std_return": self.std_return,
            "returns": self.returns,
        }


def evaluate(
    spec: QNetworkSpec,
    params: ParamSet,
    variant: pixelworld.EnvVariant,
    episodes: int,
    seed: int,
    render_size: int = pixelworld.DEFAULT_RENDER_SIZE,
) -> EvalReport:
    """Zero-shot greedy rollouts: no exploration, no augmentation."""
    if episodes < 1:
        raise StructuralError("at least one evaluation episode required")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    returns = []
    for _ in range(episodes):
        episode_seed = int(rng.integers(0, 2**31 - 1))
        state, obs = pixelworld.reset(episode_seed, variant, render_size)
        total = 0.0
        while not state.done:
            action = select_action(spec, params, obs, 0.0, None)
            state, result = pixelworld.step(state, action)
            obs = result.observation
            total += result.reward
        returns.append(total)
    arr = np.array(returns)
    return EvalReport(
        variant=variant.value,
        episodes=episodes,
        seed=seed,
        mean_return=float(arr.mean()),
        std_return=float(arr.std()),
        returns=[float(r) for r in returns],
    )
