"""Viewpoint-selection environment and PPO agent.

The state the policy sees is the raw quaternion, the depth normalized to
[-1, 1], and the last reward (6 inputs). Actions are 5-vectors in the unit
box: four quaternion increments plus a depth increment. Rewards come from a
pluggable scorer, so the block-based and image-based reward modes differ
only in the object handed to the environment.

Sampled actions are stored raw (pre-clipping) together with their Gaussian
log-density; the environment clips to the box before applying. Recomputing
the density of a stored action therefore reproduces the stored value
exactly, which keeps the first post-rollout policy ratio at 1.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .camera import (
    ACTION_DEPTH_FACTOR,
    ACTION_QUAT_SCALE,
    D_MAX_FACTOR,
    D_MIN_FACTOR,
    DEFAULT_ASPECT,
    DEFAULT_FOV,
    Viewpoint,
    apply_action,
    icosphere_directions,
    look_rotation,
    to_camera_frame,
)
from .errors import DegenerateOrientationError, TrainingError
from .nn import AdamW, Dense, Network, ParamTensor, Relu, Tanh, save_checkpoint

logger = logging.getLogger(__name__)

ACTION_DIM = 5
STATE_DIM = 6
LOG_STD_MIN = math.log(1e-3)
LOG_STD_MAX = 0.0
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class PPOConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2  # math.inf disables clipping
    epochs_per_batch: int = 4
    minibatch: int = 64
    horizon: int = 32
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    learning_rate: float = 3e-4
    max_episodes: int = 500
    seed: int = 0
    success_threshold: float = 0.98
    episodes_per_batch: int = 4  # one PPO update per this many episodes
    checkpoint_path: str | None = None
    checkpoint_every: int = 100

    def __post_init__(self):
        if not (0.0 < self.clip_epsilon):
            raise ValueError(f"clip epsilon must be positive, got {self.clip_epsilon}")
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.gae_lambda <= 1.0):
            raise ValueError("gamma and gae-lambda must lie in (0, 1]")


class PolicyModel:
    """Shared trunk with a tanh action-mean head, a value head, and log-std."""

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.trunk = Network([
            Dense(STATE_DIM, 64, rng, name="pi.fc1"), Relu(),
            Dense(64, 64, rng, name="pi.fc2"), Relu(),
        ], name="trunk")
        self.mean_head = Network([Dense(64, ACTION_DIM, rng, name="pi.mean"), Tanh()],
                                 name="mean-head")
        self.value_head = Network([Dense(64, 1, rng, name="pi.value")], name="value-head")
        self.log_std = ParamTensor("pi.log_std", np.full(ACTION_DIM, math.log(0.5)))

    def params(self) -> list[ParamTensor]:
        return (self.trunk.params() + self.mean_head.params()
                + self.value_head.params() + [self.log_std])

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def clamp_log_std(self):
        np.clip(self.log_std.values, LOG_STD_MIN, LOG_STD_MAX,
                out=self.log_std.values)

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std.values)

    def forward(self, states: np.ndarray):
        states = np.atleast_2d(states)
        hidden, t_caches = self.trunk.forward(states)
        mean, m_caches = self.mean_head.forward(hidden)
        value, v_caches = self.value_head.forward(hidden)
        return mean, value[:, 0], (t_caches, m_caches, v_caches)

    def backward(self, caches, grad_mean: np.ndarray, grad_value: np.ndarray):
        t_caches, m_caches, v_caches = caches
        gh = self.mean_head.backward(m_caches, grad_mean)
        gh = gh + self.value_head.backward(v_caches, grad_value[:, None])
        self.trunk.backward(t_caches, gh)

    def snapshot(self):
        return [p.values.copy() for p in self.params()]

    def restore(self, snap):
        for p, values in zip(self.params(), snap):
            p.values[...] = values


def gaussian_log_prob(actions: np.ndarray, mean: np.ndarray,
                      log_std: np.ndarray) -> np.ndarray:
    """Diagonal-Gaussian log density, one scalar per batch row."""
    std = np.exp(log_std)
    z = (actions - mean) / std
    return -0.5 * np.sum(z * z, axis=1) - np.sum(log_std) - 0.5 * ACTION_DIM * _LOG_2PI


@dataclass(frozen=True)
class EnvState:
    viewpoint: Viewpoint
    step_index: int
    goal: np.ndarray
    last_reward: float


@dataclass(frozen=True)
class Transition:
    state_vec: np.ndarray
    action: np.ndarray  # raw policy sample, pre-clipping
    log_prob: float
    reward: float
    value: float
    done: bool


@dataclass
class PolicySample:
    action: np.ndarray
    log_prob: float
    value: float


def policy_sample(model: PolicyModel, state_vec: np.ndarray,
                  rng: np.random.Generator) -> PolicySample:
    mean, value, _ = model.forward(state_vec[None])
    std = model.std
    action = mean[0] + std * rng.standard_normal(ACTION_DIM)
    log_prob = float(gaussian_log_prob(action[None], mean, model.log_std.values)[0])
    return PolicySample(action, log_prob, float(value[0]))


class ViewpointEnv:
    """Gym-style environment: orbit the volume, chase a goal embedding."""

    def __init__(self, scorer, radius: float, *,
                 fov: float = DEFAULT_FOV, aspect: float = DEFAULT_ASPECT,
                 horizon: int = 32, success_threshold: float = 0.98,
                 quat_scale: float = ACTION_QUAT_SCALE,
                 depth_scale: float | None = None,
                 d_min: float | None = None, d_max: float | None = None,
                 start_level: int = 2):
        self.scorer = scorer  # exposes reward(frame, goal) -> float
        self.radius = radius
        self.fov = fov
        self.aspect = aspect
        self.horizon = horizon
        self.success_threshold = success_threshold
        self.quat_scale = quat_scale
        self.depth_scale = depth_scale if depth_scale is not None else ACTION_DEPTH_FACTOR * radius
        self.d_min = d_min if d_min is not None else D_MIN_FACTOR * radius
        self.d_max = d_max if d_max is not None else D_MAX_FACTOR * radius
        self._start_dirs = icosphere_directions(start_level)
        self.state: EnvState | None = None

    def frame_for(self, vp: Viewpoint):
        return to_camera_frame(vp, self.fov, self.aspect, self.radius)

    def reward_of(self, vp: Viewpoint, goal: np.ndarray) -> float:
        return float(self.scorer.reward(self.frame_for(vp), goal))

    def state_vector(self, state: EnvState) -> np.ndarray:
        depth_norm = 2.0 * (state.viewpoint.depth - self.d_min) / (self.d_max - self.d_min) - 1.0
        return np.array([*state.viewpoint.orientation, depth_norm, state.last_reward])

    def reset(self, goal: np.ndarray, start: Viewpoint | None = None,
              seed: int | None = None) -> EnvState:
        goal = np.asarray(goal, dtype=np.float64)
        if float(np.linalg.norm(goal)) < 1e-12:
            raise ValueError("goal embedding must be nonzero")
        if start is None:
            rng = np.random.default_rng(seed)
            direction = self._start_dirs[int(rng.integers(len(self._start_dirs)))]
            depth = 0.5 * (self.d_min + self.d_max)
            start = Viewpoint(tuple(look_rotation(-direction)), depth)
        self.state = EnvState(start, 0, goal, self.reward_of(start, goal))
        return self.state

    def step(self, action: np.ndarray) -> tuple[EnvState, float, bool, dict]:
        if self.state is None:
            raise RuntimeError("step() before reset()")
        state = self.state
        if state.step_index >= self.horizon:
            raise RuntimeError("episode already finished; call reset()")
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        delta = np.array([*a[:4], a[4] * self.depth_scale])
        info: dict = {"aborted": False, "success": False}
        try:
            vp = apply_action(state.viewpoint, delta, d_min=self.d_min,
                              d_max=self.d_max, quat_scale=self.quat_scale)
            reward = self.reward_of(vp, state.goal)
        except DegenerateOrientationError:
            info["aborted"] = True
            next_state = EnvState(state.viewpoint, state.step_index + 1, state.goal, -1.0)
            self.state = next_state
            return next_state, -1.0, True, info
        next_state = EnvState(vp, state.step_index + 1, state.goal, reward)
        self.state = next_state
        info["success"] = reward >= self.success_threshold
        done = info["success"] or next_state.step_index >= self.horizon
        return next_state, reward, done, info


def compute_gae(transitions: list[Transition], bootstrap_value: float,
                gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Raw generalized advantages and returns (normalization happens per update)."""
    if not transitions:
        raise ValueError("cannot compute advantages for an empty trajectory")
    rewards = np.array([t.reward for t in transitions])
    values = np.array([t.value for t in transitions])
    next_values = np.append(values[1:], bootstrap_value)
    deltas = rewards + gamma * next_values - values
    advantages = np.empty_like(deltas)
    acc = 0.0
    for i in range(len(deltas) - 1, -1, -1):
        acc = deltas[i] + gamma * lam * acc
        advantages[i] = acc
    return advantages, advantages + values


@dataclass
class RolloutBatch:
    states: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    @staticmethod
    def from_transitions(transitions: list[Transition], advantages: np.ndarray,
                         returns: np.ndarray) -> "RolloutBatch":
        return RolloutBatch(
            states=np.stack([t.state_vec for t in transitions]),
            actions=np.stack([t.action for t in transitions]),
            log_probs=np.array([t.log_prob for t in transitions]),
            advantages=np.asarray(advantages, dtype=np.float64),
            returns=np.asarray(returns, dtype=np.float64),
        )


@dataclass
class PPOStats:
    policy_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    skipped_minibatches: int = 0


def ppo_update(model: PolicyModel, batch: RolloutBatch, config: PPOConfig,
               optimizer: AdamW, rng: np.random.Generator) -> PPOStats:
    """Clipped-surrogate update over the batch; advantages normalized here."""
    n = len(batch.states)
    if n == 0:
        raise ValueError("empty PPO batch")
    adv = batch.advantages
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    eps = config.clip_epsilon
    stats = PPOStats()
    count = 0
    for _ in range(config.epochs_per_batch):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch):
            idx = order[start:start + config.minibatch]
            states, actions = batch.states[idx], batch.actions[idx]
            old_logp, a_t, rets = batch.log_probs[idx], adv[idx], batch.returns[idx]
            m = len(idx)

            mean, value, caches = model.forward(states)
            log_std = model.log_std.values
            std = np.exp(log_std)
            logp = gaussian_log_prob(actions, mean, log_std)
            ratio = np.exp(logp - old_logp)
            if not np.all(np.isfinite(ratio)):
                stats.skipped_minibatches += 1
                logger.warning("skipping PPO minibatch with non-finite ratio")
                continue
            surr_raw = ratio * a_t
            surr_clip = np.clip(ratio, 1.0 - eps, 1.0 + eps) * a_t
            policy_loss = -float(np.mean(np.minimum(surr_raw, surr_clip)))
            value_loss = float(np.mean((value - rets) ** 2))
            entropy = float(np.sum(log_std) + 0.5 * ACTION_DIM * (1.0 + _LOG_2PI))

            # gradient of the minimized objective
            unclipped = surr_raw <= surr_clip  # min picks the raw branch on ties
            dlogp = -(a_t * ratio * unclipped) / m
            z = (actions - mean) / std
            grad_mean = dlogp[:, None] * z / std
            grad_value = config.value_coef * 2.0 * (value - rets) / m
            model.zero_grad()
            model.backward(caches, grad_mean, grad_value)
            model.log_std.grad += np.sum(dlogp[:, None] * (z * z - 1.0), axis=0)
            model.log_std.grad += -config.entropy_coef  # d(-c_e * entropy)/dlog_std
            optimizer.step()
            model.clamp_log_std()

            stats.policy_loss += policy_loss
            stats.value_loss += value_loss
            stats.entropy += entropy
            count += 1
    if count:
        stats.policy_loss /= count
        stats.value_loss /= count
        stats.entropy /= count
    return stats


@dataclass
class TrainResult:
    episode_rewards: list[float] = field(default_factory=list)
    log_lines: list[str] = field(default_factory=list)
    best_mean_reward: float = -np.inf
    best_snapshot: list | None = None
    checkpoint_path: str | None = None


def rollout(env: ViewpointEnv, model: PolicyModel, goal: np.ndarray,
            rng: np.random.Generator, start: Viewpoint | None = None,
            seed: int | None = None) -> tuple[list[Transition], float]:
    """Collect one episode; returns transitions and the bootstrap value."""
    state = env.reset(goal, start=start, seed=seed)
    transitions = []
    done = False
    info: dict = {}
    while not done:
        vec = env.state_vector(state)
        sample = policy_sample(model, vec, rng)
        state, reward, done, info = env.step(sample.action)
        transitions.append(Transition(vec, sample.action, sample.log_prob,
                                      reward, sample.value, done))
    if info.get("aborted"):
        bootstrap = 0.0
    else:
        # Success and horizon cuts are both truncations of an ongoing task
        # (staying on a good viewpoint keeps earning reward), so bootstrap
        # with the value of the final state; a zero terminal value would
        # teach the agent to hover just below the success threshold.
        _, value, _ = model.forward(env.state_vector(state)[None])
        bootstrap = float(value[0])
    return transitions, bootstrap


def train(env_factory, model: PolicyModel, config: PPOConfig,
          goal: np.ndarray | None = None) -> TrainResult:
    """Alternate rollout collection and PPO updates.

    ``env_factory`` is either a ViewpointEnv reused across episodes or a
    callable ``(episode, rng) -> (env, goal)`` supplying per-episode goals.
    """
    rng = np.random.default_rng(config.seed)
    optimizer = AdamW(model.params(), lr=config.learning_rate)
    result = TrainResult()
    pending: list[Transition] = []
    pending_gae: list[tuple[np.ndarray, np.ndarray]] = []
    for episode in range(config.max_episodes):
        if callable(env_factory):
            env, episode_goal = env_factory(episode, rng)
        else:
            env, episode_goal = env_factory, goal
            if episode_goal is None:
                raise ValueError("a goal is required when reusing a single environment")
        transitions, bootstrap = rollout(env, model, episode_goal, rng,
                                         seed=int(rng.integers(2**31)))
        pending.extend(transitions)
        pending_gae.append(compute_gae(transitions, bootstrap,
                                       config.gamma, config.gae_lambda))
        stats = PPOStats()
        if (episode + 1) % config.episodes_per_batch == 0 or episode == config.max_episodes - 1:
            advantages = np.concatenate([a for a, _ in pending_gae])
            returns = np.concatenate([r for _, r in pending_gae])
            batch = RolloutBatch.from_transitions(pending, advantages, returns)
            stats = ppo_update(model, batch, config, optimizer, rng)
            pending, pending_gae = [], []
        mean_reward = float(np.mean([t.reward for t in transitions]))
        result.episode_rewards.append(mean_reward)
        result.log_lines.append(
            f"{episode}\t{mean_reward:.6f}\t{stats.policy_loss:.6f}\t{stats.value_loss:.6f}"
        )
        if not math.isfinite(mean_reward):
            if result.best_snapshot is not None:
                model.restore(result.best_snapshot)
            path = None
            if config.checkpoint_path:
                save_checkpoint(config.checkpoint_path, model.params())
                path = config.checkpoint_path
            raise TrainingError("PPO training diverged (non-finite mean reward)",
                                checkpoint_path=path)
        if mean_reward > result.best_mean_reward:
            result.best_mean_reward = mean_reward
            result.best_snapshot = model.snapshot()
        if config.checkpoint_path and (episode + 1) % config.checkpoint_every == 0:
            save_checkpoint(config.checkpoint_path, model.params())
            result.checkpoint_path = config.checkpoint_path
    if config.checkpoint_path:
        save_checkpoint(config.checkpoint_path, model.params())
        result.checkpoint_path = config.checkpoint_path
    return result


@dataclass
class BestViewpoint:
    viewpoint: Viewpoint
    reward: float
    trajectory: list[tuple[Viewpoint, float]]


def greedy_rollout(env: ViewpointEnv, model: PolicyModel, goal: np.ndarray,
                   start: Viewpoint | None = None,
                   seed: int | None = None) -> list[tuple[Viewpoint, float]]:
    """Mean-action rollout; returns the visited (viewpoint, reward) sequence."""
    state = env.reset(goal, start=start, seed=seed)
    path = [(state.viewpoint, state.last_reward)]
    done = False
    while not done:
        mean, _, _ = model.forward(env.state_vector(state)[None])
        state, reward, done, _ = env.step(mean[0])
        path.append((state.viewpoint, reward))
    return path


def best_viewpoint(model: PolicyModel, env: ViewpointEnv, goal: np.ndarray,
                   restarts: int = 4, start: Viewpoint | None = None,
                   seed: int = 0) -> BestViewpoint:
    """Greedy rollouts from several starts; keep the best viewpoint visited."""
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    best: BestViewpoint | None = None
    for r in range(restarts):
        use_start = start if r == 0 and start is not None else None
        path = greedy_rollout(env, model, goal, start=use_start, seed=seed + r)
        vp, reward = max(path, key=lambda vr: vr[1])
        if best is None or reward > best.reward:
            best = BestViewpoint(vp, reward, path)
    return best
