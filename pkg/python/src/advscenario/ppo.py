"""Actor-critic PPO on the numpy toolkit.

Rollouts are collected with the current Gaussian actor, advantages come
from GAE, the actor minimizes the clipped surrogate and the critic
regresses onto the GAE value targets. Both networks use Adam.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from . import progress
from .env import Env, StepResult
from .errors import CheckpointError, DomainError
from .neural import (
    GaussianPolicy,
    Mlp,
    MlpSpec,
    Optimizer,
    diag_gaussian_kl,
    gaussian_logprob,
    load_checkpoint,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ["update_idx", "actor_loss", "critic_loss", "mean_reward", "mean_kl"]

RewardFn = Callable[[np.ndarray, np.ndarray, StepResult], float]


@dataclass(frozen=True)
class TrainingConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    lr_critic: float = 1e-3
    lr_actor: float = 1e-4
    lr_discriminator: float = 1e-4
    batch_size: int = 2048
    max_episodes: int = 500
    epochs: int = 10
    minibatch_size: int = 256
    hidden: Tuple[int, ...] = (128, 128)
    init_logvar: float = 0.0
    max_grad_norm: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if not 0.0 < self.gamma <= 1.0:
            raise DomainError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0.0 <= self.lam <= 1.0:
            raise DomainError(f"lambda must lie in [0, 1], got {self.lam}")
        if not self.clip_eps > 0:
            raise DomainError(f"clip epsilon must be positive, got {self.clip_eps}")
        if self.batch_size < 1 or self.minibatch_size < 1 or self.epochs < 1:
            raise DomainError("batch_size, minibatch_size and epochs must all be at least 1")
        if self.max_episodes < 0:
            raise DomainError(f"max_episodes must be non-negative, got {self.max_episodes}")


@dataclass
class RolloutBuffer:
    """Time-ordered transitions; values are from the collection-time critic."""

    obs: List[np.ndarray] = field(default_factory=list)
    actions: List[np.ndarray] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)
    next_obs: List[np.ndarray] = field(default_factory=list)
    dones: List[bool] = field(default_factory=list)
    logprobs: List[float] = field(default_factory=list)
    values: List[float] = field(default_factory=list)
    next_values: List[float] = field(default_factory=list)
    infos: List[Dict[str, Any]] = field(default_factory=list)
    episode_returns: List[float] = field(default_factory=list)
    episode_lengths: List[int] = field(default_factory=list)

    def add(self, obs, action, reward: float, next_obs, done: bool, logprob: float,
            value: float, next_value: float, info: Optional[Dict[str, Any]] = None) -> None:
        self.obs.append(np.asarray(obs, dtype=np.float64))
        self.actions.append(np.asarray(action, dtype=np.float64))
        self.rewards.append(float(reward))
        self.next_obs.append(np.asarray(next_obs, dtype=np.float64))
        self.dones.append(bool(done))
        self.logprobs.append(float(logprob))
        self.values.append(float(value))
        self.next_values.append(float(next_value))
        self.infos.append(info or {})

    def __len__(self) -> int:
        return len(self.rewards)

    def clear(self) -> None:
        for f in (self.obs, self.actions, self.rewards, self.next_obs, self.dones, self.logprobs,
                  self.values, self.next_values, self.infos, self.episode_returns, self.episode_lengths):
            f.clear()


def compute_gae(buffer: RolloutBuffer, gamma: float, lam: float) -> Tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and value targets.

    V(s_{t+1}) is zero on done transitions. The exponential sum stops at
    episode ends and at the end of the buffer.

    Raises:
        DomainError: If the buffer is empty.
    """
    if len(buffer) == 0:
        raise DomainError("Cannot compute advantages of an empty rollout buffer")
    rewards = np.asarray(buffer.rewards)
    values = np.asarray(buffer.values)
    nonterminal = 1.0 - np.asarray(buffer.dones, dtype=np.float64)
    deltas = rewards + gamma * np.asarray(buffer.next_values) * nonterminal - values
    advantages = np.zeros_like(deltas)
    running = 0.0
    for t in reversed(range(len(deltas))):
        running = deltas[t] + gamma * lam * nonterminal[t] * running
        advantages[t] = running
    return advantages, advantages + values


def critic_loss(predicted, targets) -> float:
    predicted = np.asarray(predicted, dtype=np.float64).ravel()
    targets = np.asarray(targets, dtype=np.float64).ravel()
    if predicted.shape != targets.shape:
        raise DomainError(f"critic_loss: {predicted.size} predictions for {targets.size} targets")
    return float(np.mean((predicted - targets) ** 2))


def clipped_surrogate(logprob_new, logprob_old, advantages, eps: float) -> float:
    """-mean(min(r A, clip(r, 1 - eps, 1 + eps) A)) with r = exp(new - old)."""
    ratio = np.exp(np.asarray(logprob_new) - np.asarray(logprob_old))
    advantages = np.asarray(advantages, dtype=np.float64)
    return float(-np.mean(np.minimum(ratio * advantages, np.clip(ratio, 1 - eps, 1 + eps) * advantages)))


def clipped_surrogate_grad(logprob_new, logprob_old, advantages, eps: float) -> np.ndarray:
    """Gradient of `clipped_surrogate` with respect to each logprob_new.

    Zero wherever the clipped branch is the binding minimum.
    """
    ratio = np.exp(np.asarray(logprob_new) - np.asarray(logprob_old))
    advantages = np.asarray(advantages, dtype=np.float64)
    unclipped = ratio * advantages
    active = unclipped <= np.clip(ratio, 1 - eps, 1 + eps) * advantages
    return np.where(active, -unclipped / len(advantages), 0.0)


class PpoAgent:
    """Gaussian actor, scalar critic and their Adam optimizers."""

    def __init__(self, actor: GaussianPolicy, critic: Mlp, cfg: TrainingConfig):
        self.actor = actor
        self.critic = critic
        self.cfg = cfg
        self.actor_opt = Optimizer(actor.net, cfg.lr_actor)
        self.critic_opt = Optimizer(critic, cfg.lr_critic)

    @classmethod
    def create(cls, obs_dim: int, action_dim: int, cfg: TrainingConfig, rng: np.random.Generator,
               input_scale: Optional[np.ndarray] = None) -> "PpoAgent":
        actor = GaussianPolicy(obs_dim, action_dim, cfg.hidden, rng, cfg.init_logvar, input_scale)
        critic = Mlp(MlpSpec(obs_dim, cfg.hidden, 1), rng, input_scale=input_scale)
        return cls(actor, critic, cfg)

    def value(self, obs) -> Union[float, np.ndarray]:
        out = self.critic(obs)
        return float(out[0]) if np.ndim(out) == 1 else out[:, 0]

    def act(self, obs, rng: np.random.Generator) -> Tuple[np.ndarray, float]:
        return self.actor.act(obs, rng)

    def save(self, path: Union[str, Path], meta: Optional[Dict[str, Any]] = None) -> Path:
        return save_checkpoint(path, {"actor": self.actor, "critic": self.critic},
                               {"training": _config_dict(self.cfg), **(meta or {})})

    @classmethod
    def load(cls, path: Union[str, Path], cfg: Optional[TrainingConfig] = None) -> "PpoAgent":
        nets, meta = load_checkpoint(path)
        actor, critic = nets.get("actor"), nets.get("critic")
        if not isinstance(actor, GaussianPolicy) or not isinstance(critic, Mlp):
            raise CheckpointError(f"{path} does not contain an actor/critic pair")
        if cfg is None:
            cfg = TrainingConfig(**meta.get("training", {}))
        return cls(actor, critic, cfg)


def _config_dict(cfg: TrainingConfig) -> Dict[str, Any]:
    data = asdict(cfg)
    data["hidden"] = list(cfg.hidden)
    return data


def collect_rollouts(env: Env, agent: PpoAgent, batch_size: int, rng: np.random.Generator,
                     reward_fn: Optional[RewardFn] = None) -> RolloutBuffer:
    """Run the actor for exactly batch_size transitions.

    Sampled actions are clamped to the env bounds before stepping; the
    buffer keeps the unclamped sample and its log-probability. When
    reward_fn is given it replaces the env reward.
    """
    buffer = RolloutBuffer()
    obs = env.reset(rng)
    ep_return, ep_len = 0.0, 0
    while len(buffer) < batch_size:
        action, logprob = agent.act(obs, rng)
        result = env.step(np.clip(action, env.action_low, env.action_high))
        reward = result.reward if reward_fn is None else float(reward_fn(obs, action, result))
        next_value = 0.0 if result.done else agent.value(result.obs)
        buffer.add(obs, action, reward, result.obs, result.done, logprob, agent.value(obs), next_value,
                   result.info)
        ep_return += reward
        ep_len += 1
        if result.done:
            buffer.episode_returns.append(ep_return)
            buffer.episode_lengths.append(ep_len)
            ep_return, ep_len = 0.0, 0
            obs = env.reset(rng)
        else:
            obs = result.obs
    if ep_len and not buffer.episode_returns:
        buffer.episode_returns.append(ep_return)
        buffer.episode_lengths.append(ep_len)
    return buffer


@dataclass
class UpdateStats:
    actor_loss: float
    critic_loss: float
    mean_reward: float
    mean_kl: float


def ppo_update(agent: PpoAgent, buffer: RolloutBuffer, cfg: TrainingConfig,
               rng: np.random.Generator) -> UpdateStats:
    """K epochs of minibatch Adam steps on actor and critic; clears the buffer.

    Advantages are normalized per buffer. A constant advantage vector
    normalizes to zero and leaves the actor unchanged.
    """
    advantages, targets = compute_gae(buffer, cfg.gamma, cfg.lam)
    std = advantages.std()
    advantages = advantages - advantages.mean()
    if std > 1e-8:
        advantages = advantages / std
    obs = np.stack(buffer.obs)
    actions = np.stack(buffer.actions)
    old_logp = np.asarray(buffer.logprobs)
    old = agent.actor.distribution(obs)
    old_mean, old_var = old.mean.copy(), old.var.copy()
    mean_reward = float(np.mean(buffer.rewards))

    n = len(buffer)
    actor_losses, critic_losses = [], []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = order[start:start + cfg.minibatch_size]
            new_logp = agent.actor.distribution(obs[idx])
            logp = gaussian_logprob(new_logp.mean, new_logp.var, actions[idx])
            weights = clipped_surrogate_grad(logp, old_logp[idx], advantages[idx], cfg.clip_eps)
            actor_losses.append(clipped_surrogate(logp, old_logp[idx], advantages[idx], cfg.clip_eps))
            _, grads = agent.actor.logprob_gradients(obs[idx], actions[idx], weights)
            agent.actor_opt.step(grads, cfg.max_grad_norm)

            pred, cache = agent.critic.forward(obs[idx])
            critic_losses.append(critic_loss(pred[:, 0], targets[idx]))
            grad_v = 2.0 * (pred[:, 0] - targets[idx]) / len(idx)
            agent.critic_opt.step(agent.critic.backward(cache, grad_v[:, None]), cfg.max_grad_norm)

    new = agent.actor.distribution(obs)
    mean_kl = float(np.mean(diag_gaussian_kl(old_mean, old_var, new.mean, new.var)))
    buffer.clear()
    stats = UpdateStats(float(np.mean(actor_losses)), float(np.mean(critic_losses)), mean_reward, mean_kl)
    logger.debug("PPO update: actor %.5f critic %.5f kl %.6f", stats.actor_loss, stats.critic_loss, stats.mean_kl)
    return stats


def train_ppo(
    env: Env,
    cfg: TrainingConfig,
    seed: int = 0,
    episodes: Optional[int] = None,
    agent: Optional[PpoAgent] = None,
    reward_fn: Optional[RewardFn] = None,
    input_scale: Optional[np.ndarray] = None,
) -> Tuple[PpoAgent, pd.DataFrame]:
    """Alternate rollout collection and PPO updates.

    One episode is one collected batch followed by one update.

    Returns:
        The trained agent and the per-update curve with columns
        update_idx, actor_loss, critic_loss, mean_reward, mean_kl,
        mean_return.
    """
    rng = np.random.default_rng(seed)
    agent = agent or PpoAgent.create(env.obs_dim, env.action_dim, cfg, rng, input_scale)
    episodes = cfg.max_episodes if episodes is None else episodes
    rows = []
    with progress.track("PPO training", total=episodes) as bar:
        for update_idx in range(episodes):
            buffer = collect_rollouts(env, agent, cfg.batch_size, rng, reward_fn)
            mean_return = float(np.mean(buffer.episode_returns))
            stats = ppo_update(agent, buffer, cfg, rng)
            rows.append({"update_idx": update_idx, **asdict(stats), "mean_return": mean_return})
            bar.update(update_idx + 1, mean_return=mean_return)
            logger.info("Update %d: mean return %.4f, actor loss %.5f, critic loss %.5f",
                        update_idx, mean_return, stats.actor_loss, stats.critic_loss)
    return agent, pd.DataFrame(rows, columns=[*CURVE_COLUMNS, "mean_return"])
