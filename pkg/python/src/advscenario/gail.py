"""Human-driving prior learned with GAIL.

Expert state-action pairs come from replaying recorded trajectories; the
generator is a PPO agent rewarded by -log D(s, a); the discriminator is a
separate MLP on the concatenated (state, action) where D close to 1 means
"generated". While training, background vehicles replay their recordings
and do not react to the ego.
"""

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import pyarrow as pa

from . import progress
from .artifacts import read_parquet, write_parquet
from .conversion import to_numpy
from .env import StepResult
from .errors import DomainError
from .ingest import Episode, TrajectoryIndex
from .kernel import (
    EXPERT_BOUNDS,
    ActionBounds,
    ControlAction,
    SimConfig,
    VehicleState,
    WorldState,
    detect_collision,
    episode_done,
    neighbors,
    relative_features,
    step_vehicle,
    steering_for_yaw_rate,
    wrap_angle,
)
from .neural import Mlp, MlpSpec, Optimizer, diag_gaussian_kl, save_checkpoint
from .ppo import PpoAgent, TrainingConfig, collect_rollouts, ppo_update
from .roads import RoadNetwork

logger = logging.getLogger(__name__)

D_CLIP = 1e-12
REWARD_FLOOR = 1e-8
CURVE_COLUMNS = ["episode", "disc_loss", "disc_accuracy", "mean_steps", "mean_reward", "action_kl"]


@dataclass(frozen=True)
class GailFeatureSpec:
    """Ego block of 6 features followed by 5 relative features per neighbour slot."""

    neighbors: int = 10
    radius: float = 50.0

    @property
    def dim(self) -> int:
        return 6 + 5 * self.neighbors

    def input_scale(self) -> np.ndarray:
        ego = [1 / 5, 1 / 2, 1 / 2, 1 / 2, 1 / 10, 2.0]
        neighbor = [1 / 10, 1 / 50, 1 / 5, 1 / 10, 1.0]
        return np.array(ego + neighbor * self.neighbors)


DEFAULT_FEATURES = GailFeatureSpec()


def lane_frame_offset(world: WorldState, ego: int) -> Tuple[float, float, bool]:
    """(left-positive offset from the lane centerline, lane heading, on lane).

    A vehicle off every lane is measured against the nearest centerline and
    reported with on_lane False.
    """
    vehicle = world.vehicle(ego)
    if world.road is None:
        return 0.0, vehicle.heading, True
    if vehicle.lane is not None and world.road.has_lane(vehicle.lane):
        _, offset, heading = world.road.lane(vehicle.lane).project(vehicle.x, vehicle.y)
        return offset, heading, True
    position = world.road.locate(vehicle.x, vehicle.y)
    return position.offset, position.heading, False


def gail_state_features(world: WorldState, ego: int, spec: GailFeatureSpec = DEFAULT_FEATURES) -> np.ndarray:
    """56-dim state: ego block, then the nearest neighbours within the radius.

    Ego block: length, width, lateral offset, lateral speed, longitudinal
    speed (both relative to the lane direction) and steering. Empty
    neighbour slots are zero.
    """
    vehicle = world.vehicle(ego)
    offset, lane_heading, on_lane = lane_frame_offset(world, ego)
    if not on_lane:
        logger.debug("Vehicle %d is off every lane at step %d", ego, world.step_index)
    rel = wrap_angle(vehicle.heading - lane_heading)
    out = np.zeros(spec.dim)
    out[:6] = [vehicle.length, vehicle.width, offset,
               vehicle.speed * math.sin(rel), vehicle.speed * math.cos(rel), vehicle.steering]
    for slot, (other_id, _) in enumerate(neighbors(world, ego, spec.radius)[:spec.neighbors]):
        out[6 + 5 * slot: 11 + 5 * slot] = relative_features(vehicle, world.vehicle(other_id))
    return out


@dataclass
class ExpertBuffer:
    """Expert (56-vector, 2-vector) pairs."""

    states: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.float64)
        if states.size == 0:
            self.states = states.reshape(0, states.shape[1] if states.ndim == 2 else DEFAULT_FEATURES.dim)
        else:
            self.states = states.reshape(len(states), -1)
        self.actions = np.asarray(self.actions, dtype=np.float64).reshape(-1, 2)
        if len(self.states) != len(self.actions):
            raise DomainError(f"{len(self.states)} expert states but {len(self.actions)} actions")
        if not np.all(np.isfinite(self.states)):
            raise DomainError("Expert states must be finite")
        b = EXPERT_BOUNDS
        if len(self.actions) and not (np.all(self.actions >= b.low - 1e-12) and np.all(self.actions <= b.high + 1e-12)):
            raise DomainError("Expert actions must lie within the expert bounds")

    def __len__(self) -> int:
        return len(self.states)

    def sample(self, n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        idx = rng.integers(0, len(self), size=n)
        return self.states[idx], self.actions[idx]

    def to_table(self) -> pa.Table:
        return pa.table({
            "state": pa.array(self.states.tolist(), type=pa.list_(pa.float64())),
            "action": pa.array(self.actions.tolist(), type=pa.list_(pa.float64())),
        })

    def write(self, path: Union[str, Path]) -> Path:
        return write_parquet(path, self.to_table())

    @classmethod
    def read(cls, path: Union[str, Path]) -> "ExpertBuffer":
        arrays = to_numpy(read_parquet(path, "train-gail"))
        return cls(arrays["state"], arrays["action"])

    @classmethod
    def empty(cls, dim: int = DEFAULT_FEATURES.dim) -> "ExpertBuffer":
        return cls(np.zeros((0, dim)), np.zeros((0, 2)))


@dataclass(frozen=True)
class ExpertRules:
    """Which vehicles and windows become expert scenarios.

    selection: "lane-changers" (vehicles whose lane id changes), "random"
    (random_count vehicles) or "all".
    """

    selection: str = "lane-changers"
    random_count: int = 20
    scenario_steps: int = 100
    max_scenarios: int = 4
    max_vehicles: int = 40
    min_mean_speed: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.selection not in ("lane-changers", "random", "all"):
            raise DomainError(f"Unknown expert selection '{self.selection}'")


def _select_vehicles(episodes: Sequence[Episode], rules: ExpertRules, rng: np.random.Generator) -> List[Episode]:
    if rules.selection == "all":
        return list(episodes)
    if rules.selection == "random":
        order = rng.permutation(len(episodes))[:rules.random_count]
        return [episodes[i] for i in sorted(order)]
    chosen = []
    for episode in episodes:
        lanes = {r.lane_id for r in episode.records if r.lane_id is not None}
        if len(lanes) > 1:
            chosen.append(episode)
    return chosen


def scenario_starts(n_frames: int, rules: ExpertRules, rng: np.random.Generator) -> List[int]:
    """Start offsets of the disjoint scenario windows of a track.

    Tracks no longer than max_scenarios windows are cut into consecutive
    windows from the start; longer tracks get max_scenarios windows placed
    at random without overlap.
    """
    w, k = rules.scenario_steps, rules.max_scenarios
    if n_frames <= w * k:
        return [i * w for i in range(n_frames // w)]
    slack = n_frames - w * k
    offsets = np.sort(rng.integers(0, slack + 1, size=k))
    return [int(o) + i * w for i, o in enumerate(offsets)]


def expert_actions(index: TrajectoryIndex, vehicle_id: int, frames: Sequence[int],
                   cfg: SimConfig, bounds: ActionBounds = EXPERT_BOUNDS) -> np.ndarray:
    """Recorded (acceleration, steering) per frame; steering inverts the bicycle model."""
    out = np.zeros((len(frames), 2))
    for i, frame in enumerate(frames):
        record = index.record(vehicle_id, frame)
        nxt = index.heading(vehicle_id, frame + 1)
        now = index.heading(vehicle_id, frame)
        yaw_rate = 0.0 if nxt is None else wrap_angle(nxt - now) / cfg.dt
        accel = record.accel if math.isfinite(record.accel) else 0.0
        action = ControlAction(accel, steering_for_yaw_rate(yaw_rate, record.speed, cfg)).clamp(bounds)
        out[i] = (action.acceleration, action.steering)
    return out


def collect_expert_trajectories(
    episodes: Sequence[Episode],
    road: Optional[RoadNetwork],
    rules: ExpertRules = ExpertRules(),
    cfg: SimConfig = SimConfig(),
    spec: GailFeatureSpec = DEFAULT_FEATURES,
) -> ExpertBuffer:
    """Replay recorded scenarios and keep the expert state-action pairs.

    A scenario is skipped when its initial frame holds more than
    max_vehicles vehicles or their mean speed is below min_mean_speed. A
    scenario whose replay ends early (ego collision or off-road) is
    discarded entirely.
    """
    rng = np.random.default_rng(rules.seed)
    index = TrajectoryIndex(episodes)
    states, actions = [], []
    kept = skipped = discarded = 0
    for episode in _select_vehicles(episodes, rules, rng):
        frames = episode.frames
        for start in scenario_starts(len(frames), rules, rng):
            window = frames[start:start + rules.scenario_steps]
            if window[-1] - window[0] != len(window) - 1:
                skipped += 1
                continue
            initial = index.world_at(window[0], road)
            if len(initial.vehicles) > rules.max_vehicles or \
                    np.mean([v.speed for v in initial.vehicles]) < rules.min_mean_speed:
                skipped += 1
                continue
            pairs = _replay_window(index, episode.ego_id, window, road, cfg, spec)
            if pairs is None:
                discarded += 1
                continue
            states.extend(pairs[0])
            actions.extend(pairs[1])
            kept += 1
    logger.info("Expert collection: %d scenario(s) kept, %d skipped, %d ended early; %d pair(s)",
                kept, skipped, discarded, len(states))
    if not states:
        return ExpertBuffer.empty(spec.dim)
    return ExpertBuffer(np.array(states), np.array(actions))


def _replay_window(index: TrajectoryIndex, ego: int, window: Sequence[int], road: Optional[RoadNetwork],
                   cfg: SimConfig, spec: GailFeatureSpec) -> Optional[Tuple[List[np.ndarray], List[np.ndarray]]]:
    acts = expert_actions(index, ego, window, cfg)
    states = []
    previous_steer = 0.0
    for step, frame in enumerate(window):
        world = index.world_at(frame, road, step_index=step, dt=cfg.dt)
        vehicles = []
        for v in world.vehicles:
            if v.id == ego:
                lane = road.lane_at(v.x, v.y) if road is not None else v.lane
                v = VehicleState(v.id, v.x, v.y, v.heading, v.speed, v.length, v.width, lane,
                                 v.acceleration, previous_steer)
            vehicles.append(v)
        world = world.with_vehicles(vehicles)
        me = world.vehicle(ego)
        events = [e for other in world.vehicles if other.id != ego
                  for e in [detect_collision(me, other, step)] if e is not None]
        if events or (cfg.offroad_terminates and me.lane is None):
            return None
        states.append(gail_state_features(world, ego, spec))
        previous_steer = float(acts[step, 1])
    return states, list(acts)


class ReplayTrafficEnv:
    """Ego driven by the policy; every other vehicle replays its recording.

    Episodes start at a random frame of a random ego track with at least
    `horizon_steps` recorded frames left and end on ego collision, off-road
    or the horizon.
    """

    action_dim = 2

    def __init__(self, episodes: Sequence[Episode], road: Optional[RoadNetwork], cfg: SimConfig = SimConfig(),
                 spec: GailFeatureSpec = DEFAULT_FEATURES, bounds: ActionBounds = EXPERT_BOUNDS):
        self.index = TrajectoryIndex(episodes)
        self.road = road
        self.cfg = cfg
        self.spec = spec
        self.obs_dim = spec.dim
        self.action_low = bounds.low
        self.action_high = bounds.high
        self.bounds = bounds
        self.starts = [
            (e.ego_id, e.frames[i])
            for e in episodes
            for i in range(0, len(e.frames) - cfg.horizon_steps)
            if e.frames[i + cfg.horizon_steps] - e.frames[i] == cfg.horizon_steps
        ]
        if not self.starts:
            raise DomainError(
                f"No recorded track has {cfg.horizon_steps + 1} consecutive frames; "
                "provide longer trajectories or lower the horizon"
            )
        self.ego = -1
        self.frame0 = 0
        self.world: Optional[WorldState] = None

    def _background(self, step: int) -> List[VehicleState]:
        return [v for v in self.index.world_at(self.frame0 + step).vehicles if v.id != self.ego]

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.ego, self.frame0 = self.starts[int(rng.integers(len(self.starts)))]
        me = self.index.vehicle_state(self.ego, self.frame0)
        lane = self.road.lane_at(me.x, me.y) if self.road is not None else me.lane
        me = VehicleState(me.id, me.x, me.y, me.heading, me.speed, me.length, me.width, lane, 0.0, 0.0)
        self.world = WorldState(0.0, 0, (me, *self._background(0)), self.road)
        return gail_state_features(self.world, self.ego, self.spec)

    def step(self, action: np.ndarray) -> StepResult:
        assert self.world is not None, "reset() must be called before step()"
        control = ControlAction.from_array(action, self.bounds)
        me = step_vehicle(self.world.vehicle(self.ego), control, self.cfg)
        if self.road is not None:
            me = VehicleState(me.id, me.x, me.y, me.heading, me.speed, me.length, me.width,
                              self.road.lane_at(me.x, me.y), me.acceleration, me.steering)
        step = self.world.step_index + 1
        background = self._background(step)
        self.world = WorldState(step * self.cfg.dt, step, (me, *background), self.road)
        events = [e for other in background for e in [detect_collision(me, other, step)] if e is not None]
        reason = episode_done(self.world, self.ego, events, self.cfg)
        info: Dict[str, Any] = {"steps": step, "termination": None if reason is None else reason.value}
        return StepResult(gail_state_features(self.world, self.ego, self.spec), 0.0, reason is not None, info)


class Discriminator:
    """Logistic classifier on (state, action); output close to 1 means generated."""

    def __init__(self, state_dim: int, hidden: Sequence[int], rng: np.random.Generator,
                 input_scale: Optional[np.ndarray] = None, lr: float = 1e-4):
        self.net = Mlp(MlpSpec(state_dim + 2, tuple(hidden), 1), rng, input_scale=input_scale)
        self.opt = Optimizer(self.net, lr)

    def logits(self, states, actions) -> np.ndarray:
        return self.net(np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1))[:, 0]

    def prob(self, states, actions) -> np.ndarray:
        return _sigmoid(self.logits(states, actions))

    def update(self, gen_states, gen_actions, exp_states, exp_actions) -> float:
        """One Adam step on the negated GAIL objective; returns the loss before the step."""
        x = np.concatenate([
            np.concatenate([gen_states, gen_actions], axis=1),
            np.concatenate([exp_states, exp_actions], axis=1),
        ])
        z, cache = self.net.forward(x)
        d = _sigmoid(z[:, 0])
        n_gen = len(gen_states)
        grad = np.empty_like(d)
        grad[:n_gen] = (d[:n_gen] - 1.0) / n_gen
        grad[n_gen:] = d[n_gen:] / (len(d) - n_gen)
        loss = discriminator_loss(np.clip(d[:n_gen], D_CLIP, 1 - D_CLIP), np.clip(d[n_gen:], D_CLIP, 1 - D_CLIP))
        self.opt.step(self.net.backward(cache, grad[:, None]))
        return loss


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def discriminator_loss(d_generated, d_expert) -> float:
    """-(mean log D(gen) + mean log(1 - D(expert))).

    Equals 2 log 2 when D is 0.5 everywhere.

    Raises:
        DomainError: If any output lies outside (0, 1).
    """
    d_generated = np.asarray(d_generated, dtype=np.float64)
    d_expert = np.asarray(d_expert, dtype=np.float64)
    for d in (d_generated, d_expert):
        if np.any(~((d > 0) & (d < 1))):
            raise DomainError("Discriminator outputs must lie strictly inside (0, 1)")
    g = np.clip(d_generated, D_CLIP, 1 - D_CLIP)
    e = np.clip(d_expert, D_CLIP, 1 - D_CLIP)
    return float(-(np.mean(np.log(g)) + np.mean(np.log(1 - e))))


def discriminator_accuracy(d_generated, d_expert) -> float:
    """Share of pairs classified correctly; an output of exactly 0.5 counts half."""
    g = np.asarray(d_generated, dtype=np.float64)
    e = np.asarray(d_expert, dtype=np.float64)
    correct = np.sum(g > 0.5) + np.sum(e < 0.5) + 0.5 * (np.sum(g == 0.5) + np.sum(e == 0.5))
    return float(correct / (len(g) + len(e)))


def gail_reward(d: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """-log D with D floored at 1e-8."""
    value = -np.log(np.maximum(np.asarray(d, dtype=np.float64), REWARD_FLOOR)) + 0.0
    return float(value) if np.ndim(value) == 0 else value


def action_gaussian_kl(expert_actions: np.ndarray, policy_actions: np.ndarray, var_floor: float = 1e-6) -> float:
    """KL between diagonal Gaussians fitted to two action samples (expert first)."""
    mu_e, mu_p = expert_actions.mean(axis=0), policy_actions.mean(axis=0)
    var_e = np.maximum(expert_actions.var(axis=0), var_floor)
    var_p = np.maximum(policy_actions.var(axis=0), var_floor)
    return float(diag_gaussian_kl(mu_e, var_e, mu_p, var_p))


@dataclass
class GailResult:
    agent: PpoAgent
    discriminator: Discriminator
    curves: pd.DataFrame
    prior: PpoAgent
    prior_episode: Optional[int] = None


def _snapshot(agent: PpoAgent) -> PpoAgent:
    return PpoAgent(agent.actor.copy(), agent.critic.copy(), agent.cfg)


def train_gail(
    env: ReplayTrafficEnv,
    expert: ExpertBuffer,
    cfg: TrainingConfig,
    seed: int = 0,
    episodes: Optional[int] = None,
    prior_episode: Optional[int] = None,
) -> GailResult:
    """Alternate generator rollouts, one discriminator epoch and one PPO update.

    The agent as it stood after `prior_episode` (default: the last
    episode) is returned as the prior. A zero-episode budget returns the
    initial policy.

    Raises:
        DomainError: If the expert buffer is empty.
    """
    if len(expert) == 0:
        raise DomainError("GAIL needs expert pairs; the expert buffer is empty. Check the collection rules.")
    rng = np.random.default_rng(seed)
    scale = env.spec.input_scale()
    agent = PpoAgent.create(env.obs_dim, env.action_dim, cfg, rng, scale)
    disc = Discriminator(env.obs_dim, cfg.hidden, rng, np.concatenate([scale, [1 / 3, 2.0]]), cfg.lr_discriminator)
    episodes = cfg.max_episodes if episodes is None else episodes
    if prior_episode is None:
        prior_episode = episodes - 1
    prior = _snapshot(agent)

    def reward_fn(obs: np.ndarray, action: np.ndarray, result: StepResult) -> float:
        clamped = np.clip(action, env.action_low, env.action_high)
        return float(gail_reward(disc.prob(obs, clamped)[0]))

    rows = []
    with progress.track("GAIL training", total=episodes) as bar:
        for episode in range(episodes):
            buffer = collect_rollouts(env, agent, cfg.batch_size, rng, reward_fn)
            gen_s = np.stack(buffer.obs)
            gen_a = np.clip(np.stack(buffer.actions), env.action_low, env.action_high)

            losses = []
            order = rng.permutation(len(gen_s))
            for start in range(0, len(order), cfg.minibatch_size):
                idx = order[start:start + cfg.minibatch_size]
                exp_s, exp_a = expert.sample(len(idx), rng)
                losses.append(disc.update(gen_s[idx], gen_a[idx], exp_s, exp_a))

            exp_s, exp_a = expert.sample(len(gen_s), rng)
            d_gen, d_exp = disc.prob(gen_s, gen_a), disc.prob(exp_s, exp_a)
            accuracy = discriminator_accuracy(d_gen, d_exp)
            row = {
                "episode": episode,
                "disc_loss": float(np.mean(losses)),
                "disc_accuracy": accuracy,
                "mean_steps": float(np.mean(buffer.episode_lengths)),
                "mean_reward": float(np.mean(buffer.rewards)),
                "action_kl": action_gaussian_kl(expert.actions, gen_a),
            }
            stats = ppo_update(agent, buffer, cfg, rng)
            row["actor_loss"], row["critic_loss"] = stats.actor_loss, stats.critic_loss
            rows.append(row)
            if episode == prior_episode:
                prior = _snapshot(agent)
            bar.update(episode + 1, acc=accuracy)
            logger.info("GAIL episode %d: disc loss %.4f, accuracy %.3f, mean steps %.1f, action KL %.4f",
                        episode, row["disc_loss"], accuracy, row["mean_steps"], row["action_kl"])

    curves = pd.DataFrame(rows, columns=[*CURVE_COLUMNS, "actor_loss", "critic_loss"])
    return GailResult(agent, disc, curves, prior, prior_episode if episodes else None)


def save_prior(path: Union[str, Path], result: GailResult, meta: Optional[Dict[str, Any]] = None) -> Path:
    """Checkpoint the prior policy, the final agent and the discriminator."""
    return save_checkpoint(path, {
        "prior_actor": result.prior.actor,
        "actor": result.agent.actor,
        "critic": result.agent.critic,
        "discriminator": result.discriminator.net,
    }, {"prior_episode": result.prior_episode, "training": asdict(result.agent.cfg), **(meta or {})})
