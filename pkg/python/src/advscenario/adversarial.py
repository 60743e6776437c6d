"""Natural-adversarial agent.

The agent (ego) is trained with PPO against surrogate traffic to approach
and hit the AV under test, while a naturalness term keeps its action
distribution close to the GAIL prior. Trained agents generate seeded,
self-contained scenario records.
"""

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from . import progress
from .env import StepResult
from .errors import DomainError
from .gail import DEFAULT_FEATURES, GailFeatureSpec, gail_state_features, lane_frame_offset
from .kernel import (
    ADVERSARIAL_BOUNDS,
    ActionBounds,
    CollisionEvent,
    ControlAction,
    SimConfig,
    WorldState,
    episode_done,
    log_rows,
    neighbors,
    relative_features,
    step_world,
    wrap_angle,
)
from .neural import GaussianPolicy, diag_gaussian_kl
from .ppo import PpoAgent, TrainingConfig, collect_rollouts, ppo_update
from .traffic import SceneConfig, SurrogateDriver, build_scene, scene_road

logger = logging.getLogger(__name__)

AV_SEARCH_RADIUS = 50.0
ADV_STATE_DIM = 10
ADV_INPUT_SCALE = np.array([1 / 10, 1 / 50, 1 / 5, 1 / 10, 1.0, 1 / 2, 1 / 2, 1 / 10, 2.0, 1 / 10])
CURVE_COLUMNS = ["episode", "mean_r_adv", "mean_r_nat", "mean_reward", "collision_rate_av",
                 "actor_loss", "critic_loss", "mean_kl"]


@dataclass(frozen=True)
class AdvRewardConfig:
    kl_bound: float = 25.0
    balance: float = 0.02

    def __post_init__(self):
        if not self.kl_bound > 0:
            raise DomainError(f"The KL bound M must be positive, got {self.kl_bound}")
        if not self.balance >= 0:
            raise DomainError(f"The balance factor must be non-negative, got {self.balance}")


def select_av_under_test(world: WorldState, ego: int, radius: float = AV_SEARCH_RADIUS) -> int:
    """Nearest vehicle within radius in the ego's lane or an adjacent lane.

    Falls back to the nearest vehicle within radius in any lane, then to
    the nearest vehicle overall.

    Raises:
        DomainError: If the world holds fewer than two vehicles.
    """
    if len(world.vehicles) < 2:
        raise DomainError("Selecting an AV under test needs at least two vehicles")
    me = world.vehicle(ego)
    lanes = set()
    lane = me.lane
    if lane is None and world.road is not None:
        lane = world.road.locate(me.x, me.y).lane_id
    if lane is not None:
        lanes.add(lane)
        if world.road is not None and world.road.has_lane(lane):
            lanes.update(i for i in world.road.adjacent(lane) if i is not None)
    nearby = neighbors(world, ego, radius)
    for vid, _ in nearby:
        if world.vehicle(vid).lane in lanes:
            return vid
    if nearby:
        return nearby[0][0]
    return neighbors(world, ego, math.inf)[0][0]


def distance_reward(p_av0, p_agent0, p_av, p_agent) -> float:
    """Normalized approach: clip((d0 - d) / d0, -1, 1).

    Raises:
        DomainError: If the initial separation is zero.
    """
    d0 = float(np.linalg.norm(np.asarray(p_av0, dtype=np.float64) - np.asarray(p_agent0, dtype=np.float64)))
    if d0 == 0.0:
        raise DomainError("Initial separation between agent and AV under test is zero; cannot normalize")
    d = float(np.linalg.norm(np.asarray(p_av, dtype=np.float64) - np.asarray(p_agent, dtype=np.float64)))
    return float(np.clip((d0 - d) / d0, -1.0, 1.0))


def collision_reward(events: Iterable[CollisionEvent], agent: int, av: int) -> int:
    """+1 for an agent/AV collision, -1 for an agent collision with anyone else, else 0."""
    hit_other = False
    for event in events:
        if set(event.ids) == {agent, av}:
            return 1
        if event.involves(agent):
            hit_other = True
    return -1 if hit_other else 0


def adversarial_reward(r_d: float, r_c: float) -> float:
    return r_d + r_c


def naturalness_from_kl(kl: float, kl_bound: float) -> float:
    return float(np.clip((kl_bound - kl) / kl_bound, 0.0, 1.0))


def naturalness_reward(prior: GaussianPolicy, policy: GaussianPolicy, prior_obs, obs, kl_bound: float = 25.0) -> float:
    """clip((M - KL(prior || policy)) / M, 0, 1) at one state.

    The prior reads its own feature vector of the state, the policy reads
    the adversarial one; the KL compares their action Gaussians.
    """
    p = prior.distribution(prior_obs)
    q = policy.distribution(obs)
    return naturalness_from_kl(diag_gaussian_kl(p.mean, p.var, q.mean, q.var), kl_bound)


def total_reward(r_adv: float, r_nat: float, balance: float) -> float:
    if balance == 0:
        return r_adv
    return r_adv + balance * r_nat


def adv_state_features(world: WorldState, agent: int, av: int) -> np.ndarray:
    """Relative features of the AV seen from the agent, then the agent's lane
    offset, lateral speed, longitudinal speed, steering and the AV's speed."""
    me = world.vehicle(agent)
    target = world.vehicle(av)
    offset, lane_heading, _ = lane_frame_offset(world, agent)
    rel = wrap_angle(me.heading - lane_heading)
    own = [offset, me.speed * math.sin(rel), me.speed * math.cos(rel), me.steering, target.speed]
    return np.concatenate([relative_features(me, target), own])


class SurrogateTrafficEnv:
    """Agent under PPO control; all other vehicles, the AV under test
    included, are driven by the surrogate IDM + MOBIL driver.

    The step reward is total_reward. `policy` must reference the agent's
    actor for the naturalness term; without a prior R_nat is reported as 0.
    """

    obs_dim = ADV_STATE_DIM
    action_dim = 2

    def __init__(self, scene: SceneConfig = SceneConfig(), driver: Optional[SurrogateDriver] = None,
                 prior: Optional[GaussianPolicy] = None, reward: AdvRewardConfig = AdvRewardConfig(),
                 cfg: SimConfig = SimConfig(), bounds: ActionBounds = ADVERSARIAL_BOUNDS,
                 features: GailFeatureSpec = DEFAULT_FEATURES):
        self.scene = scene
        self.road = scene_road(scene)
        self.driver = driver or SurrogateDriver()
        self.prior = prior
        self.reward = reward
        self.cfg = cfg
        self.bounds = bounds
        self.features = features
        self.action_low = bounds.low
        self.action_high = bounds.high
        self.policy: Optional[GaussianPolicy] = None
        self.world: Optional[WorldState] = None
        self.agent = self.av = -1
        self._p0: Tuple[np.ndarray, np.ndarray] = (np.zeros(2), np.zeros(2))
        self._obs = np.zeros(ADV_STATE_DIM)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.world = build_scene(self.scene, rng, self.road)
        self.driver.reset()
        self.agent = int(self.world.ids[int(rng.integers(len(self.world.ids)))])
        self.av = select_av_under_test(self.world, self.agent)
        self._p0 = (self.world.vehicle(self.av).position, self.world.vehicle(self.agent).position)
        self._obs = adv_state_features(self.world, self.agent, self.av)
        return self._obs

    def naturalness(self) -> float:
        if self.prior is None or self.policy is None:
            return 0.0
        prior_obs = gail_state_features(self.world, self.agent, self.features)
        return naturalness_reward(self.prior, self.policy, prior_obs, self._obs, self.reward.kl_bound)

    def step(self, action: np.ndarray) -> StepResult:
        assert self.world is not None, "reset() must be called before step()"
        r_nat = self.naturalness()
        others = [vid for vid in self.world.ids if vid != self.agent]
        controls = self.driver.controls(self.world, others)
        applied = ControlAction.from_array(action, self.bounds)
        controls[self.agent] = applied
        self.world, events = step_world(self.world, controls, self.cfg)

        av, me = self.world.vehicle(self.av), self.world.vehicle(self.agent)
        r_d = distance_reward(self._p0[0], self._p0[1], av.position, me.position)
        r_c = collision_reward(events, self.agent, self.av)
        r_adv = adversarial_reward(r_d, r_c)
        r_total = total_reward(r_adv, r_nat, self.reward.balance)
        reason = episode_done(self.world, self.agent, events, self.cfg)
        self._obs = adv_state_features(self.world, self.agent, self.av)
        info = {
            "r_d": r_d, "r_c": r_c, "r_adv": r_adv, "r_nat": r_nat, "r_total": r_total,
            "action": (applied.acceleration, applied.steering),
            "events": events,
            "termination": None if reason is None else reason.value,
        }
        return StepResult(self._obs, r_total, reason is not None, info)


@dataclass
class AdversarialResult:
    agent: PpoAgent
    curves: pd.DataFrame


def train_adversarial(env: SurrogateTrafficEnv, cfg: TrainingConfig, seed: int = 0,
                      episodes: Optional[int] = None) -> AdversarialResult:
    """PPO on total_reward; logs mean R_adv and R_nat per episode.

    A zero-episode budget returns the initial policy.
    """
    rng = np.random.default_rng(seed)
    agent = PpoAgent.create(env.obs_dim, env.action_dim, cfg, rng, ADV_INPUT_SCALE)
    env.policy = agent.actor
    episodes = cfg.max_episodes if episodes is None else episodes
    rows = []
    with progress.track("Adversarial training", total=episodes) as bar:
        for episode in range(episodes):
            buffer = collect_rollouts(env, agent, cfg.batch_size, rng)
            r_adv = np.array([info["r_adv"] for info in buffer.infos])
            r_nat = np.array([info["r_nat"] for info in buffer.infos])
            ends = [info for info in buffer.infos if info["termination"] is not None]
            hits = sum(1 for info in ends if info["r_c"] == 1)
            row = {
                "episode": episode,
                "mean_r_adv": float(r_adv.mean()),
                "mean_r_nat": float(r_nat.mean()),
                "mean_reward": float(np.mean(buffer.rewards)),
                "collision_rate_av": hits / len(ends) if ends else 0.0,
            }
            stats = ppo_update(agent, buffer, cfg, rng)
            row.update(actor_loss=stats.actor_loss, critic_loss=stats.critic_loss, mean_kl=stats.mean_kl)
            rows.append(row)
            bar.update(episode + 1, r_adv=row["mean_r_adv"])
            logger.info("Adversarial episode %d: mean R_adv %.4f, mean R_nat %.4f, AV collision rate %.3f",
                        episode, row["mean_r_adv"], row["mean_r_nat"], row["collision_rate_av"])
    return AdversarialResult(agent, pd.DataFrame(rows, columns=CURVE_COLUMNS))


@dataclass
class ScenarioRecord:
    """One generated run: snapshots (initial state first), per-step rewards and actions."""

    run: int
    seed: int
    agent_id: int
    av_id: int
    snapshots: List[List[Dict[str, Any]]]
    rewards: List[Dict[str, float]]
    actions: List[Tuple[float, float]]
    termination: Optional[str]
    collisions: List[CollisionEvent] = field(default_factory=list)

    def __post_init__(self):
        if len(self.rewards) != len(self.actions) or len(self.snapshots) != len(self.rewards) + 1:
            raise DomainError(
                f"Scenario run {self.run}: {len(self.rewards)} reward(s), {len(self.actions)} action(s) "
                f"and {len(self.snapshots)} snapshot(s) do not line up"
            )

    @property
    def steps(self) -> int:
        return len(self.rewards)

    @property
    def collided_with_av(self) -> bool:
        return any(set(e.ids) == {self.agent_id, self.av_id} for e in self.collisions)

    @property
    def collided_with_other(self) -> bool:
        return any(e.involves(self.agent_id) and not e.involves(self.av_id) for e in self.collisions)

    def role_of(self, vehicle_id: int) -> str:
        if vehicle_id == self.agent_id:
            return "agent"
        return "av" if vehicle_id == self.av_id else "background"

    def role_controls(self) -> pd.DataFrame:
        """Applied (accel, steering) per vehicle and step, with the vehicle's role."""
        rows = [
            {"step": row["step"], "id": row["id"], "role": self.role_of(row["id"]),
             "accel": row["accel"], "steering": row["steering"]}
            for snapshot in self.snapshots[1:] for row in snapshot
        ]
        return pd.DataFrame(rows, columns=["step", "id", "role", "accel", "steering"])

    def agent_lanes(self) -> List[Optional[int]]:
        return [row["lane"] for snapshot in self.snapshots for row in snapshot if row["id"] == self.agent_id]

    def to_lines(self) -> List[str]:
        """JSON lines: step 0 holds the initial snapshot, later lines one step each."""
        head = {"run": self.run, "seed": self.seed, "agent": self.agent_id, "av": self.av_id}
        events_by_step: Dict[int, List[dict]] = {}
        for event in self.collisions:
            events_by_step.setdefault(event.step_index, []).append(event.to_dict())
        lines = [json.dumps({**head, "step": 0, "vehicles": self.snapshots[0], "rewards": None,
                             "action": None, "events": [], "termination": None}, sort_keys=True)]
        for t in range(1, self.steps + 1):
            lines.append(json.dumps({
                **head, "step": t, "vehicles": self.snapshots[t], "rewards": self.rewards[t - 1],
                "action": list(self.actions[t - 1]), "events": events_by_step.get(t, []),
                "termination": self.termination if t == self.steps else None,
            }, sort_keys=True))
        return lines

    @classmethod
    def from_lines(cls, rows: Sequence[Dict[str, Any]]) -> "ScenarioRecord":
        rows = sorted(rows, key=lambda r: r["step"])
        head = rows[0]
        return cls(
            run=int(head["run"]), seed=int(head["seed"]), agent_id=int(head["agent"]), av_id=int(head["av"]),
            snapshots=[r["vehicles"] for r in rows],
            rewards=[r["rewards"] for r in rows[1:]],
            actions=[tuple(r["action"]) for r in rows[1:]],
            termination=rows[-1]["termination"],
            collisions=[CollisionEvent.from_dict(e) for r in rows for e in r["events"]],
        )

    def summary(self) -> Dict[str, Any]:
        return {
            "run": self.run, "seed": self.seed, "agent": self.agent_id, "av": self.av_id,
            "steps": self.steps, "termination": self.termination,
            "collided_with_av": self.collided_with_av, "collided_with_other": self.collided_with_other,
            "collisions": len(self.collisions),
        }


def group_scenario_lines(rows: Iterable[Dict[str, Any]]) -> List[ScenarioRecord]:
    runs: Dict[int, List[Dict[str, Any]]] = {}
    for row in rows:
        runs.setdefault(int(row["run"]), []).append(row)
    return [ScenarioRecord.from_lines(runs[k]) for k in sorted(runs)]


def run_scenario(policy: GaussianPolicy, env: SurrogateTrafficEnv, run: int, seed: int) -> ScenarioRecord:
    """One seeded rollout of the agent's stochastic policy."""
    rng = np.random.default_rng(seed)
    env.policy = policy
    obs = env.reset(rng)
    snapshots = [log_rows(env.world)]
    rewards, actions, collisions = [], [], []
    termination = None
    while termination is None:
        action, _ = policy.act(obs, rng)
        result = env.step(np.clip(action, env.action_low, env.action_high))
        snapshots.append(log_rows(env.world))
        info = result.info
        rewards.append({k: float(info[k]) for k in ("r_d", "r_c", "r_adv", "r_nat", "r_total")})
        actions.append(tuple(float(a) for a in info["action"]))
        collisions.extend(info["events"])
        termination = info["termination"]
        obs = result.obs
    return ScenarioRecord(run, seed, env.agent, env.av, snapshots, rewards, actions, termination, collisions)


def _run_chunk(args: Tuple[GaussianPolicy, SurrogateTrafficEnv, List[Tuple[int, int]]]) -> List[ScenarioRecord]:
    policy, env, jobs = args
    return [run_scenario(policy, env, run, seed) for run, seed in jobs]


def generate_scenarios(policy: Union[GaussianPolicy, PpoAgent], env: SurrogateTrafficEnv, n_runs: int,
                       seed: int = 0, workers: int = 1) -> List[ScenarioRecord]:
    """n_runs seeded runs; run i uses the i-th seed drawn from SeedSequence(seed).

    Records do not depend on the worker count.

    Raises:
        DomainError: If n_runs is less than 1.
    """
    if n_runs < 1:
        raise DomainError(f"n_runs must be at least 1, got {n_runs}")
    if isinstance(policy, PpoAgent):
        policy = policy.actor
    seeds = np.random.SeedSequence(seed).generate_state(n_runs)
    jobs = [(i, int(s)) for i, s in enumerate(seeds)]
    records: List[ScenarioRecord] = []
    with progress.track("Scenario generation", total=n_runs) as bar:
        if workers <= 1:
            for run, run_seed in jobs:
                records.append(run_scenario(policy, env, run, run_seed))
                bar.update(run + 1)
        else:
            chunks = [jobs[i::workers] for i in range(workers)]
            with ProcessPoolExecutor(workers) as pool:
                for part in pool.map(_run_chunk, [(policy, env, c) for c in chunks if c]):
                    records.extend(part)
                    bar.update(len(records))
            records.sort(key=lambda r: r.run)
    hits = sum(r.collided_with_av for r in records)
    logger.info("Generated %d scenario(s); %d ended in an agent/AV collision", len(records), hits)
    return records
