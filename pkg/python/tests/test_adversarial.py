"""Tests for adversarial rewards, AV selection, the surrogate environment and scenario records."""

import json

import numpy as np
import pytest

from advscenario.adversarial import (
    ADV_STATE_DIM,
    CURVE_COLUMNS,
    AdvRewardConfig,
    ScenarioRecord,
    SurrogateTrafficEnv,
    collision_reward,
    distance_reward,
    generate_scenarios,
    group_scenario_lines,
    naturalness_from_kl,
    naturalness_reward,
    run_scenario,
    select_av_under_test,
    total_reward,
    train_adversarial,
)
from advscenario.errors import DomainError
from advscenario.kernel import SimConfig, detect_collision
from advscenario.neural import GaussianPolicy
from advscenario.ppo import PpoAgent, TrainingConfig
from advscenario.traffic import SceneConfig
from conftest import lane_center_y, straight_world, vehicle

SMALL_SCENE = SceneConfig(n_lanes=2, vehicles_per_lane=2)
SHORT = SimConfig(horizon_steps=15)


def small_env(**kwargs) -> SurrogateTrafficEnv:
    return SurrogateTrafficEnv(SMALL_SCENE, cfg=SHORT, **kwargs)


class TestRewards:
    """Test the distance, collision, naturalness and total rewards."""

    def test_distance_reward(self):
        """Test halving the separation and the clip at -1."""
        assert distance_reward((0, 0), (10, 0), (0, 0), (5, 0)) == pytest.approx(0.5)
        assert distance_reward((0, 0), (10, 0), (0, 0), (40, 0)) == -1.0
        assert distance_reward((0, 0), (10, 0), (3, 4), (3, 4)) == 1.0

    def test_distance_reward_zero_start(self):
        """Test that a zero initial separation raises DomainError."""
        with pytest.raises(DomainError, match="zero"):
            distance_reward((1, 1), (1, 1), (0, 0), (5, 0))

    def test_collision_reward(self):
        """Test +1 for hitting the AV, -1 for hitting anyone else and 0 otherwise."""
        agent, av, other = vehicle(1, 0.0, 0.0), vehicle(2, 4.0, 0.0), vehicle(3, -4.0, 0.0)
        hit_av = detect_collision(agent, av, 1)
        hit_other = detect_collision(other, agent, 1)
        assert collision_reward([hit_av], 1, 2) == 1
        assert collision_reward([hit_other], 1, 2) == -1
        assert collision_reward([hit_other, hit_av], 1, 2) == 1
        bystanders = detect_collision(av, vehicle(4, 7.0, 0.0), 1)
        assert collision_reward([bystanders], 1, 2) == 0
        assert collision_reward([], 1, 2) == 0

    @pytest.mark.parametrize("kl, expected", [(0.0, 1.0), (12.5, 0.5), (25.0, 0.0), (40.0, 0.0)])
    def test_naturalness_from_kl(self, kl, expected):
        """Test clip((M - KL) / M, 0, 1) with M = 25."""
        assert naturalness_from_kl(kl, 25.0) == pytest.approx(expected)

    def test_naturalness_of_identical_policies(self, rng):
        """Test that a policy identical to the prior is fully natural."""
        prior = GaussianPolicy(3, 2, hidden=(4,), rng=rng)
        obs = rng.normal(size=3)
        assert naturalness_reward(prior, prior.copy(), obs, obs) == pytest.approx(1.0)

    def test_total_reward(self):
        """Test the balance factor."""
        assert total_reward(0.5, 1.0, 0.02) == pytest.approx(0.52)
        assert total_reward(-0.3, 0.9, 0.0) == -0.3

    def test_reward_config_domain(self):
        """Test that a non-positive KL bound or a negative balance raise DomainError."""
        with pytest.raises(DomainError):
            AdvRewardConfig(kl_bound=0.0)
        with pytest.raises(DomainError):
            AdvRewardConfig(balance=-0.1)


class TestAvSelection:
    """Test choosing the AV under test."""

    def test_prefers_same_or_adjacent_lane(self):
        """Test that a farther vehicle in an adjacent lane beats a nearer one two lanes over."""
        world = straight_world([
            vehicle(1, 100.0, lane_center_y(1)),
            vehicle(2, 101.0, lane_center_y(3)),
            vehicle(3, 130.0, lane_center_y(2)),
        ])
        assert select_av_under_test(world, 1) == 3

    def test_falls_back_to_any_lane(self):
        """Test the fallback to the nearest vehicle within the radius."""
        world = straight_world([vehicle(1, 100.0, lane_center_y(1)), vehicle(2, 101.0, lane_center_y(3))])
        assert select_av_under_test(world, 1) == 2

    def test_falls_back_to_nearest_overall(self):
        """Test the fallback when nobody is within the radius."""
        world = straight_world([vehicle(1, 100.0, 0.0), vehicle(2, 300.0, 0.0), vehicle(3, 400.0, 0.0)])
        assert select_av_under_test(world, 1) == 2

    def test_needs_two_vehicles(self):
        """Test that a lone vehicle raises DomainError."""
        with pytest.raises(DomainError):
            select_av_under_test(straight_world([vehicle(1, 100.0, 0.0)]), 1)


class TestSurrogateEnv:
    """Test the adversarial training environment."""

    def test_reset_and_step(self, rng):
        """Test observation width, roles and the reward breakdown of one step."""
        env = small_env()
        obs = env.reset(rng)
        assert obs.shape == (ADV_STATE_DIM,)
        assert env.agent != env.av
        result = env.step(np.array([0.0, 0.0]))
        info = result.info
        assert {"r_d", "r_c", "r_adv", "r_nat", "r_total", "action", "events", "termination"} <= set(info)
        assert info["r_adv"] == pytest.approx(info["r_d"] + info["r_c"])
        assert info["r_nat"] == 0.0
        assert result.reward == info["r_total"]
        assert env.world.step_index == 1

    def test_action_is_clamped(self, rng):
        """Test that the applied action respects the adversarial bounds."""
        env = small_env()
        env.reset(rng)
        info = env.step(np.array([100.0, -10.0])).info
        assert info["action"][0] == pytest.approx(12.0)
        assert info["action"][1] == pytest.approx(-np.pi)

    def test_naturalness_with_prior(self, rng):
        """Test that a prior turns on a naturalness reward in [0, 1]."""
        env = small_env(prior=GaussianPolicy(56, 2, hidden=(8,), rng=rng))
        env.policy = GaussianPolicy(ADV_STATE_DIM, 2, hidden=(8,), rng=rng)
        env.reset(rng)
        r_nat = env.step(np.zeros(2)).info["r_nat"]
        assert 0.0 <= r_nat <= 1.0

    @pytest.mark.timeout(300)
    def test_training_curve(self):
        """Test that a short training run logs one row per episode."""
        cfg = TrainingConfig(batch_size=32, minibatch_size=16, epochs=1, hidden=(8,), max_episodes=2)
        result = train_adversarial(small_env(), cfg, seed=1)
        assert list(result.curves.columns) == CURVE_COLUMNS
        assert len(result.curves) == 2
        assert result.curves["collision_rate_av"].between(0, 1).all()


class TestScenarios:
    """Test seeded scenario generation and the JSONL layout."""

    @pytest.fixture
    def policy(self):
        return GaussianPolicy(ADV_STATE_DIM, 2, hidden=(8,), rng=np.random.default_rng(0))

    def test_lines_layout(self, policy):
        """Test that step 0 is the initial snapshot and the last line carries the termination."""
        record = run_scenario(policy, small_env(), run=0, seed=5)
        rows = [json.loads(line) for line in record.to_lines()]
        assert len(rows) == record.steps + 1
        assert rows[0]["step"] == 0
        assert rows[0]["rewards"] is None
        assert rows[0]["action"] is None
        assert rows[-1]["termination"] == record.termination
        assert all(r["termination"] is None for r in rows[:-1])
        assert {v["id"] for v in rows[0]["vehicles"]} == {1, 2, 3, 4}

    def test_lines_round_trip(self, policy):
        """Test that records rebuilt from their lines match the originals."""
        records = [run_scenario(policy, small_env(), run=i, seed=i) for i in range(2)]
        rows = [json.loads(line) for r in records for line in r.to_lines()]
        rebuilt = group_scenario_lines(rows)
        for a, b in zip(records, rebuilt):
            assert a.summary() == b.summary()
            assert a.rewards == b.rewards
            assert a.actions == b.actions
            assert a.snapshots == b.snapshots

    def test_role_controls(self, policy):
        """Test that each step lists every vehicle with its role."""
        record = run_scenario(policy, small_env(), run=0, seed=1)
        frame = record.role_controls()
        assert len(frame) == 4 * record.steps
        assert (frame["role"] == "agent").sum() == record.steps
        assert (frame["role"] == "av").sum() == record.steps
        assert len(record.agent_lanes()) == record.steps + 1

    def test_misaligned_record(self):
        """Test that mismatched snapshots and rewards raise DomainError."""
        with pytest.raises(DomainError, match="line up"):
            ScenarioRecord(0, 0, 1, 2, [[]], [{"r_d": 0.0}], [(0.0, 0.0)], None)

    def test_generation_is_seeded(self, policy, rng):
        """Test that one seed reproduces every run and agents are accepted."""
        a = generate_scenarios(policy, small_env(), 3, seed=8)
        b = generate_scenarios(policy, small_env(), 3, seed=8)
        assert [r.to_lines() for r in a] == [r.to_lines() for r in b]
        assert [r.run for r in a] == [0, 1, 2]
        agent = PpoAgent.create(ADV_STATE_DIM, 2, TrainingConfig(hidden=(8,)), rng)
        agent.actor = policy
        c = generate_scenarios(agent, small_env(), 1, seed=8)
        assert c[0].to_lines() == a[0].to_lines()

    @pytest.mark.slow
    @pytest.mark.timeout(300)
    def test_workers_agree(self, policy):
        """Test that a process pool produces the same records as one process."""
        serial = generate_scenarios(policy, small_env(), 4, seed=2)
        pooled = generate_scenarios(policy, small_env(), 4, seed=2, workers=2)
        assert [r.to_lines() for r in pooled] == [r.to_lines() for r in serial]

    def test_needs_a_run(self, policy):
        """Test that zero runs raise DomainError."""
        with pytest.raises(DomainError):
            generate_scenarios(policy, small_env(), 0)
