"""Tests for the naturalness ablation."""

import pytest

from advscenario.adversarial import AdvRewardConfig
from advscenario.errors import DomainError
from advscenario.experiments import naturalness_ablation
from advscenario.gail import DEFAULT_FEATURES
from advscenario.neural import GaussianPolicy
from advscenario.ppo import TrainingConfig
from advscenario.traffic import SceneConfig, SurrogateDriver

SCENE = SceneConfig(n_lanes=2, vehicles_per_lane=2)
TINY = TrainingConfig(batch_size=32, minibatch_size=16, epochs=1, hidden=(8,), max_episodes=1)


def gentle_prior(rng, hidden=(8,)) -> GaussianPolicy:
    return GaussianPolicy(56, 2, hidden=hidden, rng=rng, init_logvar=-2.0,
                          input_scale=DEFAULT_FEATURES.input_scale())


class TestNaturalnessAblation:
    """Test the paired balance-0 and balance-positive runs."""

    def test_needs_positive_balance(self, rng):
        """Test that a zero balance leaves nothing to compare and raises DomainError."""
        with pytest.raises(DomainError, match="balance"):
            naturalness_ablation(gentle_prior(rng), SurrogateDriver(), TINY, SCENE,
                                 AdvRewardConfig(balance=0.0), episodes=1, eval_runs=1)

    @pytest.mark.timeout(300)
    def test_table_and_summary(self, rng):
        """Test that a short ablation reports one row per balance and a side-by-side summary."""
        result = naturalness_ablation(gentle_prior(rng), SurrogateDriver(), TINY, SCENE,
                                      AdvRewardConfig(balance=0.02), episodes=1, eval_runs=2)
        table = result.table()
        assert table["balance"].tolist() == [0.0, 0.02]
        assert {"collision_rate_av", "mean_r_nat", "accel_min", "steering_max"} <= set(table.columns)
        assert sorted(result.curves) == [0.0, 0.02]
        assert "balance=0.02" in result.summary()
        assert isinstance(result.directional(), bool)

    @pytest.mark.slow
    @pytest.mark.timeout(1800)
    def test_naturalness_narrows_actions(self, rng):
        """Test that the naturalness reward narrows action ranges and raises R_nat while the AV is still hit."""
        cfg = TrainingConfig(batch_size=512, minibatch_size=128, epochs=4, hidden=(32, 32), max_episodes=150)
        result = naturalness_ablation(gentle_prior(rng, hidden=(32, 32)), SurrogateDriver(), cfg, SCENE,
                                      AdvRewardConfig(balance=0.02), episodes=150, eval_runs=100)
        assert result.directional(), result.summary()
