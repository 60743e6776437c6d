"""Naturalness ablation: the same seeded scene trained with and without R_nat."""

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

import pandas as pd

from .adversarial import AdvRewardConfig, SurrogateTrafficEnv, generate_scenarios, train_adversarial
from .analysis import MetricsReport, compare_reports, metrics_report
from .errors import DomainError
from .neural import GaussianPolicy
from .ppo import TrainingConfig
from .traffic import SceneConfig, SurrogateDriver

logger = logging.getLogger(__name__)


def _width(r: Optional[Tuple[float, float]]) -> float:
    return float("nan") if r is None else r[1] - r[0]


@dataclass
class AblationResult:
    reports: Dict[float, MetricsReport]
    curves: Dict[float, pd.DataFrame]

    def table(self) -> pd.DataFrame:
        rows = []
        for balance, report in sorted(self.reports.items()):
            agent = report.ranges.get("agent", {})
            rows.append({
                "balance": balance,
                "collision_rate_av": report.collision_rate_av,
                "collision_rate_other": report.collision_rate_other,
                "mean_r_nat": report.mean_r_nat,
                "accel_min": agent.get("accel", (float("nan"),) * 2)[0],
                "accel_max": agent.get("accel", (float("nan"),) * 2)[1],
                "steering_min": agent.get("steering", (float("nan"),) * 2)[0],
                "steering_max": agent.get("steering", (float("nan"),) * 2)[1],
            })
        return pd.DataFrame(rows)

    def directional(self) -> bool:
        """Naturalness narrows both agent action ranges and raises mean R_nat,
        while both agents still reach the AV under test."""
        (_, base), (_, natural) = sorted(self.reports.items())[:2]
        base_r, nat_r = base.ranges.get("agent", {}), natural.ranges.get("agent", {})
        narrower = all(_width(nat_r.get(q)) < _width(base_r.get(q)) for q in ("accel", "steering"))
        return bool(narrower and natural.mean_r_nat > base.mean_r_nat
                    and base.collision_rate_av > 0 and natural.collision_rate_av > 0)

    def summary(self) -> str:
        (b0, base), (b1, natural) = sorted(self.reports.items())[:2]
        return compare_reports(natural, base, names=(f"balance={b1:g}", f"balance={b0:g}"))


def naturalness_ablation(
    prior: GaussianPolicy,
    driver: SurrogateDriver,
    cfg: TrainingConfig,
    scene: SceneConfig = SceneConfig(),
    reward: AdvRewardConfig = AdvRewardConfig(),
    episodes: int = 150,
    eval_runs: int = 100,
    seed: int = 0,
    workers: int = 1,
) -> AblationResult:
    """Train and evaluate a balance-0 agent and one at the configured balance.

    Both use the same scene, prior, training seed and evaluation seeds.

    Raises:
        DomainError: If the configured balance is zero.
    """
    if reward.balance == 0:
        raise DomainError("The naturalness ablation needs a positive reward.balance to compare against 0")
    balances: List[float] = [0.0, reward.balance]
    reports: Dict[float, MetricsReport] = {}
    curves: Dict[float, pd.DataFrame] = {}
    for balance in balances:
        env = SurrogateTrafficEnv(scene, replace(driver, targets={}), prior, replace(reward, balance=balance))
        result = train_adversarial(env, cfg, seed=seed, episodes=episodes)
        records = generate_scenarios(result.agent, env, eval_runs, seed=seed + 1, workers=workers)
        reports[balance] = metrics_report(records)
        curves[balance] = result.curves
        logger.info("Ablation balance=%g: AV collision rate %.3f, mean R_nat %.4f",
                    balance, reports[balance].collision_rate_av, reports[balance].mean_r_nat)
    return AblationResult(reports, curves)
