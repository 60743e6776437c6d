"""advscenario - natural adversarial driving scenario generation.

Calibrated IDM + MOBIL surrogate traffic, a GAIL prior learned from
trajectory data and a PPO adversary rewarded for approaching the AV under
test while staying close to the prior.
"""

import logging
from typing import Union

from . import progress
from .adversarial import (
    AdvRewardConfig,
    ScenarioRecord,
    SurrogateTrafficEnv,
    generate_scenarios,
    select_av_under_test,
    train_adversarial,
)
from .analysis import cluster_label_report, label_collision_type, metrics_report
from .config import RunConfig, config_hash, load_config
from .conversion import to_arrow, to_dict, to_numpy, to_pandas, to_polars, stream_batches
from .errors import AdvScenarioError
from .gail import ExpertBuffer, ReplayTrafficEnv, collect_expert_trajectories, train_gail
from .ingest import Episode, TrajectoryRecord, load_trajectories, parse_trajectories
from .kernel import SimConfig, VehicleState, WorldState, step_world
from .ppo import PpoAgent, TrainingConfig, train_ppo
from .roads import RoadNetwork, build_road, load_road, us101_like

_logger = logging.getLogger("advscenario")
_logger.setLevel(logging.INFO)

# Add handler if none exists (for standalone usage)
if not _logger.handlers:
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(
        '%(levelname)s [%(name)s] %(message)s'
    ))
    _logger.addHandler(handler)


def set_log_level(level: Union[int, str]) -> None:
    """
    Set the logging level for all advscenario modules.

    Args:
        level: logging.DEBUG, logging.INFO, ... or the level name

    Example:
        import logging
        advscenario.set_log_level(logging.DEBUG)
    """
    _logger.setLevel(level.upper() if isinstance(level, str) else level)


__all__ = [
    "AdvRewardConfig",
    "AdvScenarioError",
    "Episode",
    "ExpertBuffer",
    "PpoAgent",
    "ReplayTrafficEnv",
    "RoadNetwork",
    "RunConfig",
    "ScenarioRecord",
    "SimConfig",
    "SurrogateTrafficEnv",
    "TrainingConfig",
    "TrajectoryRecord",
    "VehicleState",
    "WorldState",
    "build_road",
    "cluster_label_report",
    "collect_expert_trajectories",
    "config_hash",
    "generate_scenarios",
    "label_collision_type",
    "load_config",
    "load_road",
    "load_trajectories",
    "metrics_report",
    "parse_trajectories",
    "progress",
    "select_av_under_test",
    "set_log_level",
    "step_world",
    "stream_batches",
    "to_arrow",
    "to_dict",
    "to_numpy",
    "to_pandas",
    "to_polars",
    "train_adversarial",
    "train_gail",
    "train_ppo",
    "us101_like",
]

__version__ = "0.1.0"
