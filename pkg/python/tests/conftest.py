"""Shared pytest fixtures and utilities for advscenario tests."""

from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pytest

from advscenario.kernel import VehicleState, WorldState
from advscenario.roads import RoadNetwork, straight_road
from advscenario.synthetic import SynthConfig, generate_corpus

TEST_DATA = Path(__file__).resolve().parents[2] / "test_data"


def datafile(filename: str) -> Path:
    """Path of a file in the test_data directory.

    Args:
        filename: Name of the file in test_data directory

    Returns:
        Absolute path to the file
    """
    return TEST_DATA / filename


def vehicle(id: int, x: float, y: float, heading: float = 0.0, speed: float = 10.0,
            lane: Optional[int] = None, **kwargs) -> VehicleState:
    """A 5 x 2 m car unless overridden."""
    return VehicleState(id=id, x=x, y=y, heading=heading, speed=speed, lane=lane, **kwargs)


def lane_center_y(lane_id: int, width: float = 3.7) -> float:
    """Centerline y of a lane on a heading-0 straight road."""
    return -width * (lane_id - 1)


def straight_world(vehicles: Sequence[VehicleState], n_lanes: int = 3, length: float = 600.0) -> WorldState:
    """World at step 0 on a straight heading-0 road, lanes located."""
    return WorldState.initial(vehicles, straight_road(n_lanes, length))


@pytest.fixture
def road() -> RoadNetwork:
    return straight_road(3, 600.0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    """Two lanes of platoons for 20 s with one lane change."""
    return generate_corpus(SynthConfig(lanes=(1, 2), vehicles_per_lane=4, duration_s=20.0,
                                       lane_changes=1, seed=7))
