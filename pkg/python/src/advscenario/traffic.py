"""Surrogate traffic: IDM + MOBIL background drivers and scene construction.

A SurrogateDriver produces ControlActions for any set of vehicles in a
WorldState: IDM for the longitudinal command, MOBIL for lane choice and a
cross-track/heading-error law for steering toward the chosen lane.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional

import numpy as np

from .driver_models import (
    GAP_FLOOR,
    IdmParameters,
    LaneDecision,
    LaneFrame,
    MobilParameters,
    free_road_acceleration,
    idm_acceleration,
    mobil_decide,
)
from .errors import ConfigError
from .kernel import EXPERT_BOUNDS, ActionBounds, ControlAction, VehicleState, WorldState, wrap_angle
from .roads import ROAD_PRESETS, RoadNetwork, straight_road

logger = logging.getLogger(__name__)


@dataclass
class SurrogateDriver:
    """Rule-based controller for background vehicles and the AV under test.

    Lane decisions are re-evaluated every `decision_interval` steps for a
    vehicle that is settled in its target lane.
    """

    idm: IdmParameters = field(default_factory=IdmParameters)
    mobil: MobilParameters = field(default_factory=MobilParameters)
    decision_interval: int = 10
    cross_track_gain: float = 0.4
    bounds: ActionBounds = EXPERT_BOUNDS
    targets: Dict[int, int] = field(default_factory=dict)

    def reset(self) -> None:
        self.targets.clear()

    def controls(self, world: WorldState, vehicle_ids: Iterable[int]) -> Dict[int, ControlAction]:
        frame = LaneFrame(world)
        return {vid: self.control(world, vid, frame) for vid in vehicle_ids}

    def control(self, world: WorldState, vehicle_id: int, frame: Optional[LaneFrame] = None) -> ControlAction:
        vehicle = world.vehicle(vehicle_id)
        road = world.road
        if road is None:
            return ControlAction(free_road_acceleration(self.idm, vehicle.speed), 0.0).clamp(self.bounds)
        frame = frame or LaneFrame(world)
        current = vehicle.lane if vehicle.lane is not None else road.locate(vehicle.x, vehicle.y).lane_id
        target = self.targets.get(vehicle_id, current)
        if not road.has_lane(target):
            target = current

        settled = target == current and abs(road.lane(current).project(vehicle.x, vehicle.y)[1]) < 0.3
        if settled and vehicle.lane is not None and world.step_index % self.decision_interval == 0:
            decision = mobil_decide(world, vehicle_id, self.mobil, self.idm, frame)
            left, right = road.adjacent(current)
            if decision is LaneDecision.CHANGE_LEFT and left is not None:
                target = left
            elif decision is LaneDecision.CHANGE_RIGHT and right is not None:
                target = right
            if target != current:
                logger.debug("Vehicle %d: MOBIL %s at step %d", vehicle_id, decision.value, world.step_index)
        self.targets[vehicle_id] = target

        accel = self._follow(frame, vehicle, current)
        if target != current:
            accel = min(accel, self._follow(frame, vehicle, target))
        steering = self._steer(road, vehicle, target)
        return ControlAction(accel, steering).clamp(self.bounds)

    def _follow(self, frame: LaneFrame, vehicle: VehicleState, lane_id: int) -> float:
        s = frame.s(vehicle.id, lane_id)
        ahead, _ = frame.neighbours(lane_id, s, vehicle.id)
        if ahead is None:
            return float(free_road_acceleration(self.idm, vehicle.speed))
        lead, s_lead = ahead
        gap = s_lead - s - 0.5 * (lead.length + vehicle.length)
        return float(idm_acceleration(self.idm, vehicle.speed, vehicle.speed - lead.speed, max(gap, GAP_FLOOR)))

    def _steer(self, road: RoadNetwork, vehicle: VehicleState, lane_id: int) -> float:
        _, offset, lane_heading = road.lane(lane_id).project(vehicle.x, vehicle.y)
        heading_error = wrap_angle(lane_heading - vehicle.heading)
        return heading_error + math.atan2(-self.cross_track_gain * offset, vehicle.speed + 1.0)


@dataclass(frozen=True)
class SceneConfig:
    """Seeded multi-lane platoon scene for the surrogate traffic environment."""

    road: str = "straight"
    n_lanes: int = 3
    length: float = 600.0
    vehicles_per_lane: int = 3
    spacing: float = 25.0
    spacing_jitter: float = 5.0
    speed: float = 10.0
    speed_jitter: float = 1.0
    start_s: float = 60.0
    vehicle_length: float = 5.0
    vehicle_width: float = 2.0

    def __post_init__(self):
        if self.road != "straight" and self.road not in ROAD_PRESETS:
            raise ConfigError("scene.road", f"unknown road '{self.road}'; use 'straight' or one of {sorted(ROAD_PRESETS)}")
        if self.n_lanes < 1 or self.vehicles_per_lane < 1:
            raise ConfigError("scene", "n_lanes and vehicles_per_lane must be at least 1")


def scene_road(cfg: SceneConfig) -> RoadNetwork:
    if cfg.road == "straight":
        return straight_road(cfg.n_lanes, cfg.length)
    return ROAD_PRESETS[cfg.road]()


def build_scene(cfg: SceneConfig, rng: np.random.Generator, road: Optional[RoadNetwork] = None) -> WorldState:
    """Place platoons on the first n_lanes lanes with jittered gaps and speeds.

    Vehicle ids are 1-based, numbered lane by lane from the front.
    """
    road = road or scene_road(cfg)
    vehicles = []
    next_id = 1
    for lane_id in road.lane_ids[:cfg.n_lanes]:
        lane = road.lane(lane_id)
        s = cfg.start_s + cfg.spacing * (cfg.vehicles_per_lane - 1) + rng.uniform(0, cfg.spacing_jitter)
        for _ in range(cfg.vehicles_per_lane):
            x, y, heading = lane.pose(min(s, lane.length), 0.0)
            speed = max(cfg.speed + rng.normal(0.0, cfg.speed_jitter), 0.0)
            vehicles.append(VehicleState(next_id, x, y, heading, speed, cfg.vehicle_length, cfg.vehicle_width))
            next_id += 1
            s -= cfg.spacing + rng.uniform(-cfg.spacing_jitter, cfg.spacing_jitter) / 2
    return WorldState.initial(vehicles, road, int(rng.integers(2 ** 31)))
