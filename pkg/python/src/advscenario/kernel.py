"""Deterministic microscopic traffic simulation.

Vehicles follow a kinematic bicycle model integrated with forward Euler.
The world advances all vehicles synchronously, re-locates them on the road
and reports collisions between oriented rectangles as data.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidStateError, VehicleNotFoundError
from .roads import RoadNetwork

logger = logging.getLogger(__name__)

DEFAULT_LENGTH = 5.0
DEFAULT_WIDTH = 2.0


def wrap_angle(angle: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    return math.pi - (math.pi - angle) % (2 * math.pi)


def _check_finite(where: str, **values: float) -> None:
    for name, value in values.items():
        if not math.isfinite(value):
            raise InvalidStateError(f"{where}: {name} must be finite, got {value}")


@dataclass(frozen=True)
class VehicleState:
    """Pose, speed and footprint of one vehicle.

    `acceleration` and `steering` hold the control applied on the step
    that produced this state.
    """

    id: int
    x: float
    y: float
    heading: float
    speed: float
    length: float = DEFAULT_LENGTH
    width: float = DEFAULT_WIDTH
    lane: Optional[int] = None
    acceleration: float = 0.0
    steering: float = 0.0

    def __post_init__(self):
        if not self.length > 0 or not self.width > 0:
            raise InvalidStateError(
                f"vehicle {self.id}: length and width must be positive, got {self.length} x {self.width}"
            )

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def velocity(self) -> np.ndarray:
        return self.speed * np.array([math.cos(self.heading), math.sin(self.heading)])


@dataclass(frozen=True)
class ActionBounds:
    accel_min: float
    accel_max: float
    steer_min: float
    steer_max: float

    def __post_init__(self):
        if self.accel_min > self.accel_max or self.steer_min > self.steer_max:
            raise InvalidStateError(f"action bounds are inverted: {self}")

    def contains(self, action: "ControlAction") -> bool:
        return (self.accel_min <= action.acceleration <= self.accel_max
                and self.steer_min <= action.steering <= self.steer_max)

    @property
    def low(self) -> np.ndarray:
        return np.array([self.accel_min, self.steer_min])

    @property
    def high(self) -> np.ndarray:
        return np.array([self.accel_max, self.steer_max])


EXPERT_BOUNDS = ActionBounds(-5.0, 3.0, -math.pi / 3, math.pi / 3)
ADVERSARIAL_BOUNDS = ActionBounds(-12.0, 12.0, -math.pi, math.pi)


@dataclass(frozen=True)
class ControlAction:
    acceleration: float = 0.0
    steering: float = 0.0

    def __post_init__(self):
        _check_finite("control", acceleration=self.acceleration, steering=self.steering)

    def clamp(self, bounds: ActionBounds) -> "ControlAction":
        return ControlAction(
            float(np.clip(self.acceleration, bounds.accel_min, bounds.accel_max)),
            float(np.clip(self.steering, bounds.steer_min, bounds.steer_max)),
        )

    @classmethod
    def from_array(cls, values: Sequence[float], bounds: Optional[ActionBounds] = None) -> "ControlAction":
        action = cls(float(values[0]), float(values[1]))
        return action.clamp(bounds) if bounds is not None else action


ZERO_ACTION = ControlAction()


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    horizon_steps: int = 100
    offroad_terminates: bool = True
    wheelbase: float = DEFAULT_LENGTH

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidStateError(f"dt must be positive, got {self.dt}")
        if self.horizon_steps <= 0:
            raise InvalidStateError(f"horizon_steps must be positive, got {self.horizon_steps}")
        if not self.wheelbase > 0:
            raise InvalidStateError(f"wheelbase must be positive, got {self.wheelbase}")


@dataclass(frozen=True)
class WorldState:
    time: float
    step_index: int
    vehicles: Tuple[VehicleState, ...]
    road: Optional[RoadNetwork] = None
    rng_seed: int = 0
    _index: Dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "vehicles", tuple(self.vehicles))
        index = {v.id: i for i, v in enumerate(self.vehicles)}
        if len(index) != len(self.vehicles):
            ids = [v.id for v in self.vehicles]
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise InvalidStateError(f"vehicle ids must be unique, duplicated: {dupes}")
        object.__setattr__(self, "_index", index)

    @classmethod
    def initial(cls, vehicles: Sequence[VehicleState], road: Optional[RoadNetwork] = None,
                rng_seed: int = 0) -> "WorldState":
        """World at step 0 with lanes located on `road`."""
        if road is not None:
            vehicles = [replace(v, lane=road.lane_at(v.x, v.y)) for v in vehicles]
        return cls(0.0, 0, tuple(vehicles), road, rng_seed)

    @property
    def ids(self) -> Tuple[int, ...]:
        return tuple(self._index)

    def __contains__(self, vehicle_id: int) -> bool:
        return vehicle_id in self._index

    def vehicle(self, vehicle_id: int) -> VehicleState:
        try:
            return self.vehicles[self._index[vehicle_id]]
        except KeyError:
            raise VehicleNotFoundError(vehicle_id) from None

    def with_vehicles(self, vehicles: Sequence[VehicleState]) -> "WorldState":
        return replace(self, vehicles=tuple(vehicles))


class ContactSide(str, Enum):
    FRONT = "front"
    REAR = "rear"
    LEFT = "left"
    RIGHT = "right"


def _rotate(lon: float, lat: float, angle: float) -> Tuple[float, float]:
    c, s = math.cos(angle), math.sin(angle)
    return c * lon - s * lat, s * lon + c * lat


@dataclass(frozen=True)
class CollisionEvent:
    """Geometry of one overlap, expressed in the first vehicle's body frame.

    Relative quantities describe the second vehicle with respect to the
    first: position and velocity are (lateral, longitudinal) with lateral
    left-positive; `relative_heading` is heading_b - heading_a.
    """

    step_index: int
    ids: Tuple[int, int]
    contact_sides: Tuple[ContactSide, ContactSide]
    relative_heading: float
    relative_velocity: Tuple[float, float]
    relative_position: Tuple[float, float]

    def involves(self, vehicle_id: int) -> bool:
        return vehicle_id in self.ids

    def other(self, vehicle_id: int) -> int:
        a, b = self.ids
        return b if vehicle_id == a else a

    def swapped(self) -> "CollisionEvent":
        """The same event seen from the second vehicle."""
        theta = self.relative_heading
        lat, lon = self.relative_position
        vlat, vlon = self.relative_velocity
        plon, plat = _rotate(lon, lat, -theta)
        qlon, qlat = _rotate(vlon, vlat, -theta)
        return CollisionEvent(
            step_index=self.step_index,
            ids=(self.ids[1], self.ids[0]),
            contact_sides=(self.contact_sides[1], self.contact_sides[0]),
            relative_heading=wrap_angle(-theta),
            relative_velocity=(-qlat, -qlon),
            relative_position=(-plat, -plon),
        )

    def features(self) -> np.ndarray:
        """(lat, lon, lat speed, lon speed, relative heading)."""
        return np.array([*self.relative_position, *self.relative_velocity, self.relative_heading])

    def to_dict(self) -> dict:
        return {
            "step_index": self.step_index,
            "ids": list(self.ids),
            "contact_sides": [s.value for s in self.contact_sides],
            "relative_heading": self.relative_heading,
            "relative_velocity": list(self.relative_velocity),
            "relative_position": list(self.relative_position),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "CollisionEvent":
        return cls(
            step_index=int(data["step_index"]),
            ids=(int(data["ids"][0]), int(data["ids"][1])),
            contact_sides=(ContactSide(data["contact_sides"][0]), ContactSide(data["contact_sides"][1])),
            relative_heading=float(data["relative_heading"]),
            relative_velocity=(float(data["relative_velocity"][0]), float(data["relative_velocity"][1])),
            relative_position=(float(data["relative_position"][0]), float(data["relative_position"][1])),
        )


class TerminationReason(str, Enum):
    EGO_COLLISION = "ego-collision"
    OFF_ROAD = "off-road"
    HORIZON = "horizon"


def step_vehicle(state: VehicleState, action: ControlAction, cfg: SimConfig) -> VehicleState:
    """Advance one vehicle by one step of the kinematic bicycle model.

    Raises:
        InvalidStateError: If the state or action contains non-finite values.
    """
    _check_finite(f"vehicle {state.id}", x=state.x, y=state.y, heading=state.heading, speed=state.speed)
    _check_finite(f"vehicle {state.id} control", acceleration=action.acceleration, steering=action.steering)

    beta = math.atan(0.5 * math.tan(action.steering))
    v = state.speed
    x = state.x + v * cfg.dt * math.cos(state.heading + beta)
    y = state.y + v * cfg.dt * math.sin(state.heading + beta)
    heading = state.heading + v * math.sin(beta) / (cfg.wheelbase / 2) * cfg.dt
    speed = max(0.0, v + action.acceleration * cfg.dt)
    return replace(state, x=x, y=y, heading=heading, speed=speed,
                   acceleration=action.acceleration, steering=action.steering)


def steering_for_yaw_rate(yaw_rate: float, speed: float, cfg: SimConfig, min_speed: float = 0.5) -> float:
    """Steering angle that produces `yaw_rate` at `speed` under step_vehicle.

    Returns 0 below `min_speed`; unreachable yaw rates saturate at +-pi/2.
    """
    if speed < min_speed:
        return 0.0
    sin_beta = float(np.clip(yaw_rate * (cfg.wheelbase / 2) / speed, -1.0, 1.0))
    return math.atan(2.0 * math.tan(math.asin(sin_beta)))


def _body_frame(ego: VehicleState, other: VehicleState) -> Tuple[float, float, float, float]:
    """(lat, lon, lat speed, lon speed) of `other` relative to `ego`."""
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    dx, dy = other.x - ego.x, other.y - ego.y
    dvx = other.speed * math.cos(other.heading) - ego.speed * c
    dvy = other.speed * math.sin(other.heading) - ego.speed * s
    return -s * dx + c * dy, c * dx + s * dy, -s * dvx + c * dvy, c * dvx + s * dvy


def relative_features(ego: VehicleState, other: VehicleState) -> np.ndarray:
    """Relative (lat, lon, lat speed, lon speed, steering) of `other` in the ego body frame."""
    lat, lon, vlat, vlon = _body_frame(ego, other)
    return np.array([lat, lon, vlat, vlon, wrap_angle(other.heading - ego.heading)])


def _contact_side(lat: float, lon: float, length: float, width: float) -> ContactSide:
    if abs(lon) / (length / 2) >= abs(lat) / (width / 2):
        return ContactSide.FRONT if lon >= 0 else ContactSide.REAR
    return ContactSide.LEFT if lat > 0 else ContactSide.RIGHT


def _overlaps(a: VehicleState, b: VehicleState) -> bool:
    axes_a = (
        np.array([math.cos(a.heading), math.sin(a.heading)]),
        np.array([-math.sin(a.heading), math.cos(a.heading)]),
    )
    axes_b = (
        np.array([math.cos(b.heading), math.sin(b.heading)]),
        np.array([-math.sin(b.heading), math.cos(b.heading)]),
    )
    half_a = (a.length / 2, a.width / 2)
    half_b = (b.length / 2, b.width / 2)
    d = np.array([b.x - a.x, b.y - a.y])
    for axis in (*axes_a, *axes_b):
        ra = half_a[0] * abs(axis @ axes_a[0]) + half_a[1] * abs(axis @ axes_a[1])
        rb = half_b[0] * abs(axis @ axes_b[0]) + half_b[1] * abs(axis @ axes_b[1])
        if abs(d @ axis) > ra + rb:
            return False
    return True


def detect_collision(a: VehicleState, b: VehicleState, step_index: int = 0) -> Optional[CollisionEvent]:
    """Separating-axis test between the two vehicle footprints.

    Touching rectangles count as a collision.
    """
    reach = math.hypot(a.length, a.width) / 2 + math.hypot(b.length, b.width) / 2
    if math.hypot(b.x - a.x, b.y - a.y) > reach:
        return None
    if not _overlaps(a, b):
        return None
    lat, lon, vlat, vlon = _body_frame(a, b)
    back_lat, back_lon, _, _ = _body_frame(b, a)
    return CollisionEvent(
        step_index=step_index,
        ids=(a.id, b.id),
        contact_sides=(
            _contact_side(lat, lon, a.length, a.width),
            _contact_side(back_lat, back_lon, b.length, b.width),
        ),
        relative_heading=wrap_angle(b.heading - a.heading),
        relative_velocity=(vlat, vlon),
        relative_position=(lat, lon),
    )


def detect_collisions(vehicles: Sequence[VehicleState], step_index: int = 0) -> List[CollisionEvent]:
    """All pairwise collisions, ordered by (lower id, higher id)."""
    ordered = sorted(vehicles, key=lambda v: v.id)
    n = len(ordered)
    if n < 2:
        return []
    xy = np.array([[v.x, v.y] for v in ordered])
    reach = np.array([math.hypot(v.length, v.width) / 2 for v in ordered])
    dist = np.hypot(xy[:, None, 0] - xy[None, :, 0], xy[:, None, 1] - xy[None, :, 1])
    candidates = np.argwhere(np.triu(dist <= reach[:, None] + reach[None, :], k=1))
    events = []
    for i, j in candidates:
        event = detect_collision(ordered[i], ordered[j], step_index)
        if event is not None:
            events.append(event)
    return events


def step_world(
    world: WorldState,
    controls: Mapping[int, ControlAction],
    cfg: SimConfig,
) -> Tuple[WorldState, List[CollisionEvent]]:
    """Advance every vehicle one step and report collisions on the new state.

    Vehicles without a control receive the zero action. Lanes are
    re-located on the road; a vehicle off every lane gets lane None.
    """
    moved = []
    for vehicle in world.vehicles:
        new = step_vehicle(vehicle, controls.get(vehicle.id, ZERO_ACTION), cfg)
        if world.road is not None:
            new = replace(new, lane=world.road.lane_at(new.x, new.y))
        moved.append(new)
    step_index = world.step_index + 1
    events = detect_collisions(moved, step_index)
    if events:
        logger.debug("Step %d: %d collision(s) %s", step_index, len(events), [e.ids for e in events])
    return (
        WorldState(step_index * cfg.dt, step_index, tuple(moved), world.road, world.rng_seed),
        events,
    )


def neighbors(world: WorldState, ego: int, radius: float) -> List[Tuple[int, float]]:
    """Vehicles whose centers lie within `radius` of the ego, nearest first.

    Raises:
        VehicleNotFoundError: If `ego` is not in the world.
    """
    center = world.vehicle(ego)
    found = []
    for v in world.vehicles:
        if v.id == ego:
            continue
        d = math.hypot(v.x - center.x, v.y - center.y)
        if d <= radius:
            found.append((v.id, d))
    found.sort(key=lambda item: (item[1], item[0]))
    return found


def episode_done(
    world: WorldState,
    ego: int,
    events: Sequence[CollisionEvent],
    cfg: SimConfig,
) -> Optional[TerminationReason]:
    """First triggered termination reason for the ego, or None."""
    if any(event.involves(ego) for event in events):
        return TerminationReason.EGO_COLLISION
    if cfg.offroad_terminates and world.vehicle(ego).lane is None:
        return TerminationReason.OFF_ROAD
    if world.step_index >= cfg.horizon_steps:
        return TerminationReason.HORIZON
    return None


def log_rows(world: WorldState) -> List[dict]:
    """Scenario-log rows for the current step, one per vehicle."""
    return [
        {
            "step": world.step_index,
            "id": v.id,
            "x": v.x,
            "y": v.y,
            "heading": v.heading,
            "speed": v.speed,
            "accel": v.acceleration,
            "steering": v.steering,
            "lane": v.lane,
        }
        for v in world.vehicles
    ]
