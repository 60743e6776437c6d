"""Synthetic trajectory corpus.

Stands in for the NGSIM/INTERACTION recordings in tests and in the
`synth-data` command: IDM platoons on parallel straight lanes, with scripted
platoon heads, scheduled lane changes following a cosine lateral profile,
and optional Gaussian position noise. Lane, leader and gap annotations are
exact; the output is deterministic per seed.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .driver_models import GAP_FLOOR, IdmParameters, free_road_acceleration, idm_acceleration
from .ingest import DataSource, Episode, TrajectoryRecord
from .roads import RoadNetwork, us101_like

logger = logging.getLogger(__name__)

CAR_LENGTH = 4.8
TRUCK_LENGTH = 12.0
VEHICLE_WIDTH = 2.0


@dataclass(frozen=True)
class SynthConfig:
    lanes: Tuple[int, ...] = (1, 2, 3, 4)
    vehicles_per_lane: int = 6
    duration_s: float = 60.0
    head_speed: float = 8.0
    head_speed_amplitude: float = 2.0
    head_period_s: float = 20.0
    lane_changes: int = 3
    lane_change_duration_s: float = 4.0
    position_noise_m: float = 0.0
    truck_share: float = 0.0
    dt: float = 0.1
    seed: int = 0
    idm: IdmParameters = field(default_factory=IdmParameters)


@dataclass
class _Vehicle:
    id: int
    lane: int
    s: float
    speed: float
    length: float
    vehicle_class: int
    head: bool
    phase: float
    offset: float = 0.0
    accel: float = 0.0
    # (start time, from lane, to lane) of the active or pending lane change
    change: Optional[Tuple[float, int, int]] = None


def _equilibrium_gap(idm: IdmParameters, v: float) -> float:
    bracket = 1.0 - (v / idm.v_desired) ** idm.delta
    s_star = idm.s0 + v * idm.headway_T
    return s_star / math.sqrt(bracket) if bracket > 0 else 4 * s_star


def generate_corpus(config: SynthConfig = SynthConfig(), road: Optional[RoadNetwork] = None) -> List[Episode]:
    """Simulate the platoons and return one annotated Episode per vehicle.

    Args:
        config: Corpus settings.
        road: Road with straight, parallel lanes sharing a start line.
            Defaults to the US-101-like preset.
    """
    road = road or us101_like()
    rng = np.random.default_rng(config.seed)
    idm = config.idm
    steps = int(round(config.duration_s / config.dt))

    vehicles: List[_Vehicle] = []
    next_id = 1
    for lane in config.lanes:
        s = road.lane(lane).length * 0.25 + rng.uniform(0.0, 10.0)
        v = config.head_speed * rng.uniform(0.9, 1.1)
        for k in range(config.vehicles_per_lane):
            truck = rng.random() < config.truck_share
            length = TRUCK_LENGTH if truck else CAR_LENGTH + rng.uniform(-0.3, 0.3)
            if k > 0:
                lead = vehicles[-1]
                s = lead.s - 0.5 * (lead.length + length) - _equilibrium_gap(idm, v) * rng.uniform(1.0, 1.5)
            vehicles.append(_Vehicle(next_id, lane, s, v, length, 3 if truck else 2, k == 0,
                                     rng.uniform(0, 2 * math.pi)))
            next_id += 1

    _schedule_lane_changes(vehicles, road, config, rng)

    rows: Dict[int, List[TrajectoryRecord]] = {v.id: [] for v in vehicles}
    for step in range(steps):
        t = step * config.dt
        for v in vehicles:
            _update_lateral(v, t, road, config)
        leaders = _leaders(vehicles)
        for v in vehicles:
            lead = leaders.get(v.id)
            gap = None
            if lead is not None:
                gap = lead.s - v.s - 0.5 * (lead.length + v.length)
            if v.head and lead is None:
                omega = 2 * math.pi / config.head_period_s
                target = config.head_speed + config.head_speed_amplitude * math.sin(omega * t + v.phase)
                v.accel = float(np.clip((target - v.speed) / config.dt, -3.0, 2.0))
            elif lead is None:
                v.accel = free_road_acceleration(idm, v.speed)
            else:
                v.accel = idm_acceleration(idm, v.speed, v.speed - lead.speed, max(gap, GAP_FLOOR))
            x, y, _ = road.lane(v.lane).pose(v.s, v.offset)
            rows[v.id].append(TrajectoryRecord(
                vehicle_id=v.id, frame=step + 1, local_x=x, local_y=y,
                speed=v.speed, accel=v.accel, lane_id=v.lane,
                preceding_id=None if lead is None else lead.id,
                space_headway=gap, vehicle_class=v.vehicle_class,
                length=v.length, width=VEHICLE_WIDTH,
            ))
        for v in vehicles:
            v.s += v.speed * config.dt
            v.speed = max(v.speed + v.accel * config.dt, 0.0)

    episodes = []
    for vehicle_id, records in rows.items():
        if config.position_noise_m > 0:
            noise = rng.normal(0.0, config.position_noise_m, size=(len(records), 2))
            records = [
                replace(r, local_x=r.local_x + dx, local_y=r.local_y + dy)
                for r, (dx, dy) in zip(records, noise)
            ]
        episodes.append(Episode(vehicle_id, tuple(records), DataSource.SYNTHETIC))
    logger.info("Generated synthetic corpus: %d vehicle(s), %d frame(s), %d lane change(s)",
                len(episodes), steps, config.lane_changes)
    return episodes


def _schedule_lane_changes(vehicles: List[_Vehicle], road: RoadNetwork, config: SynthConfig,
                           rng: np.random.Generator) -> None:
    candidates = [v for v in vehicles if not v.head]
    rng.shuffle(candidates)
    lanes = set(config.lanes)
    margin = 10.0
    for v in candidates[:config.lane_changes]:
        left, right = road.adjacent(v.lane)
        options = [lane for lane in (left, right) if lane in lanes]
        if not options or config.duration_s <= 2 * margin + config.lane_change_duration_s:
            continue
        start = float(rng.uniform(margin, config.duration_s - margin - config.lane_change_duration_s))
        v.change = (start, v.lane, options[int(rng.integers(len(options)))])


def _update_lateral(v: _Vehicle, t: float, road: RoadNetwork, config: SynthConfig) -> None:
    if v.change is None:
        return
    start, source, target = v.change
    tau = (t - start) / config.lane_change_duration_s
    if tau < 0:
        return
    width = road.lane(source).width
    shift = width if road.adjacent(source)[0] == target else -width
    if tau >= 1:
        v.lane, v.offset, v.change = target, 0.0, None
        return
    offset = shift * 0.5 * (1 - math.cos(math.pi * tau))
    # The lane label switches when the vehicle crosses the boundary.
    if tau >= 0.5:
        v.lane, v.offset = target, offset - shift
    else:
        v.lane, v.offset = source, offset


def _leaders(vehicles: List[_Vehicle]) -> Dict[int, _Vehicle]:
    by_lane: Dict[int, List[_Vehicle]] = {}
    for v in vehicles:
        by_lane.setdefault(v.lane, []).append(v)
    leaders = {}
    for members in by_lane.values():
        members.sort(key=lambda v: (v.s, v.id))
        for behind, ahead in zip(members, members[1:]):
            leaders[behind.id] = ahead
    return leaders
