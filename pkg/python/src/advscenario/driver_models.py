"""IDM car following and MOBIL lane changing.

All IDM functions accept scalars or numpy arrays and broadcast.
"""

import logging
import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
import pandas as pd

from .errors import DomainError
from .kernel import VehicleState, WorldState
from .preprocess import CarFollowingSegment, LaneChangeContext

logger = logging.getLogger(__name__)

GAP_FLOOR = 0.01

# Searched IDM parameters, in vector order, with their calibration ranges.
IDM_RANGES: Dict[str, Tuple[float, float]] = {
    "a_max": (0.1, 6.0),
    "v_desired": (1.0, 70.0),
    "s0": (0.1, 8.0),
    "b_comfort": (0.1, 6.0),
    "headway_T": (0.1, 5.0),
}


@dataclass(frozen=True)
class IdmParameters:
    a_max: float = 2.0
    v_desired: float = 10.0
    delta: float = 4.0
    s0: float = 1.0
    b_comfort: float = 1.0
    headway_T: float = 0.5

    def __post_init__(self):
        for name in ("a_max", "v_desired", "s0", "b_comfort", "headway_T"):
            if not getattr(self, name) > 0:
                raise DomainError(f"IDM parameter {name} must be positive, got {getattr(self, name)}")
        if not self.delta >= 1:
            raise DomainError(f"IDM parameter delta must be at least 1, got {self.delta}")

    def to_vector(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in IDM_RANGES])

    @classmethod
    def from_vector(cls, vector, delta: float = 4.0) -> "IdmParameters":
        return cls(delta=delta, **{name: float(v) for name, v in zip(IDM_RANGES, vector)})

    def within_ranges(self) -> bool:
        return all(lo <= getattr(self, name) <= hi for name, (lo, hi) in IDM_RANGES.items())

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MobilParameters:
    politeness_p: float = 0.5
    delta_a_th: float = 0.2
    max_braking_imposed: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.politeness_p <= 1.0:
            raise DomainError(f"MOBIL politeness must lie in [0, 1], got {self.politeness_p}")
        if not self.delta_a_th > 0 or not self.max_braking_imposed > 0:
            raise DomainError(
                f"MOBIL thresholds must be positive, got delta_a_th={self.delta_a_th}, "
                f"max_braking_imposed={self.max_braking_imposed}"
            )

    def to_dict(self) -> dict:
        return asdict(self)


def _out(value):
    return float(value) if np.ndim(value) == 0 else value


def idm_desired_gap(p: IdmParameters, v, dv):
    """s* = s0 + v T + v dv / (2 sqrt(a_max b_comfort)); may fall below s0."""
    v = np.asarray(v, dtype=np.float64)
    dv = np.asarray(dv, dtype=np.float64)
    return _out(p.s0 + v * p.headway_T + v * dv / (2.0 * math.sqrt(p.a_max * p.b_comfort)))


def idm_acceleration(p: IdmParameters, v, dv, gap):
    """a_max [1 - (v / v_desired)^delta - (s* / gap)^2].

    Raises:
        DomainError: If any gap is not positive.
    """
    gap = np.asarray(gap, dtype=np.float64)
    if np.any(~(gap > 0)):
        raise DomainError(f"IDM needs a positive gap, got {gap.min() if gap.size else gap}")
    v = np.asarray(v, dtype=np.float64)
    s_star = np.asarray(idm_desired_gap(p, v, dv))
    return _out(p.a_max * (1.0 - (v / p.v_desired) ** p.delta - (s_star / gap) ** 2))


def free_road_acceleration(p: IdmParameters, v):
    return _out(p.a_max * (1.0 - (np.asarray(v, dtype=np.float64) / p.v_desired) ** p.delta))


def mobil_safety(a_tilde_n: float, p: MobilParameters) -> bool:
    """The new follower's post-change deceleration stays within the imposed limit."""
    return a_tilde_n >= -p.max_braking_imposed


def mobil_incentive(ctx: LaneChangeContext, p: MobilParameters) -> bool:
    """Politeness-weighted acceleration gain strictly exceeds the threshold."""
    return ctx.gain(p.politeness_p) > p.delta_a_th


class LaneDecision(str, Enum):
    KEEP = "keep"
    CHANGE_LEFT = "change_left"
    CHANGE_RIGHT = "change_right"


class LaneFrame:
    """Arc-length position of every vehicle along every lane of one world state."""

    def __init__(self, world: WorldState):
        self.world = world
        xy = np.array([[v.x, v.y] for v in world.vehicles]).reshape(-1, 2)
        self._row = {v.id: i for i, v in enumerate(world.vehicles)}
        self._s = {lane.lane_id: lane.project_many(xy)[0] for lane in world.road.lanes} if len(xy) else {}

    def s(self, vehicle_id: int, lane_id: int) -> float:
        return float(self._s[lane_id][self._row[vehicle_id]])

    def neighbours(
        self, lane_id: int, s: float, exclude: int,
    ) -> Tuple[Optional[Tuple[VehicleState, float]], Optional[Tuple[VehicleState, float]]]:
        """Nearest (vehicle, s) ahead of and behind `s` among vehicles in `lane_id`."""
        ahead = behind = None
        for other in self.world.vehicles:
            if other.id == exclude or other.lane != lane_id:
                continue
            s_other = self.s(other.id, lane_id)
            if s_other >= s:
                if ahead is None or (s_other, other.id) < (ahead[1], ahead[0].id):
                    ahead = (other, s_other)
            elif behind is None or (s_other, other.id) > (behind[1], behind[0].id):
                behind = (other, s_other)
        return ahead, behind

    def leader(self, vehicle_id: int) -> Optional[Tuple[VehicleState, float]]:
        vehicle = self.world.vehicle(vehicle_id)
        if vehicle.lane is None:
            return None
        return self.neighbours(vehicle.lane, self.s(vehicle_id, vehicle.lane), vehicle_id)[0]


def _follow_accel(idm: IdmParameters, follower: VehicleState, s_follower: float,
                  leader: Optional[Tuple[VehicleState, float]]) -> float:
    if leader is None:
        return free_road_acceleration(idm, follower.speed)
    lead, s_lead = leader
    gap = s_lead - s_follower - 0.5 * (lead.length + follower.length)
    return idm_acceleration(idm, follower.speed, follower.speed - lead.speed, max(gap, GAP_FLOOR))


def _bumper_gap(front: Tuple[VehicleState, float], back: Tuple[VehicleState, float]) -> float:
    return front[1] - back[1] - 0.5 * (front[0].length + back[0].length)


def lane_change_context(world: WorldState, ego: int, target_lane: int, idm: IdmParameters,
                        frame: Optional[LaneFrame] = None) -> Optional[LaneChangeContext]:
    """Predicted accelerations for a hypothetical change into `target_lane`.

    Returns None when the ego would overlap a vehicle in the target lane.
    """
    frame = frame or LaneFrame(world)
    vehicle = world.vehicle(ego)
    current = vehicle.lane
    s_cur = frame.s(ego, current)
    s_tgt = frame.s(ego, target_lane)
    me_cur = (vehicle, s_cur)
    me_tgt = (vehicle, s_tgt)

    cur_leader, old_follower = frame.neighbours(current, s_cur, ego)
    tgt_leader, new_follower = frame.neighbours(target_lane, s_tgt, ego)
    if tgt_leader is not None and _bumper_gap(tgt_leader, me_tgt) <= 0:
        return None
    if new_follower is not None and _bumper_gap(me_tgt, new_follower) <= 0:
        return None

    a_c = _follow_accel(idm, vehicle, s_cur, cur_leader)
    a_c_tilde = _follow_accel(idm, vehicle, s_tgt, tgt_leader)
    a_n = a_n_tilde = a_o = a_o_tilde = 0.0
    if new_follower is not None:
        a_n = _follow_accel(idm, new_follower[0], new_follower[1], tgt_leader)
        a_n_tilde = _follow_accel(idm, new_follower[0], new_follower[1], me_tgt)
    if old_follower is not None:
        a_o = _follow_accel(idm, old_follower[0], old_follower[1], me_cur)
        a_o_tilde = _follow_accel(idm, old_follower[0], old_follower[1], cur_leader)
    return LaneChangeContext(a_c, a_c_tilde, a_n, a_n_tilde, a_o, a_o_tilde)


def mobil_decide(world: WorldState, ego: int, p: MobilParameters, idm: IdmParameters,
                 frame: Optional[LaneFrame] = None) -> LaneDecision:
    """Lane choice for `ego` among its current lane and both neighbours.

    A candidate must pass both the safety and the incentive criteria. With
    two passing candidates the larger gain wins; equal gains keep the lane.
    """
    vehicle = world.vehicle(ego)
    if world.road is None or not world.road.has_lane(vehicle.lane):
        return LaneDecision.KEEP
    left, right = world.road.adjacent(vehicle.lane)
    if left is None and right is None:
        return LaneDecision.KEEP
    frame = frame or LaneFrame(world)
    best: Optional[Tuple[float, LaneDecision]] = None
    tie = False
    for lane_id, decision in ((left, LaneDecision.CHANGE_LEFT), (right, LaneDecision.CHANGE_RIGHT)):
        if lane_id is None:
            continue
        ctx = lane_change_context(world, ego, lane_id, idm, frame)
        if ctx is None or not mobil_safety(ctx.a_n_tilde, p) or not mobil_incentive(ctx, p):
            continue
        gain = ctx.gain(p.politeness_p)
        if best is None or gain > best[0]:
            best, tie = (gain, decision), False
        elif gain == best[0]:
            tie = True
    if best is None or tie:
        return LaneDecision.KEEP
    return best[1]


def objective_mixed_error(sim_gaps, data_gaps) -> float:
    """sqrt( mean((d_data - d_sim)^2 / |d_data|) / mean(|d_data|) ).

    Raises:
        DomainError: On length mismatch, empty series or non-positive data gaps.
    """
    sim = np.asarray(sim_gaps, dtype=np.float64)
    data = np.asarray(data_gaps, dtype=np.float64)
    if sim.shape[-1:] != data.shape:
        raise DomainError(f"simulated and recorded gap series differ in length: {sim.shape[-1:]} vs {data.shape}")
    if data.size == 0:
        raise DomainError("gap series are empty")
    if np.any(~(data > 0)):
        raise DomainError("recorded gaps must be positive")
    scale = np.abs(data)
    return _out(np.sqrt(np.mean((data - sim) ** 2 / scale, axis=-1) / np.mean(scale)))


@dataclass(frozen=True, eq=False)
class FollowingTrace:
    """Recorded car-following data in a 1-D longitudinal frame.

    The follower's front bumper starts at 0; `leader_position` is the
    leader's rear bumper, so `gap = leader_position - follower front`.
    """

    dt: float
    leader_position: np.ndarray
    leader_speed: np.ndarray
    follower_speed: np.ndarray
    gap: np.ndarray

    def __len__(self) -> int:
        return len(self.gap)


def following_trace(segment: CarFollowingSegment) -> FollowingTrace:
    """Project a corrected segment onto its direction of travel."""
    travel = np.concatenate([[0.0], np.cumsum(np.hypot(np.diff(segment.x), np.diff(segment.y)))])
    return FollowingTrace(
        dt=segment.dt,
        leader_position=travel + segment.gap,
        leader_speed=np.asarray(segment.leader_speed, dtype=np.float64),
        follower_speed=np.asarray(segment.speed, dtype=np.float64),
        gap=np.asarray(segment.gap, dtype=np.float64),
    )


def simulate_idm_batch(params: np.ndarray, delta: float, leader_position: np.ndarray,
                       leader_speed: np.ndarray, initial_gap: float, initial_speed: float,
                       dt: float) -> np.ndarray:
    """Forward-Euler IDM follower for a population of parameter vectors.

    Args:
        params: (P, 5) vectors ordered as IDM_RANGES.

    Returns:
        (P, n) simulated gaps, floored at 1 cm.
    """
    params = np.atleast_2d(np.asarray(params, dtype=np.float64))
    n = len(leader_position)
    out = np.empty((len(params), n))
    if n == 0:
        return out
    a_max, v0, s0, b, T = params.T
    x = np.zeros(len(params))
    v = np.full(len(params), float(initial_speed))
    root = 2.0 * np.sqrt(a_max * b)
    x0 = leader_position[0] - initial_gap
    for k in range(n):
        gap = np.maximum(leader_position[k] - x0 - x, GAP_FLOOR)
        out[:, k] = gap
        s_star = s0 + v * T + v * (v - leader_speed[k]) / root
        a = a_max * (1.0 - (v / v0) ** delta - (s_star / gap) ** 2)
        x = x + v * dt
        v = np.maximum(v + a * dt, 0.0)
    return out


def simulate_idm_follower(p: IdmParameters, leader_position, leader_speed,
                          initial_gap: float, initial_speed: float, dt: float = 0.1) -> np.ndarray:
    """Gap series of an IDM follower behind a recorded leader."""
    leader_position = np.asarray(leader_position, dtype=np.float64)
    leader_speed = np.asarray(leader_speed, dtype=np.float64)
    return simulate_idm_batch(p.to_vector()[None, :], p.delta, leader_position, leader_speed,
                              initial_gap, initial_speed, dt)[0]


def simulate_trace(p: IdmParameters, trace: FollowingTrace) -> np.ndarray:
    return simulate_idm_follower(p, trace.leader_position, trace.leader_speed,
                                 trace.gap[0], trace.follower_speed[0], trace.dt)


def compare_fit(p: IdmParameters, trace: FollowingTrace) -> pd.DataFrame:
    """Recorded versus simulated gaps over one trace."""
    sim = simulate_trace(p, trace)
    return pd.DataFrame({
        "t": np.arange(len(trace)) * trace.dt,
        "data_gap": trace.gap,
        "sim_gap": sim,
        "error": sim - trace.gap,
    })


def table_summary(idm: IdmParameters, mobil: Optional[MobilParameters] = None,
                  objective: Optional[float] = None) -> str:
    """Plain-text parameter table."""
    lines = [f"{'Parameter':<21}{'Range':<15}Value"]
    labels: Mapping[str, str] = {
        "a_max": "a_IDM [m/s^2]", "v_desired": "v_IDM [m/s]", "s0": "s_IDM [m]",
        "b_comfort": "b_IDM [m/s^2]", "headway_T": "T [s]",
    }
    for name, label in labels.items():
        lo, hi = IDM_RANGES[name]
        lines.append(f"{label:<21}{f'[{lo:g}, {hi:g}]':<15}{getattr(idm, name):.4g}")
    lines.append(f"{'delta':<21}{'fixed':<15}{idm.delta:g}")
    if mobil is not None:
        lines.append(f"{'politeness p':<21}{'[0, 1]':<15}{mobil.politeness_p:g}")
        lines.append(f"{'delta_a_th [m/s^2]':<21}{'-':<15}{mobil.delta_a_th:.4g}")
        lines.append(f"{'max braking [m/s^2]':<21}{'-':<15}{mobil.max_braking_imposed:.4g}")
    if objective is not None:
        lines.append(f"mixed-error objective: {objective:.4f}")
    return "\n".join(lines)
