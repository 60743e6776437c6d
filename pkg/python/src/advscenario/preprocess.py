"""Car-following extraction, screening, smoothing and correction.

The pipeline turns annotated episodes into clean car-following segments
for IDM calibration:

1. split each track wherever its leader changes,
2. screen segments against dataset-specific rules,
3. smooth positions with a symmetric exponential moving average,
4. recompute speed and acceleration from the smoothed positions,
5. recompute the bumper gap from leader and follower geometry.

Lane-change events for MOBIL calibration are captured separately.
"""

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .errors import SegmentTooShortError
from .ingest import FRAME_DT, Episode, TrajectoryIndex, track_headings
from .kernel import DEFAULT_LENGTH
from .roads import RoadNetwork

logger = logging.getLogger(__name__)

NEGATIVE_GAP = "negative-gap"


@dataclass(frozen=True)
class CarFollowingSample:
    t: float
    v: float
    dv: float
    gap: float
    leader_speed: float
    leader_length: float


@dataclass(frozen=True, eq=False)
class CarFollowingSegment:
    """A contiguous stretch of one track behind one fixed leader.

    Arrays are aligned per frame. Leader columns are NaN where the leader
    track is unknown.
    """

    vehicle_id: int
    leader_id: int
    frames: np.ndarray
    x: np.ndarray
    y: np.ndarray
    speed: np.ndarray
    accel: np.ndarray
    lane: np.ndarray
    gap: np.ndarray
    leader_x: np.ndarray
    leader_y: np.ndarray
    leader_speed: np.ndarray
    length: float = DEFAULT_LENGTH
    leader_length: float = DEFAULT_LENGTH
    vehicle_class: Optional[int] = None
    dt: float = FRAME_DT
    flags: frozenset = field(default_factory=frozenset)

    @property
    def segment_id(self) -> str:
        return f"{self.vehicle_id}-{self.leader_id}-{int(self.frames[0])}"

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def duration(self) -> float:
        return len(self.frames) * self.dt

    @property
    def travel(self) -> float:
        return float(np.sum(np.hypot(np.diff(self.x), np.diff(self.y))))

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.frames)) * self.dt

    def slice(self, start: int, stop: int) -> "CarFollowingSegment":
        arrays = {
            name: getattr(self, name)[start:stop]
            for name in ("frames", "x", "y", "speed", "accel", "lane", "gap",
                         "leader_x", "leader_y", "leader_speed")
        }
        return replace(self, **arrays)

    def samples(self) -> List[CarFollowingSample]:
        return [
            CarFollowingSample(float(t), float(v), float(v - vl), float(g), float(vl), self.leader_length)
            for t, v, vl, g in zip(self.times, self.speed, self.leader_speed, self.gap)
        ]

    def to_row(self) -> dict:
        """Flat record for Parquet export."""
        return {
            "segment_id": self.segment_id,
            "vehicle_id": self.vehicle_id,
            "leader_id": self.leader_id,
            "length": self.length,
            "leader_length": self.leader_length,
            "vehicle_class": self.vehicle_class,
            "dt": self.dt,
            "flags": sorted(self.flags),
            **{name: getattr(self, name).astype(np.float64).tolist()
               for name in ("frames", "x", "y", "speed", "accel", "lane", "gap",
                            "leader_x", "leader_y", "leader_speed")},
        }

    @classmethod
    def from_row(cls, row: dict) -> "CarFollowingSegment":
        return cls(
            vehicle_id=int(row["vehicle_id"]),
            leader_id=int(row["leader_id"]),
            length=float(row["length"]),
            leader_length=float(row["leader_length"]),
            vehicle_class=None if row["vehicle_class"] is None else int(row["vehicle_class"]),
            dt=float(row["dt"]),
            flags=frozenset(row["flags"]),
            **{name: np.asarray(row[name], dtype=np.float64)
               for name in ("frames", "x", "y", "speed", "accel", "lane", "gap",
                            "leader_x", "leader_y", "leader_speed")},
        )


@dataclass(frozen=True)
class ScreeningRules:
    min_duration_s: float = 30.0
    min_travel_m: float = 20.0
    trim_s: float = 5.0
    max_abs_accel: float = 8.0
    small_car_class: int = 2
    min_gap_m: float = 0.1
    exclude_far_right_lane: bool = True
    keep_lane_changes: bool = False

    def __post_init__(self):
        for name in ("min_duration_s", "min_travel_m", "trim_s", "max_abs_accel", "min_gap_m"):
            if not getattr(self, name) > 0:
                raise ValueError(f"screening rule {name} must be positive, got {getattr(self, name)}")

    @classmethod
    def ngsim(cls, **overrides) -> "ScreeningRules":
        return cls(**{"min_duration_s": 30.0, "exclude_far_right_lane": True, **overrides})

    @classmethod
    def interaction(cls, **overrides) -> "ScreeningRules":
        return cls(**{"min_duration_s": 4.0, "exclude_far_right_lane": False, **overrides})

    @classmethod
    def preset(cls, name: str, **overrides) -> "ScreeningRules":
        presets = {"ngsim": cls.ngsim, "interaction": cls.interaction}
        try:
            return presets[name](**overrides)
        except KeyError:
            raise ValueError(f"unknown screening preset {name!r}; expected one of {sorted(presets)}") from None


class RejectReason(str, Enum):
    LANE_CHANGE = "lane-change"
    DURATION = "duration"
    TRAVEL = "travel"
    TRIMMED_DURATION = "trimmed-duration"
    FAR_RIGHT_LANE = "far-right-lane"
    ACCEL = "accel"
    VEHICLE_CLASS = "vehicle-class"
    GAP = "gap"
    CORRECTED_GAP = "corrected-gap"


@dataclass(frozen=True)
class ScreenVerdict:
    """Outcome of screening; a kept verdict carries the trimmed segment."""

    keep: bool
    reason: Optional[RejectReason] = None
    segment: Optional[CarFollowingSegment] = None

    @property
    def label(self) -> str:
        return "keep" if self.keep else "reject"


def extract_car_following(episode: Episode, index: Optional[TrajectoryIndex] = None) -> List[CarFollowingSegment]:
    """Split a track into segments with one fixed leader each.

    Boundaries fall wherever the leader changes or disappears, and at frame
    gaps. With an index, leader position, speed and length come from the
    leader's own track; without one the leader speed is reconstructed from
    the gap rate.
    """
    records = episode.records
    segments = []
    start = 0
    for i in range(1, len(records) + 1):
        boundary = (
            i == len(records)
            or records[i].preceding_id != records[start].preceding_id
            or records[i].frame != records[i - 1].frame + 1
        )
        if not boundary:
            continue
        leader_id = records[start].preceding_id
        if leader_id is not None:
            segments.append(_build_segment(episode, start, i, leader_id, index))
        start = i
    return segments


def _build_segment(episode: Episode, start: int, stop: int, leader_id: int,
                   index: Optional[TrajectoryIndex]) -> CarFollowingSegment:
    records = episode.records[start:stop]
    n = len(records)
    frames = np.array([r.frame for r in records], dtype=np.float64)
    speed = np.array([r.speed for r in records])
    gap = np.array([np.nan if r.space_headway is None else r.space_headway for r in records])
    leader_x = np.full(n, np.nan)
    leader_y = np.full(n, np.nan)
    leader_speed = np.full(n, np.nan)
    leader_length = DEFAULT_LENGTH
    if index is not None:
        for k, record in enumerate(records):
            lead = index.record(leader_id, record.frame)
            if lead is not None:
                leader_x[k], leader_y[k], leader_speed[k] = lead.local_x, lead.local_y, lead.speed
                leader_length = lead.length
    missing = np.isnan(leader_speed)
    if missing.any() and n > 1 and not np.isnan(gap).any():
        leader_speed[missing] = (speed + np.gradient(gap, FRAME_DT))[missing]
    classes = [r.vehicle_class for r in records if r.vehicle_class is not None]
    return CarFollowingSegment(
        vehicle_id=episode.ego_id,
        leader_id=leader_id,
        frames=frames,
        x=np.array([r.local_x for r in records]),
        y=np.array([r.local_y for r in records]),
        speed=speed,
        accel=np.array([r.accel for r in records]),
        lane=np.array([np.nan if r.lane_id is None else r.lane_id for r in records], dtype=np.float64),
        gap=gap,
        leader_x=leader_x,
        leader_y=leader_y,
        leader_speed=leader_speed,
        length=records[0].length,
        leader_length=leader_length,
        vehicle_class=classes[0] if classes else None,
    )


def screen(segment: CarFollowingSegment, rules: ScreeningRules,
           road: Optional[RoadNetwork] = None) -> ScreenVerdict:
    """Apply the screening rules in order; the first failing rule is the reason.

    The far-right-lane rule needs `road` to know which lanes are rightmost
    or auxiliary; without a road it is skipped.
    """
    lanes = segment.lane[~np.isnan(segment.lane)]
    if not rules.keep_lane_changes and len(np.unique(lanes)) > 1:
        return ScreenVerdict(False, RejectReason.LANE_CHANGE)
    if segment.duration < rules.min_duration_s - 1e-9:
        return ScreenVerdict(False, RejectReason.DURATION)
    if segment.travel < rules.min_travel_m:
        return ScreenVerdict(False, RejectReason.TRAVEL)

    cut = int(round(rules.trim_s / segment.dt))
    if len(segment) - 2 * cut <= 0:
        return ScreenVerdict(False, RejectReason.TRIMMED_DURATION)
    trimmed = segment.slice(cut, len(segment) - cut)
    if trimmed.duration < rules.min_duration_s - 1e-9:
        return ScreenVerdict(False, RejectReason.TRIMMED_DURATION)

    if rules.exclude_far_right_lane and road is not None:
        excluded = road.far_right_or_ramp_ids()
        if any(int(lane) in excluded for lane in trimmed.lane[~np.isnan(trimmed.lane)]):
            return ScreenVerdict(False, RejectReason.FAR_RIGHT_LANE)
    if np.any(np.abs(trimmed.accel) > rules.max_abs_accel):
        return ScreenVerdict(False, RejectReason.ACCEL)
    if trimmed.vehicle_class != rules.small_car_class:
        return ScreenVerdict(False, RejectReason.VEHICLE_CLASS)
    if np.any(np.isnan(trimmed.gap)) or np.any(trimmed.gap < rules.min_gap_m):
        return ScreenVerdict(False, RejectReason.GAP)
    return ScreenVerdict(True, None, trimmed)


def sema_filter(series: np.ndarray, width_s: float = 0.5, dt: float = FRAME_DT) -> np.ndarray:
    """Symmetric exponential moving average.

    Each output sample is the exp(-|k dt| / width_s)-weighted mean of the
    inputs within 3 * width_s, with weights renormalized where the window
    runs past either end of the series.
    """
    y = np.asarray(series, dtype=np.float64)
    if width_s <= 0:
        raise ValueError(f"width_s must be positive, got {width_s}")
    if len(y) <= 1:
        return y.copy()
    half = int(math.floor(3 * width_s / dt + 1e-9))
    k = np.arange(-half, half + 1)
    kernel = np.exp(-np.abs(k * dt) / width_s)
    numerator = np.convolve(y, kernel, mode="full")[half:half + len(y)]
    denominator = np.convolve(np.ones_like(y), kernel, mode="full")[half:half + len(y)]
    return numerator / denominator


def smooth_segment(segment: CarFollowingSegment, width_s: float = 0.5) -> CarFollowingSegment:
    """sEMA-smooth follower and leader positions."""
    def smooth(a: np.ndarray) -> np.ndarray:
        return a if np.isnan(a).any() else sema_filter(a, width_s, segment.dt)
    return replace(
        segment,
        x=smooth(segment.x), y=smooth(segment.y),
        leader_x=smooth(segment.leader_x), leader_y=smooth(segment.leader_y),
    )


def correct_kinematics(segment: CarFollowingSegment) -> CarFollowingSegment:
    """Speed and acceleration from central differences of positions.

    Endpoints use one-sided differences.

    Raises:
        SegmentTooShortError: If the segment has fewer than 3 samples.
    """
    if len(segment) < 3:
        raise SegmentTooShortError(
            f"segment {segment.segment_id} has {len(segment)} sample(s); kinematic correction needs at least 3"
        )
    vx = np.gradient(segment.x, segment.dt)
    vy = np.gradient(segment.y, segment.dt)
    speed = np.hypot(vx, vy)
    accel = np.gradient(speed, segment.dt)
    leader_speed = segment.leader_speed
    if not np.isnan(segment.leader_x).any():
        leader_speed = np.hypot(np.gradient(segment.leader_x, segment.dt),
                                np.gradient(segment.leader_y, segment.dt))
    return replace(segment, speed=speed, accel=accel, leader_speed=leader_speed)


def correct_gap(segment: CarFollowingSegment, leader_length: Optional[float] = None) -> CarFollowingSegment:
    """Bumper gap from center positions and both vehicle lengths.

    The leader length defaults to the segment's, itself 5 m when the
    dataset omits it. Without a leader track the recorded gap is kept.
    A non-positive gap anywhere flags the segment 'negative-gap'.
    """
    length = segment.leader_length if leader_length is None else leader_length
    if not length > 0:
        length = DEFAULT_LENGTH
    gap = segment.gap
    if not np.isnan(segment.leader_x).any():
        center = np.hypot(segment.leader_x - segment.x, segment.leader_y - segment.y)
        gap = center - 0.5 * (length + segment.length)
    flags = set(segment.flags)
    if np.any(gap <= 0):
        flags.add(NEGATIVE_GAP)
    return replace(segment, gap=gap, leader_length=length, flags=frozenset(flags))


@dataclass(frozen=True)
class LaneChangeContext:
    """Accelerations around a lane change.

    `a_*` are before the change and `a_*_tilde` after, for the changing
    vehicle (c), its new follower (n) and its old follower (o).
    """

    a_c: float
    a_c_tilde: float
    a_n: float
    a_n_tilde: float
    a_o: float
    a_o_tilde: float

    def gain(self, politeness: float) -> float:
        own = self.a_c_tilde - self.a_c
        if politeness == 0:
            return own
        return own + politeness * ((self.a_n_tilde - self.a_n) + (self.a_o_tilde - self.a_o))


@dataclass(frozen=True)
class LaneChangeEvent:
    vehicle_id: int
    t_start: float
    t_end: float
    from_lane: int
    to_lane: int
    peak_heading: float
    context: LaneChangeContext

    def __post_init__(self):
        if self.from_lane == self.to_lane:
            raise ValueError(f"lane change of vehicle {self.vehicle_id} must change lanes")


def _follower(index: TrajectoryIndex, frame: int, lane: int, ahead_of: int) -> Optional[int]:
    """Vehicle whose leader is `ahead_of` in `lane` at `frame`."""
    for record in index.at_frame(frame):
        if record.lane_id == lane and record.preceding_id == ahead_of:
            return record.vehicle_id
    return None


def _accel(index: TrajectoryIndex, vehicle_id: Optional[int], frame: int) -> float:
    if vehicle_id is None:
        return 0.0
    record = index.record(vehicle_id, frame)
    return 0.0 if record is None else record.accel


def extract_lane_change_events(
    episode: Episode,
    index: TrajectoryIndex,
    road: Optional[RoadNetwork] = None,
    heading_threshold: float = 0.02,
) -> List[LaneChangeEvent]:
    """Capture lane changes around each lane_id transition.

    The event window is the contiguous run of frames around the transition
    where the heading relative to the lane direction exceeds
    `heading_threshold`; `peak_heading` is the greatest such heading.
    Context accelerations are read at the frames just before and after the
    transition; absent followers contribute zero.
    """
    lanes = [r.lane_id for r in episode.records]
    headings = track_headings(episode)
    relative = np.zeros(len(episode))
    for i, record in enumerate(episode.records):
        lane_heading = 0.0
        if road is not None and road.has_lane(record.lane_id):
            lane_heading = road.lane(record.lane_id).project(record.local_x, record.local_y)[2]
        elif road is None and len(episode) > 1:
            lane_heading = float(np.median(headings))
        relative[i] = math.remainder(headings[i] - lane_heading, 2 * math.pi)

    events = []
    for i in range(1, len(episode)):
        before, after = lanes[i - 1], lanes[i]
        if before is None or after is None or before == after:
            continue
        if episode.records[i].frame != episode.records[i - 1].frame + 1:
            continue
        active = np.abs(relative) > heading_threshold
        lo, hi = i - 1, i
        while lo > 0 and active[lo - 1] and lanes[lo - 1] == before:
            lo -= 1
        while hi < len(episode) - 1 and active[hi + 1] and lanes[hi + 1] == after:
            hi += 1
        window = np.abs(relative[lo:hi + 1])
        peak = relative[lo + int(np.argmax(window))]

        prev_frame, next_frame = episode.records[i - 1].frame, episode.records[i].frame
        ego = episode.ego_id
        new_follower = _follower(index, next_frame, after, ego)
        old_follower = _follower(index, prev_frame, before, ego)
        context = LaneChangeContext(
            a_c=_accel(index, ego, prev_frame),
            a_c_tilde=_accel(index, ego, next_frame),
            a_n=_accel(index, new_follower, prev_frame),
            a_n_tilde=_accel(index, new_follower, next_frame),
            a_o=_accel(index, old_follower, prev_frame),
            a_o_tilde=_accel(index, old_follower, next_frame),
        )
        t0 = episode.records[0].frame
        events.append(LaneChangeEvent(
            vehicle_id=ego,
            t_start=(episode.records[lo].frame - t0) * FRAME_DT,
            t_end=(episode.records[hi].frame - t0) * FRAME_DT,
            from_lane=before,
            to_lane=after,
            peak_heading=float(peak),
            context=context,
        ))
    return events


@dataclass
class PreprocessResult:
    segments: List[CarFollowingSegment]
    report: pd.DataFrame
    extracted: int = 0

    @property
    def kept(self) -> int:
        return len(self.segments)


def preprocess_corpus(
    episodes: Sequence[Episode],
    rules: ScreeningRules,
    road: Optional[RoadNetwork] = None,
    sema_width_s: float = 0.5,
) -> PreprocessResult:
    """Extract, screen, smooth and correct the car-following corpus.

    Returns:
        Kept segments and a screening report with one row per extracted
        segment (segment_id, verdict, reason).
    """
    index = TrajectoryIndex(episodes)
    rows = []
    kept = []
    extracted = 0
    for episode in sorted(episodes, key=lambda e: e.ego_id):
        for segment in extract_car_following(episode, index):
            extracted += 1
            verdict = screen(segment, rules, road)
            if verdict.keep:
                corrected = correct_gap(correct_kinematics(smooth_segment(verdict.segment, sema_width_s)))
                # recorded gaps can pass screening while the positions overlap
                if NEGATIVE_GAP in corrected.flags or np.any(corrected.gap < rules.min_gap_m):
                    logger.debug("Segment %s rejected: corrected gap %.3f m below %.3f m",
                                 corrected.segment_id, float(np.min(corrected.gap)), rules.min_gap_m)
                    verdict = ScreenVerdict(False, RejectReason.CORRECTED_GAP)
                else:
                    kept.append(corrected)
            rows.append({
                "segment_id": segment.segment_id,
                "verdict": verdict.label,
                "reason": "" if verdict.reason is None else verdict.reason.value,
            })
    report = pd.DataFrame(rows, columns=["segment_id", "verdict", "reason"])
    logger.info("Screened %d car-following segment(s), kept %d", extracted, len(kept))
    return PreprocessResult(kept, report, extracted)


def screening_report_csv(report: pd.DataFrame) -> str:
    return report.to_csv(index=False, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)


def reject_counts(report: pd.DataFrame) -> Dict[str, int]:
    rejected = report[report["verdict"] == "reject"]
    return {str(k): int(v) for k, v in rejected["reason"].value_counts().sort_index().items()}
