"""Trajectory ingest.

Dataset-specific parsers normalize NGSIM-like and INTERACTION-like files
into the canonical record form. The canonical CSV is the interchange
format between stages and round-trips exactly.
"""

import io
import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import InvalidStateError, ParseError, SchemaError
from .kernel import DEFAULT_LENGTH, DEFAULT_WIDTH, VehicleState, WorldState
from .roads import RoadNetwork

logger = logging.getLogger(__name__)

FEET = 0.3048
CANONICAL_COLUMNS = (
    "vehicle_id", "frame", "x_m", "y_m", "speed_mps", "accel_mps2", "lane_id",
    "preceding_id", "space_headway_m", "vehicle_class", "length_m", "width_m",
)
NGSIM_COLUMNS = (
    "Vehicle_ID", "Frame_ID", "Local_X", "Local_Y", "v_Vel", "v_Acc", "Lane_ID",
    "Preceding", "Space_Headway", "v_Class", "v_Length", "v_Width",
)
INTERACTION_COLUMNS = ("track_id", "frame_id", "x", "y", "vx", "vy", "agent_type", "length", "width")
INTERACTION_CLASSES = {"motorcycle": 1, "car": 2, "truck": 3, "bus": 3}
FRAME_DT = 0.1


class DataSource(str, Enum):
    NGSIM = "ngsim"
    INTERACTION = "interaction"
    SYNTHETIC = "synthetic"


class Schema(str, Enum):
    NGSIM = "ngsim"
    INTERACTION = "interaction"
    CANONICAL = "canonical"


@dataclass(frozen=True)
class TrajectoryRecord:
    """One vehicle at one frame, in meters and seconds.

    `local_x`/`local_y` locate the vehicle center. `space_headway` is the
    bumper-to-bumper gap to `preceding_id`.
    """

    vehicle_id: int
    frame: int
    local_x: float
    local_y: float
    speed: float
    accel: float
    lane_id: Optional[int] = None
    preceding_id: Optional[int] = None
    space_headway: Optional[float] = None
    vehicle_class: Optional[int] = None
    length: float = DEFAULT_LENGTH
    width: float = DEFAULT_WIDTH


@dataclass(frozen=True)
class Episode:
    """The full track of one vehicle."""

    ego_id: int
    records: Tuple[TrajectoryRecord, ...]
    source: DataSource = DataSource.SYNTHETIC

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if not self.records:
            raise InvalidStateError(f"episode for vehicle {self.ego_id} has no records")
        frames = [r.frame for r in self.records]
        if any(r.vehicle_id != self.ego_id for r in self.records):
            raise InvalidStateError(f"episode for vehicle {self.ego_id} mixes vehicle ids")
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise InvalidStateError(f"episode for vehicle {self.ego_id}: frames must be strictly increasing")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def frames(self) -> np.ndarray:
        return np.array([r.frame for r in self.records], dtype=np.int64)

    def column(self, name: str) -> np.ndarray:
        """Field `name` over time; None becomes NaN."""
        return np.array(
            [np.nan if getattr(r, name) is None else getattr(r, name) for r in self.records],
            dtype=np.float64,
        )


def _read_frame(source: bytes | str) -> pd.DataFrame:
    text = source.decode("utf-8") if isinstance(source, bytes) else source
    if not text.strip():
        return pd.DataFrame()
    try:
        return pd.read_csv(io.StringIO(text), dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        return pd.DataFrame()
    except pd.errors.ParserError as e:
        raise ParseError(f"malformed delimited text: {e}") from e


def _to_float(cell: str) -> float:
    try:
        return float(cell) if cell else np.nan
    except ValueError:
        return np.nan


def _numeric(df: pd.DataFrame, column: str, required: bool, integral: bool = False) -> pd.Series:
    """Column as float with NaN for empty cells; bad cells raise ParseError."""
    raw = df[column].str.strip()
    empty = raw == ""
    # float() keeps repr-formatted values bit-exact.
    values = raw.map(_to_float).astype(np.float64)
    bad = ~empty & ~np.isfinite(values)
    if required:
        bad |= empty
    if integral:
        bad |= ~empty & values.notna() & (values != np.round(values))
    if bad.any():
        i = int(np.flatnonzero(bad.to_numpy())[0])
        what = "integer" if integral else "number"
        cell = df[column].iloc[i]
        raise ParseError(f"column '{column}' expects a {what}, got {cell!r}", row=i + 2)
    return values


def _require(df: pd.DataFrame, schema: Schema, columns: Iterable[str]) -> None:
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise SchemaError(schema.value, missing)


def _opt_int(v: float) -> Optional[int]:
    return None if math.isnan(v) else int(v)


def _opt_float(v: float) -> Optional[float]:
    return None if math.isnan(v) else float(v)


def _canonical_frame(df: pd.DataFrame) -> pd.DataFrame:
    _require(df, Schema.CANONICAL, CANONICAL_COLUMNS)
    out = pd.DataFrame({
        "vehicle_id": _numeric(df, "vehicle_id", True, integral=True),
        "frame": _numeric(df, "frame", True, integral=True),
        "x_m": _numeric(df, "x_m", True),
        "y_m": _numeric(df, "y_m", True),
        "speed_mps": _numeric(df, "speed_mps", True),
        "accel_mps2": _numeric(df, "accel_mps2", True),
        "lane_id": _numeric(df, "lane_id", False, integral=True),
        "preceding_id": _numeric(df, "preceding_id", False, integral=True),
        "space_headway_m": _numeric(df, "space_headway_m", False),
        "vehicle_class": _numeric(df, "vehicle_class", False, integral=True),
        "length_m": _numeric(df, "length_m", False).fillna(DEFAULT_LENGTH),
        "width_m": _numeric(df, "width_m", False).fillna(DEFAULT_WIDTH),
    })
    return out


def _ngsim_frame(df: pd.DataFrame) -> pd.DataFrame:
    _require(df, Schema.NGSIM, NGSIM_COLUMNS)
    length = _numeric(df, "v_Length", False).fillna(DEFAULT_LENGTH / FEET) * FEET
    preceding = _numeric(df, "Preceding", False, integral=True)
    preceding = preceding.where(preceding != 0)
    vehicle_id = _numeric(df, "Vehicle_ID", True, integral=True)
    frame = _numeric(df, "Frame_ID", True, integral=True)
    # Space_Headway is front-to-front; the canonical gap subtracts the leader length.
    lengths = pd.Series(length.to_numpy(), index=pd.MultiIndex.from_arrays([vehicle_id, frame]))
    lengths = lengths[~lengths.index.duplicated()]
    leader_len = lengths.reindex(pd.MultiIndex.from_arrays([preceding, frame])).to_numpy()
    leader_len = np.where(np.isnan(leader_len), DEFAULT_LENGTH, leader_len)
    headway = _numeric(df, "Space_Headway", False) * FEET
    headway = (headway - leader_len).where(preceding.notna())
    return pd.DataFrame({
        "vehicle_id": vehicle_id,
        "frame": frame,
        "x_m": _numeric(df, "Local_X", True) * FEET,
        # Local_Y is the front bumper.
        "y_m": _numeric(df, "Local_Y", True) * FEET - length / 2,
        "speed_mps": _numeric(df, "v_Vel", True) * FEET,
        "accel_mps2": _numeric(df, "v_Acc", False).fillna(0.0) * FEET,
        "lane_id": _numeric(df, "Lane_ID", False, integral=True),
        "preceding_id": preceding,
        "space_headway_m": headway,
        "vehicle_class": _numeric(df, "v_Class", False, integral=True),
        "length_m": length,
        "width_m": _numeric(df, "v_Width", False).fillna(DEFAULT_WIDTH / FEET) * FEET,
    })


def _interaction_frame(df: pd.DataFrame) -> pd.DataFrame:
    _require(df, Schema.INTERACTION, INTERACTION_COLUMNS)
    vx = _numeric(df, "vx", True)
    vy = _numeric(df, "vy", True)
    out = pd.DataFrame({
        "vehicle_id": _numeric(df, "track_id", True, integral=True),
        "frame": _numeric(df, "frame_id", True, integral=True),
        "x_m": _numeric(df, "x", True),
        "y_m": _numeric(df, "y", True),
        "speed_mps": np.hypot(vx, vy),
        "lane_id": np.nan,
        "preceding_id": np.nan,
        "space_headway_m": np.nan,
        "vehicle_class": df["agent_type"].str.strip().str.lower().map(INTERACTION_CLASSES).astype(np.float64),
        "length_m": _numeric(df, "length", False).fillna(DEFAULT_LENGTH),
        "width_m": _numeric(df, "width", False).fillna(DEFAULT_WIDTH),
    })
    out = out.sort_values(["vehicle_id", "frame"], kind="stable")
    accel = np.zeros(len(out))
    for _, idx in out.groupby("vehicle_id", sort=False).indices.items():
        speed = out["speed_mps"].to_numpy()[idx]
        t = out["frame"].to_numpy()[idx] * FRAME_DT
        if len(idx) > 1:
            accel[idx] = np.gradient(speed, t)
    out["accel_mps2"] = accel
    return out.sort_index()


_PARSERS = {
    Schema.CANONICAL: _canonical_frame,
    Schema.NGSIM: _ngsim_frame,
    Schema.INTERACTION: _interaction_frame,
}
_SOURCES = {
    Schema.CANONICAL: DataSource.SYNTHETIC,
    Schema.NGSIM: DataSource.NGSIM,
    Schema.INTERACTION: DataSource.INTERACTION,
}


def parse_trajectories(
    source: bytes | str,
    schema: Schema | str = Schema.CANONICAL,
    data_source: Optional[DataSource] = None,
) -> List[Episode]:
    """Parse delimited trajectory text into one Episode per vehicle.

    Args:
        source: File contents.
        schema: 'canonical', 'ngsim' (US customary units, converted) or
            'interaction' (meters; speed from velocity components,
            acceleration by finite differences).
        data_source: Provenance recorded on the episodes. Defaults to the
            dataset matching the schema, synthetic for canonical input.

    Returns:
        Episodes ordered by vehicle id, records ordered by frame.

    Raises:
        SchemaError: If a mandatory column is missing.
        ParseError: If a cell cannot be parsed or a (vehicle, frame) pair repeats.
    """
    schema = Schema(schema)
    df = _read_frame(source)
    if df.empty and len(df.columns) == 0:
        return []
    df.columns = [c.strip() for c in df.columns]
    table = _PARSERS[schema](df)
    if table.empty:
        return []

    dupes = table.duplicated(["vehicle_id", "frame"]).to_numpy()
    if dupes.any():
        i = int(np.flatnonzero(dupes)[0])
        raise ParseError(
            f"vehicle {int(table['vehicle_id'].iloc[i])} has frame {int(table['frame'].iloc[i])} more than once",
            row=i + 2,
        )

    provenance = data_source or _SOURCES[schema]
    table = table.sort_values(["vehicle_id", "frame"], kind="stable")
    episodes = []
    for vehicle_id, group in table.groupby("vehicle_id", sort=True):
        records = tuple(
            TrajectoryRecord(
                vehicle_id=int(row.vehicle_id),
                frame=int(row.frame),
                local_x=float(row.x_m),
                local_y=float(row.y_m),
                speed=float(row.speed_mps),
                accel=float(row.accel_mps2),
                lane_id=_opt_int(row.lane_id),
                preceding_id=_opt_int(row.preceding_id),
                space_headway=_opt_float(row.space_headway_m),
                vehicle_class=_opt_int(row.vehicle_class),
                length=float(row.length_m),
                width=float(row.width_m),
            )
            for row in group.itertuples(index=False)
        )
        episodes.append(Episode(int(vehicle_id), records, provenance))
    logger.debug("Parsed %d %s episode(s), %d rows", len(episodes), schema.value, len(table))
    return episodes


def load_trajectories(path: str | Path, schema: Schema | str = Schema.CANONICAL) -> List[Episode]:
    return parse_trajectories(Path(path).read_bytes(), schema)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        raise TypeError("boolean cells are not part of the canonical schema")
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def serialize_trajectories(episodes: Sequence[Episode]) -> str:
    """Canonical CSV text for the episodes; parses back to identical records."""
    rows = [
        [
            _cell(r.vehicle_id), _cell(r.frame), _cell(r.local_x), _cell(r.local_y),
            _cell(r.speed), _cell(r.accel), _cell(r.lane_id), _cell(r.preceding_id),
            _cell(r.space_headway), _cell(r.vehicle_class), _cell(r.length), _cell(r.width),
        ]
        for episode in episodes
        for r in episode.records
    ]
    return pd.DataFrame(rows, columns=list(CANONICAL_COLUMNS), dtype=str).to_csv(index=False, lineterminator="\n")


def track_headings(episode: Episode, fallback: float = 0.0, min_step: float = 1e-3) -> np.ndarray:
    """Heading of travel from consecutive positions.

    Frames where the vehicle barely moves reuse the previous heading;
    leading stationary frames take the first valid heading, or `fallback`.
    """
    x = episode.column("local_x")
    y = episode.column("local_y")
    if len(x) < 2:
        return np.full(len(x), fallback)
    dx = np.gradient(x)
    dy = np.gradient(y)
    valid = np.hypot(dx, dy) > min_step
    headings = np.where(valid, np.arctan2(dy, dx), np.nan)
    if not valid.any():
        return np.full(len(x), fallback)
    s = pd.Series(headings).ffill().bfill()
    return s.to_numpy()


class TrajectoryIndex:
    """Per-frame and per-vehicle lookup over a set of episodes."""

    def __init__(self, episodes: Sequence[Episode], heading_fallback: float = 0.0):
        self.episodes: Dict[int, Episode] = {e.ego_id: e for e in episodes}
        self._by_frame: Dict[int, List[TrajectoryRecord]] = {}
        self._pos: Dict[Tuple[int, int], int] = {}
        self._headings: Dict[int, np.ndarray] = {}
        for episode in episodes:
            self._headings[episode.ego_id] = track_headings(episode, heading_fallback)
            for i, record in enumerate(episode.records):
                self._by_frame.setdefault(record.frame, []).append(record)
                self._pos[(record.vehicle_id, record.frame)] = i
        for records in self._by_frame.values():
            records.sort(key=lambda r: r.vehicle_id)

    @property
    def frames(self) -> List[int]:
        return sorted(self._by_frame)

    def at_frame(self, frame: int) -> List[TrajectoryRecord]:
        return list(self._by_frame.get(frame, ()))

    def record(self, vehicle_id: int, frame: int) -> Optional[TrajectoryRecord]:
        i = self._pos.get((vehicle_id, frame))
        return None if i is None else self.episodes[vehicle_id].records[i]

    def heading(self, vehicle_id: int, frame: int) -> Optional[float]:
        i = self._pos.get((vehicle_id, frame))
        return None if i is None else float(self._headings[vehicle_id][i])

    def vehicle_state(self, vehicle_id: int, frame: int) -> Optional[VehicleState]:
        record = self.record(vehicle_id, frame)
        if record is None:
            return None
        return VehicleState(
            id=record.vehicle_id, x=record.local_x, y=record.local_y,
            heading=self.heading(vehicle_id, frame), speed=record.speed,
            length=record.length, width=record.width, lane=record.lane_id,
            acceleration=record.accel,
        )

    def world_at(self, frame: int, road: Optional[RoadNetwork] = None, rng_seed: int = 0,
                 step_index: int = 0, dt: float = FRAME_DT) -> WorldState:
        """Snapshot of every vehicle recorded at `frame`."""
        vehicles = [self.vehicle_state(r.vehicle_id, frame) for r in self.at_frame(frame)]
        return WorldState(step_index * dt, step_index, tuple(vehicles), road, rng_seed)


def infer_lane_and_leader(episodes: Sequence[Episode], road: RoadNetwork) -> List[Episode]:
    """Annotate lanes, leaders and bumper gaps from positions alone.

    The lane is the nearest centerline by lateral offset (lower lane id on
    ties); points farther than two lane widths from every centerline get
    no lane. The leader is the nearest vehicle ahead along the same lane at
    the same frame, ordering equal positions by vehicle id.
    """
    records = [r for e in episodes for r in e.records]
    if not records:
        return []
    xy = np.array([[r.local_x, r.local_y] for r in records])
    lane_ids, _, offsets, _ = road.locate_many(xy)
    widths = np.array([road.lane(int(i)).width for i in lane_ids])
    lanes: List[Optional[int]] = [
        int(lane) if abs(off) <= 2 * w else None for lane, off, w in zip(lane_ids, offsets, widths)
    ]
    off_road = sum(1 for lane in lanes if lane is None)
    if off_road:
        logger.info("%d of %d record(s) lie off every lane; lane_id left empty", off_road, len(records))

    # Longitudinal coordinate along the assigned lane.
    s = np.full(len(records), np.nan)
    for lane_id in {lane for lane in lanes if lane is not None}:
        mask = np.array([lane == lane_id for lane in lanes])
        s[mask] = road.lane(lane_id).project_many(xy[mask])[0]

    groups: Dict[Tuple[int, int], List[int]] = {}
    for i, (record, lane) in enumerate(zip(records, lanes)):
        if lane is not None:
            groups.setdefault((record.frame, lane), []).append(i)

    leader: Dict[int, Tuple[int, float]] = {}
    for members in groups.values():
        members.sort(key=lambda i: (s[i], records[i].vehicle_id))
        for behind, ahead in zip(members, members[1:]):
            gap = s[ahead] - s[behind] - 0.5 * (records[ahead].length + records[behind].length)
            leader[behind] = (records[ahead].vehicle_id, float(gap))

    annotated = []
    cursor = 0
    for episode in episodes:
        new_records = []
        for record in episode.records:
            lead = leader.get(cursor)
            new_records.append(replace(
                record,
                lane_id=lanes[cursor],
                preceding_id=lead[0] if lead else None,
                space_headway=lead[1] if lead else None,
            ))
            cursor += 1
        annotated.append(Episode(episode.ego_id, tuple(new_records), episode.source))
    return annotated
