"""Lane-graph roads.

A road is a set of lanes, each a polyline centerline with a width, a kind
and ordered left/right neighbours. Roads are built from a JSON-compatible
description made of straight segments and circular arcs; arcs are
discretized so the chord error stays below a tolerance.

Example:
    >>> road = build_road(straight_road_spec(n_lanes=3, length=400.0))
    >>> road.lane_at(10.0, 0.0)
    1
"""

import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import RoadSpecError

logger = logging.getLogger(__name__)

DEFAULT_LANE_WIDTH = 3.7
# Maximum sagitta between an arc and its polyline, meters.
ARC_CHORD_TOLERANCE = 1e-3


class LaneKind(str, Enum):
    MAINLINE = "mainline"
    AUXILIARY = "auxiliary"


@dataclass(frozen=True)
class LanePosition:
    """Projection of a point onto a lane centerline.

    `offset` is left-positive. `on_lane` is true when the point lies inside
    the lane's width and between its two ends.
    """

    lane_id: int
    s: float
    offset: float
    heading: float
    on_lane: bool


class Lane:
    """A single lane: polyline centerline, width, kind and neighbours."""

    def __init__(
        self,
        lane_id: int,
        centerline: np.ndarray,
        width: float,
        kind: LaneKind = LaneKind.MAINLINE,
        left: Optional[int] = None,
        right: Optional[int] = None,
    ):
        points = np.asarray(centerline, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 2 or len(points) < 2:
            raise RoadSpecError(f"lane {lane_id}: centerline needs at least two (x, y) points")
        if not width > 0:
            raise RoadSpecError(f"lane {lane_id}: width must be positive, got {width}")
        self.lane_id = int(lane_id)
        self.centerline = points
        self.width = float(width)
        self.kind = LaneKind(kind)
        self.left = left
        self.right = right

        self._starts = points[:-1]
        self._deltas = np.diff(points, axis=0)
        self._seg_lengths = np.hypot(self._deltas[:, 0], self._deltas[:, 1])
        if np.any(self._seg_lengths <= 0):
            raise RoadSpecError(f"lane {lane_id}: centerline has repeated points")
        self._cum = np.concatenate([[0.0], np.cumsum(self._seg_lengths)])
        self._headings = np.arctan2(self._deltas[:, 1], self._deltas[:, 0])

    @property
    def length(self) -> float:
        return float(self._cum[-1])

    def project(self, x: float, y: float) -> Tuple[float, float, float]:
        """Project a point onto the centerline.

        The first and last segments are extended past the lane ends so the
        returned `s` may fall outside [0, length].

        Returns:
            (s, left-positive lateral offset, lane heading at s)
        """
        s, offset, heading = self.project_many(np.array([[x, y]], dtype=np.float64))
        return float(s[0]), float(offset[0]), float(heading[0])

    def project_many(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized `project` over an (n, 2) array of points."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        rel = p[:, None, :] - self._starts[None, :, :]
        t = np.einsum("nmk,mk->nm", rel, self._deltas) / self._seg_lengths**2
        lo = np.zeros(len(self._deltas))
        hi = np.ones(len(self._deltas))
        lo[0] = -np.inf
        hi[-1] = np.inf
        t = np.clip(t, lo, hi)
        foot = self._starts[None, :, :] + t[:, :, None] * self._deltas[None, :, :]
        dist = np.hypot(p[:, None, 0] - foot[:, :, 0], p[:, None, 1] - foot[:, :, 1])
        i = np.argmin(dist, axis=1)
        rows = np.arange(len(p))
        cross = self._deltas[i, 0] * rel[rows, i, 1] - self._deltas[i, 1] * rel[rows, i, 0]
        d = dist[rows, i]
        offset = np.where(cross >= 0, d, -d)
        s = self._cum[i] + t[rows, i] * self._seg_lengths[i]
        return s, offset, self._headings[i]

    def heading_at(self, s: float) -> float:
        i = int(np.clip(np.searchsorted(self._cum, s, side="right") - 1, 0, len(self._headings) - 1))
        return float(self._headings[i])

    def pose(self, s: float, offset: float = 0.0) -> Tuple[float, float, float]:
        """Point at arc length `s` shifted `offset` to the left, with lane heading."""
        i = int(np.clip(np.searchsorted(self._cum, s, side="right") - 1, 0, len(self._headings) - 1))
        heading = float(self._headings[i])
        along = s - self._cum[i]
        x = self._starts[i, 0] + math.cos(heading) * along - math.sin(heading) * offset
        y = self._starts[i, 1] + math.sin(heading) * along + math.cos(heading) * offset
        return float(x), float(y), heading


class RoadNetwork:
    """An immutable set of lanes with symmetric adjacency."""

    def __init__(self, lanes: Sequence[Lane]):
        if not lanes:
            raise RoadSpecError("road has no lanes")
        ordered = sorted(lanes, key=lambda lane: lane.lane_id)
        ids = [lane.lane_id for lane in ordered]
        if len(set(ids)) != len(ids):
            raise RoadSpecError(f"duplicate lane ids in {ids}")
        self.lanes: Tuple[Lane, ...] = tuple(ordered)
        self._by_id: Dict[int, Lane] = {lane.lane_id: lane for lane in ordered}
        for lane in ordered:
            for side, other, back in (("left", lane.left, "right"), ("right", lane.right, "left")):
                if other is None:
                    continue
                if other not in self._by_id:
                    raise RoadSpecError(f"lane {lane.lane_id}: {side} neighbour {other} does not exist")
                if getattr(self._by_id[other], back) != lane.lane_id:
                    raise RoadSpecError(
                        f"adjacency is not symmetric between lanes {lane.lane_id} and {other}"
                    )

    @property
    def lane_ids(self) -> Tuple[int, ...]:
        return tuple(self._by_id)

    def lane(self, lane_id: int) -> Lane:
        try:
            return self._by_id[lane_id]
        except KeyError:
            raise RoadSpecError(
                f"lane {lane_id} is not part of this road (lanes: {list(self._by_id)})"
            ) from None

    def has_lane(self, lane_id: Optional[int]) -> bool:
        return lane_id is not None and lane_id in self._by_id

    def adjacent(self, lane_id: int) -> Tuple[Optional[int], Optional[int]]:
        lane = self.lane(lane_id)
        return lane.left, lane.right

    def locate(self, x: float, y: float) -> LanePosition:
        """Nearest lane by absolute lateral offset; ties go to the lower lane id."""
        best: Optional[LanePosition] = None
        for lane in self.lanes:
            s, offset, heading = lane.project(x, y)
            if best is None or abs(offset) < abs(best.offset):
                on_lane = abs(offset) <= lane.width / 2 and 0.0 <= s <= lane.length
                best = LanePosition(lane.lane_id, s, offset, heading, on_lane)
        assert best is not None
        return best

    def locate_many(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized `locate`.

        Returns:
            (lane ids, s, left-positive offsets, on-lane mask), one entry per point.
        """
        p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        projections = [lane.project_many(p) for lane in self.lanes]
        offsets = np.stack([np.abs(o) for _, o, _ in projections])
        best = np.argmin(offsets, axis=0)
        rows = np.arange(len(p))
        s = np.stack([s for s, _, _ in projections])[best, rows]
        offset = np.stack([o for _, o, _ in projections])[best, rows]
        widths = np.array([lane.width for lane in self.lanes])[best]
        lengths = np.array([lane.length for lane in self.lanes])[best]
        on_lane = (np.abs(offset) <= widths / 2) & (s >= 0) & (s <= lengths)
        ids = np.array(self.lane_ids)[best]
        return ids, s, offset, on_lane

    def lane_at(self, x: float, y: float) -> Optional[int]:
        """Lane id containing the point, or None when the point is off-road."""
        position = self.locate(x, y)
        if position.on_lane:
            return position.lane_id
        # Lane boundaries are shared; a point just outside its nearest lane
        # may still sit inside a neighbour of a different width.
        for lane in self.lanes:
            s, offset, _ = lane.project(x, y)
            if abs(offset) <= lane.width / 2 and 0.0 <= s <= lane.length:
                return lane.lane_id
        return None

    def far_right_or_ramp_ids(self) -> frozenset:
        """Rightmost mainline lane plus every auxiliary lane."""
        mainline = [lane.lane_id for lane in self.lanes if lane.kind is LaneKind.MAINLINE]
        ids = {lane.lane_id for lane in self.lanes if lane.kind is LaneKind.AUXILIARY}
        if mainline:
            ids.add(max(mainline))
        return frozenset(ids)

    def to_spec(self) -> Dict[str, Any]:
        """Polyline form of this road, accepted back by build_road."""
        return {
            "lanes": [
                {
                    "id": lane.lane_id,
                    "width": lane.width,
                    "kind": lane.kind.value,
                    "points": lane.centerline.tolist(),
                }
                for lane in self.lanes
            ],
            "adjacency": [
                [lane.lane_id, lane.right] for lane in self.lanes if lane.right is not None
            ],
        }


def _arc_points(start: np.ndarray, heading: float, radius: float, angle: float,
                tolerance: float) -> np.ndarray:
    ratio = min(1.0, tolerance / radius)
    max_step = 2.0 * math.acos(1.0 - ratio) if ratio < 1.0 else math.pi / 2
    pieces = max(1, math.ceil(abs(angle) / max_step))
    sign = 1.0 if angle > 0 else -1.0
    center = start + sign * radius * np.array([-math.sin(heading), math.cos(heading)])
    phis = np.linspace(0.0, angle, pieces + 1)[1:]
    return np.column_stack([
        center[0] + sign * radius * np.sin(heading + phis),
        center[1] - sign * radius * np.cos(heading + phis),
    ])


def _lane_centerline(index: int, spec: Mapping[str, Any]) -> np.ndarray:
    if "points" in spec:
        return np.asarray(spec["points"], dtype=np.float64)

    start = np.asarray(spec.get("start", (0.0, 0.0)), dtype=np.float64)
    heading = float(spec.get("heading", 0.0))
    segments = spec.get("segments") or []
    if not segments:
        raise RoadSpecError(f"lanes[{index}]: needs either 'points' or a non-empty 'segments' list")

    points: List[np.ndarray] = [start[None, :]]
    cursor = start
    for j, segment in enumerate(segments):
        kind = segment.get("type")
        where = f"lanes[{index}].segments[{j}]"
        if kind == "straight":
            length = float(segment.get("length", 0.0))
            if not length > 0:
                raise RoadSpecError(f"{where}: straight length must be positive, got {length}")
            cursor = cursor + length * np.array([math.cos(heading), math.sin(heading)])
            points.append(cursor[None, :])
        elif kind == "arc":
            radius = float(segment.get("radius", 0.0))
            angle = float(segment.get("angle", 0.0))
            if not radius > 0:
                raise RoadSpecError(f"{where}: arc radius must be positive, got {radius}")
            if angle == 0:
                raise RoadSpecError(f"{where}: arc angle must be non-zero")
            arc = _arc_points(cursor, heading, radius, angle, ARC_CHORD_TOLERANCE)
            points.append(arc)
            cursor = arc[-1]
            heading += angle
        else:
            raise RoadSpecError(f"{where}: unknown segment type {kind!r} (expected 'straight' or 'arc')")
    return np.vstack(points)


def build_road(spec: Mapping[str, Any]) -> RoadNetwork:
    """Build a RoadNetwork from a road description.

    Args:
        spec: Mapping with a `lanes` list. Each lane gives `width`, optional
            `id` (default: 1-based position), `kind` ('mainline' or
            'auxiliary') and either raw `points` or a `start`/`heading` pose
            followed by `segments` of `{"type": "straight", "length": L}` or
            `{"type": "arc", "radius": r, "angle": a}` (positive = left turn).
            Optional `adjacency` lists `[left_id, right_id]` pairs; when
            omitted, lanes are adjacent in list order, left to right.

    Returns:
        The road network.

    Raises:
        RoadSpecError: On empty lane lists, non-positive widths, radii or
            lengths, unknown lane ids, or inconsistent adjacency.
    """
    lane_specs = spec.get("lanes") or []
    if not lane_specs:
        raise RoadSpecError("road has no lanes")

    built = []
    for i, lane_spec in enumerate(lane_specs):
        width = float(lane_spec.get("width", spec.get("lane_width", DEFAULT_LANE_WIDTH)))
        if not width > 0:
            raise RoadSpecError(f"lanes[{i}]: width must be positive, got {width}")
        kind = lane_spec.get("kind", LaneKind.MAINLINE.value)
        try:
            kind = LaneKind(kind)
        except ValueError:
            raise RoadSpecError(f"lanes[{i}]: unknown lane kind {kind!r}") from None
        built.append((int(lane_spec.get("id", i + 1)), _lane_centerline(i, lane_spec), width, kind))

    ids = [lane_id for lane_id, *_ in built]
    if "adjacency" in spec:
        pairs = [tuple(int(v) for v in pair) for pair in spec["adjacency"]]
    else:
        pairs = list(zip(ids, ids[1:]))

    left: Dict[int, int] = {}
    right: Dict[int, int] = {}
    for pair in pairs:
        if len(pair) != 2:
            raise RoadSpecError(f"adjacency entry {list(pair)} must be a [left, right] pair")
        lft, rgt = pair
        for lane_id in pair:
            if lane_id not in ids:
                raise RoadSpecError(f"adjacency references unknown lane {lane_id}")
        if right.get(lft, rgt) != rgt or left.get(rgt, lft) != lft:
            raise RoadSpecError(f"lane adjacency for pair {list(pair)} conflicts with an earlier pair")
        right[lft] = rgt
        left[rgt] = lft

    lanes = [
        Lane(lane_id, centerline, width, kind, left=left.get(lane_id), right=right.get(lane_id))
        for lane_id, centerline, width, kind in built
    ]
    road = RoadNetwork(lanes)
    logger.debug("Built road with %d lane(s), total centerline length %.1f m",
                 len(lanes), sum(lane.length for lane in lanes))
    return road


def load_road(path: str | Path) -> RoadNetwork:
    """Read a JSON road description from disk."""
    try:
        spec = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise RoadSpecError(f"{path}: not valid JSON ({e})") from e
    return build_road(spec)


def straight_road_spec(
    n_lanes: int,
    length: float,
    width: float = DEFAULT_LANE_WIDTH,
    heading: float = 0.0,
    origin: Tuple[float, float] = (0.0, 0.0),
    auxiliary: int = 0,
) -> Dict[str, Any]:
    """Description of parallel straight lanes, numbered 1.. from left to right.

    The first lane's centerline starts at `origin`; each further lane is one
    width to the right of the previous. The last `auxiliary` lanes are of
    kind auxiliary.
    """
    right = np.array([math.sin(heading), -math.cos(heading)])
    lanes = []
    total = n_lanes + auxiliary
    for i in range(total):
        start = np.asarray(origin, dtype=np.float64) + right * width * i
        lanes.append({
            "id": i + 1,
            "width": width,
            "kind": (LaneKind.AUXILIARY if i >= n_lanes else LaneKind.MAINLINE).value,
            "start": start.tolist(),
            "heading": heading,
            "segments": [{"type": "straight", "length": length}],
        })
    return {"lanes": lanes}


def us101_like() -> RoadNetwork:
    """640 m highway: five mainline lanes plus one auxiliary lane.

    Lanes run along +y with lane 1 leftmost, matching the NGSIM local
    frame (Local_X lateral, Local_Y longitudinal).
    """
    return build_road(straight_road_spec(
        n_lanes=5, length=640.0, heading=math.pi / 2,
        origin=(DEFAULT_LANE_WIDTH / 2, 0.0), auxiliary=1,
    ))


def junction_like() -> RoadNetwork:
    """Simplified urban junction: two through lanes and a left-turn lane."""
    width = DEFAULT_LANE_WIDTH
    return build_road({
        "lanes": [
            {"id": 1, "width": width, "start": [0.0, 0.0], "heading": 0.0,
             "segments": [{"type": "straight", "length": 120.0}]},
            {"id": 2, "width": width, "start": [0.0, -width], "heading": 0.0,
             "segments": [{"type": "straight", "length": 120.0}]},
            {"id": 3, "width": width, "kind": "auxiliary", "start": [0.0, width], "heading": 0.0,
             "segments": [
                 {"type": "straight", "length": 40.0},
                 {"type": "arc", "radius": 20.0, "angle": math.pi / 2},
                 {"type": "straight", "length": 40.0},
             ]},
        ],
        "adjacency": [[3, 1], [1, 2]],
    })


def straight_road(n_lanes: int, length: float, width: float = DEFAULT_LANE_WIDTH) -> RoadNetwork:
    return build_road(straight_road_spec(n_lanes, length, width))


ROAD_PRESETS = {
    "us101": us101_like,
    "junction": junction_like,
}
