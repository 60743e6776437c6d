"""Tests for road construction and lane lookup."""

import json
import math

import numpy as np
import pytest

from advscenario.errors import RoadSpecError
from advscenario.roads import (
    ROAD_PRESETS,
    LaneKind,
    build_road,
    junction_like,
    load_road,
    straight_road,
    straight_road_spec,
    us101_like,
)
from conftest import datafile


class TestStraightRoads:
    """Test parallel straight lanes and their numbering."""

    def test_lanes_numbered_left_to_right(self, road):
        """Test that lane 1 is leftmost and each lane is one width to its right."""
        assert road.lane_ids == (1, 2, 3)
        assert road.locate(100.0, 0.0).lane_id == 1
        assert road.locate(100.0, -3.7).lane_id == 2
        assert road.locate(100.0, -7.4).lane_id == 3

    def test_adjacency(self, road):
        """Test that adjacency is (left, right) and open at the edges."""
        assert road.adjacent(1) == (None, 2)
        assert road.adjacent(2) == (1, 3)
        assert road.adjacent(3) == (2, None)

    def test_locate_offset_left_positive(self, road):
        """Test that offsets are positive to the left of the centerline."""
        position = road.locate(50.0, 1.0)
        assert position.lane_id == 1
        assert position.s == pytest.approx(50.0)
        assert position.offset == pytest.approx(1.0)
        assert position.heading == pytest.approx(0.0)
        assert position.on_lane

    def test_lane_at_off_road(self, road):
        """Test that points outside every lane map to None."""
        assert road.lane_at(50.0, 2.0) is None
        assert road.lane_at(-1.0, 0.0) is None
        assert road.lane_at(601.0, 0.0) is None
        assert road.lane_at(50.0, -1.9) == 2

    def test_locate_many_matches_locate(self, road):
        """Test that vectorized lookup agrees with the scalar one."""
        points = np.array([[10.0, 0.3], [200.0, -4.0], [599.0, -8.0], [50.0, 5.0]])
        ids, s, offset, on_lane = road.locate_many(points)
        for i, (x, y) in enumerate(points):
            position = road.locate(x, y)
            assert ids[i] == position.lane_id
            assert s[i] == pytest.approx(position.s)
            assert offset[i] == pytest.approx(position.offset)
            assert on_lane[i] == position.on_lane

    def test_pose_inverts_project(self, road):
        """Test that pose(s, offset) projects back to (s, offset)."""
        lane = road.lane(2)
        x, y, heading = lane.pose(123.0, -0.7)
        s, offset, _ = lane.project(x, y)
        assert (s, offset) == pytest.approx((123.0, -0.7))
        assert heading == pytest.approx(0.0)


class TestPresets:
    """Test the bundled road presets."""

    def test_us101_layout(self):
        """Test five mainline lanes plus an auxiliary lane running along +y."""
        road = us101_like()
        assert road.lane_ids == (1, 2, 3, 4, 5, 6)
        assert road.lane(6).kind is LaneKind.AUXILIARY
        assert road.lane(1).length == pytest.approx(640.0)
        assert road.lane(1).heading_at(10.0) == pytest.approx(math.pi / 2)
        assert road.lane_at(1.85, 100.0) == 1
        assert road.lane_at(1.85 + 3.7, 100.0) == 2
        assert road.far_right_or_ramp_ids() == frozenset({5, 6})

    def test_junction_turn_lane(self):
        """Test that the junction's turn lane ends heading north."""
        road = junction_like()
        turn = road.lane(3)
        assert turn.heading_at(turn.length) == pytest.approx(math.pi / 2, abs=1e-2)
        assert road.adjacent(1) == (3, 2)

    def test_registry(self):
        """Test that the preset registry builds every road."""
        assert set(ROAD_PRESETS) == {"us101", "junction"}
        for factory in ROAD_PRESETS.values():
            assert factory().lanes


class TestRoadSpecs:
    """Test road descriptions, validation and round trips."""

    def test_arc_segment(self):
        """Test that a quarter arc ends at the expected point with the right length."""
        road = build_road({"lanes": [{"start": [0.0, 0.0], "heading": 0.0,
                                      "segments": [{"type": "arc", "radius": 20.0, "angle": math.pi / 2}]}]})
        lane = road.lane(1)
        assert lane.centerline[-1] == pytest.approx([20.0, 20.0])
        assert lane.length == pytest.approx(10 * math.pi, rel=1e-3)

    def test_to_spec_round_trip(self):
        """Test that to_spec builds back to the same lanes."""
        road = junction_like()
        rebuilt = build_road(road.to_spec())
        assert rebuilt.lane_ids == road.lane_ids
        for lane in road.lanes:
            other = rebuilt.lane(lane.lane_id)
            assert np.allclose(other.centerline, lane.centerline)
            assert (other.left, other.right, other.kind) == (lane.left, lane.right, lane.kind)

    def test_load_road_file(self):
        """Test loading the bundled on-ramp description."""
        road = load_road(datafile("road_onramp.json"))
        assert road.lane_ids == (1, 2, 3)
        assert road.lane(3).kind is LaneKind.AUXILIARY
        assert road.adjacent(3) == (2, None)

    def test_load_road_bad_json(self, tmp_path):
        """Test that malformed JSON raises RoadSpecError naming the file."""
        path = tmp_path / "road.json"
        path.write_text("{not json")
        with pytest.raises(RoadSpecError, match="road.json"):
            load_road(path)

    @pytest.mark.parametrize("spec, message", [
        ({"lanes": []}, "no lanes"),
        ({"lanes": [{"width": 0.0, "segments": [{"type": "straight", "length": 5}]}]}, "width"),
        ({"lanes": [{"segments": [{"type": "arc", "radius": -1, "angle": 1}]}]}, "radius"),
        ({"lanes": [{"segments": [{"type": "spiral"}]}]}, "spiral"),
        ({"lanes": [{"segments": []}]}, "segments"),
        ({"lanes": [{"kind": "shoulder", "segments": [{"type": "straight", "length": 5}]}]}, "shoulder"),
    ])
    def test_invalid_specs(self, spec, message):
        """Test that invalid descriptions raise RoadSpecError with a useful message."""
        with pytest.raises(RoadSpecError, match=message):
            build_road(spec)

    def test_adjacency_validation(self):
        """Test that unknown or conflicting adjacency is rejected."""
        spec = straight_road_spec(3, 100.0)
        with pytest.raises(RoadSpecError, match="unknown lane"):
            build_road({**spec, "adjacency": [[1, 7]]})
        with pytest.raises(RoadSpecError, match="conflicts"):
            build_road({**spec, "adjacency": [[1, 2], [1, 3]]})

    def test_missing_lane(self):
        """Test that asking for an absent lane raises RoadSpecError."""
        with pytest.raises(RoadSpecError, match="not part of this road"):
            straight_road(2, 50.0).lane(5)
