"""Tests for car-following extraction, screening and correction."""

import numpy as np
import pytest

from advscenario.errors import SegmentTooShortError
from advscenario.ingest import Episode, TrajectoryIndex, TrajectoryRecord
from advscenario.preprocess import (
    NEGATIVE_GAP,
    CarFollowingSegment,
    LaneChangeContext,
    RejectReason,
    ScreeningRules,
    correct_gap,
    correct_kinematics,
    extract_car_following,
    extract_lane_change_events,
    preprocess_corpus,
    reject_counts,
    screen,
    screening_report_csv,
    sema_filter,
    smooth_segment,
)
from advscenario.roads import straight_road


def make_segment(n: int = 400, speed: float = 10.0, gap: float = 20.0, lane=2,
                 vehicle_class: int = 2, accel=None) -> CarFollowingSegment:
    t = np.arange(n) * 0.1
    x = speed * t
    lanes = np.full(n, float(lane)) if np.isscalar(lane) else np.asarray(lane, dtype=np.float64)
    return CarFollowingSegment(
        vehicle_id=1, leader_id=2, frames=np.arange(1, n + 1, dtype=np.float64),
        x=x, y=np.zeros(n), speed=np.full(n, speed),
        accel=np.zeros(n) if accel is None else np.asarray(accel, dtype=np.float64),
        lane=lanes, gap=np.full(n, gap),
        leader_x=x + gap + 5.0, leader_y=np.zeros(n), leader_speed=np.full(n, speed),
        vehicle_class=vehicle_class,
    )


class TestScreening:
    """Test the ordered screening rules."""

    def test_keep_is_trimmed(self):
        """Test that a clean 40 s segment is kept with 5 s cut from each end."""
        verdict = screen(make_segment(400), ScreeningRules.ngsim())
        assert verdict.keep and verdict.label == "keep"
        assert len(verdict.segment) == 300
        assert verdict.segment.frames[0] == 51

    @pytest.mark.parametrize("segment, reason", [
        (make_segment(200), RejectReason.DURATION),
        (make_segment(350), RejectReason.TRIMMED_DURATION),
        (make_segment(400, lane=[2.0] * 200 + [1.0] * 200), RejectReason.LANE_CHANGE),
        (make_segment(400, speed=0.0), RejectReason.TRAVEL),
        (make_segment(400, lane=3), RejectReason.FAR_RIGHT_LANE),
        (make_segment(400, accel=[0.0] * 200 + [9.0] + [0.0] * 199), RejectReason.ACCEL),
        (make_segment(400, vehicle_class=3), RejectReason.VEHICLE_CLASS),
        (make_segment(400, gap=0.05), RejectReason.GAP),
    ])
    def test_reject_reasons(self, segment, reason):
        """Test that each failing rule is reported as the reason."""
        verdict = screen(segment, ScreeningRules.ngsim(), straight_road(3, 600.0))
        assert not verdict.keep
        assert verdict.reason is reason

    def test_trimmed_spike_is_ignored(self):
        """Test that an acceleration spike inside the trimmed head does not reject."""
        segment = make_segment(400, accel=[9.0] + [0.0] * 399)
        assert screen(segment, ScreeningRules.ngsim()).keep

    def test_far_right_rule_needs_road(self):
        """Test that the far-right-lane rule is skipped without a road."""
        assert screen(make_segment(400, lane=3), ScreeningRules.ngsim()).keep

    def test_presets(self):
        """Test the dataset presets and invalid rules."""
        assert ScreeningRules.preset("interaction").min_duration_s == 4.0
        assert ScreeningRules.preset("ngsim", trim_s=1.0).trim_s == 1.0
        with pytest.raises(ValueError, match="unknown screening preset"):
            ScreeningRules.preset("highd")
        with pytest.raises(ValueError, match="min_gap_m"):
            ScreeningRules(min_gap_m=0.0)


class TestSmoothingAndCorrection:
    """Test sEMA smoothing and kinematic/gap correction."""

    def test_sema_preserves_constants_and_lines(self):
        """Test that constants survive and interior samples of a line are unchanged."""
        assert sema_filter(np.full(50, 3.0)) == pytest.approx(np.full(50, 3.0))
        line = np.arange(100, dtype=np.float64) * 0.7
        smoothed = sema_filter(line, width_s=0.5)
        assert smoothed[15:85] == pytest.approx(line[15:85])

    def test_sema_reduces_noise(self):
        """Test that smoothing lowers the variance of white noise."""
        noise = np.random.default_rng(0).normal(size=500)
        assert sema_filter(noise).std() < 0.5 * noise.std()

    def test_sema_rejects_bad_width(self):
        """Test that a non-positive window width raises ValueError."""
        with pytest.raises(ValueError):
            sema_filter(np.zeros(5), width_s=0.0)

    def test_kinematics_from_positions(self):
        """Test that uniform motion yields constant speed and zero acceleration."""
        corrected = correct_kinematics(make_segment(50, speed=12.0))
        assert corrected.speed == pytest.approx(np.full(50, 12.0))
        assert corrected.accel == pytest.approx(np.zeros(50), abs=1e-9)
        assert corrected.leader_speed == pytest.approx(np.full(50, 12.0))

    def test_kinematics_needs_three_samples(self):
        """Test that a two-sample segment raises SegmentTooShortError."""
        with pytest.raises(SegmentTooShortError):
            correct_kinematics(make_segment(2))

    def test_gap_from_geometry(self):
        """Test that the gap is center distance minus both half-lengths."""
        corrected = correct_gap(make_segment(10, gap=20.0))
        assert corrected.gap == pytest.approx(np.full(10, 20.0))
        assert NEGATIVE_GAP not in corrected.flags

    def test_negative_gap_flagged(self):
        """Test that overlapping vehicles flag the segment."""
        segment = make_segment(10)
        overlapping = correct_gap(segment, leader_length=60.0)
        assert NEGATIVE_GAP in overlapping.flags

    def test_smoothing_keeps_straight_track(self):
        """Test that smoothing a straight track leaves the lateral position at zero."""
        smoothed = smooth_segment(make_segment(100))
        assert smoothed.y == pytest.approx(np.zeros(100))

    def test_row_round_trip(self):
        """Test that to_row/from_row preserve the arrays and metadata."""
        segment = correct_gap(make_segment(20), leader_length=60.0)
        back = CarFollowingSegment.from_row(segment.to_row())
        assert back.segment_id == segment.segment_id
        assert back.flags == segment.flags
        assert np.array_equal(back.gap, segment.gap)


def _record(vid, frame, x, y=0.0, lane=1, preceding=None, gap=None, speed=10.0):
    return TrajectoryRecord(vid, frame, x, y, speed, 0.0, lane, preceding, gap, 2)


class TestExtraction:
    """Test splitting tracks by leader and capturing lane changes."""

    def test_split_on_leader_change(self):
        """Test that a leader change starts a new segment and no-leader stretches are dropped."""
        preceding = [5] * 10 + [6] * 10 + [None] * 5
        records = tuple(_record(1, f + 1, float(f), preceding=p, gap=10.0) for f, p in enumerate(preceding))
        segments = extract_car_following(Episode(1, records))
        assert [(s.leader_id, len(s)) for s in segments] == [(5, 10), (6, 10)]
        assert segments[1].segment_id == "1-6-11"

    def test_split_on_frame_gap(self):
        """Test that missing frames end a segment."""
        frames = [1, 2, 3, 10, 11]
        records = tuple(_record(1, f, float(f), preceding=5, gap=10.0) for f in frames)
        assert [len(s) for s in extract_car_following(Episode(1, records))] == [3, 2]

    def test_leader_speed_from_index(self):
        """Test that leader columns come from the leader's own track."""
        leader = Episode(2, tuple(_record(2, f, 30.0 + f, speed=11.0) for f in range(1, 6)))
        follower = Episode(1, tuple(_record(1, f, float(f), preceding=2, gap=25.0) for f in range(1, 6)))
        (segment,) = extract_car_following(follower, TrajectoryIndex([leader, follower]))
        assert segment.leader_speed == pytest.approx(np.full(5, 11.0))
        assert segment.leader_x[0] == pytest.approx(31.0)

    def test_leader_speed_from_gap_rate(self):
        """Test that without an index the leader speed is v + d(gap)/dt."""
        records = tuple(_record(1, f, float(f), preceding=2, gap=10.0 + 0.1 * f) for f in range(1, 6))
        (segment,) = extract_car_following(Episode(1, records))
        assert segment.leader_speed == pytest.approx(np.full(5, 11.0))

    def test_lane_change_window(self):
        """Test the event window, lanes and peak heading of a left-to-right change."""
        road = straight_road(3, 600.0)
        ys = [0.0] * 11 + [-3.7 * k / 20 for k in range(1, 20)] + [-3.7] * 20
        records = tuple(
            _record(1, i + 1, 10.0 + i, y, lane=road.lane_at(10.0 + i, y)) for i, y in enumerate(ys)
        )
        episode = Episode(1, records)
        (event,) = extract_lane_change_events(episode, TrajectoryIndex([episode]), road)
        assert (event.from_lane, event.to_lane) == (1, 2)
        assert event.t_start == pytest.approx(1.0)
        assert event.t_end == pytest.approx(3.0)
        assert event.peak_heading == pytest.approx(-np.arctan(0.185), rel=1e-3)
        assert event.context == LaneChangeContext(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    def test_context_gain(self):
        """Test the MOBIL gain with and without politeness."""
        ctx = LaneChangeContext(a_c=0.0, a_c_tilde=1.0, a_n=0.5, a_n_tilde=-0.5, a_o=-1.0, a_o_tilde=0.0)
        assert ctx.gain(0.0) == pytest.approx(1.0)
        assert ctx.gain(0.5) == pytest.approx(1.0)
        assert ctx.gain(1.0) == pytest.approx(1.0)


class TestCorpus:
    """Test the whole preprocessing pass on a synthetic corpus."""

    def test_report_covers_every_segment(self, small_corpus):
        """Test that the report has one row per extracted segment and kept segments are corrected."""
        rules = ScreeningRules(min_duration_s=2.0, trim_s=0.5, exclude_far_right_lane=False,
                               keep_lane_changes=True)
        result = preprocess_corpus(small_corpus, rules, straight_road(2, 600.0))
        assert len(result.report) == result.extracted
        assert result.kept == int((result.report["verdict"] == "keep").sum())
        assert result.kept > 0
        for segment in result.segments:
            assert np.isfinite(segment.speed).all()
            assert np.isfinite(segment.gap).all()
        text = screening_report_csv(result.report)
        assert text.splitlines()[0] == "segment_id,verdict,reason"
        assert sum(reject_counts(result.report).values()) == result.extracted - result.kept

    @pytest.mark.parametrize("centre_offset, kept", [(5.0, False), (5.05, False), (25.0, True)])
    def test_overlapping_positions_rejected(self, centre_offset, kept):
        """Test that a segment whose recorded gap looks valid but whose positions overlap is rejected."""
        frames = range(1, 401)
        leader = Episode(2, tuple(_record(2, f, f + centre_offset) for f in frames))
        follower = Episode(1, tuple(_record(1, f, float(f), preceding=2, gap=20.0) for f in frames))
        rules = ScreeningRules(min_duration_s=2.0, trim_s=0.5, exclude_far_right_lane=False)
        result = preprocess_corpus([leader, follower], rules)
        assert result.extracted == 1
        (row,) = result.report.to_dict("records")
        if kept:
            assert row["verdict"] == "keep"
            assert result.segments[0].gap.min() >= rules.min_gap_m
        else:
            assert row["reason"] == RejectReason.CORRECTED_GAP.value
            assert not result.segments
            assert reject_counts(result.report) == {RejectReason.CORRECTED_GAP.value: 1}
