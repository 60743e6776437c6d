"""Tests for scenario metrics, effectiveness, the collision taxonomy and clustering."""

import json
import math

import numpy as np
import pytest

from advscenario.adversarial import ScenarioRecord
from advscenario.analysis import (
    EVENT_COLUMNS,
    CollisionLabel,
    agent_collisions,
    closing_speed,
    cluster_label_report,
    compare_reports,
    effectiveness,
    effectiveness_gain,
    histogram,
    kmeans_cluster,
    label_collision_type,
    macro_metrics,
    metrics_report,
    micro_metrics,
    pca_reduce,
    write_analysis,
)
from advscenario.errors import DomainError
from advscenario.kernel import CollisionEvent, ContactSide

F, R, L, RT = ContactSide.FRONT, ContactSide.REAR, ContactSide.LEFT, ContactSide.RIGHT


def event(sides, heading=0.0, position=(0.0, 5.0), velocity=(0.0, -8.0), ids=(1, 2), step=1) -> CollisionEvent:
    return CollisionEvent(step, ids, sides, heading, velocity, position)


def make_record(run, agent_lanes, collisions=(), agent=1, av=2) -> ScenarioRecord:
    steps = len(agent_lanes) - 1
    snapshots = []
    for t, lane in enumerate(agent_lanes):
        snapshots.append([
            {"step": t, "id": agent, "accel": 0.5 * t, "steering": 0.01 * t, "lane": lane},
            {"step": t, "id": av, "accel": -1.0, "steering": 0.0, "lane": 1},
            {"step": t, "id": 3, "accel": 0.0, "steering": 0.0, "lane": 2},
        ])
    rewards = [{"r_d": 0.1, "r_c": 0.0, "r_adv": 0.1, "r_nat": 0.9, "r_total": 0.118}] * steps
    actions = [(0.5 * t, 0.01 * t) for t in range(1, steps + 1)]
    return ScenarioRecord(run, run, agent, av, snapshots, rewards, actions, None, list(collisions))


LABELED = [
    (event((F, R)), CollisionLabel.REAR_END),
    (event((F, R), velocity=(0.0, -20.0)), CollisionLabel.HIGH_SPEED_REAR),
    (event((F, R), velocity=(0.0, -1.0)), CollisionLabel.BRAKING_FRONT_IMPACT),
    (event((L, RT), position=(2.0, 1.0), velocity=(-0.5, 0.0)), CollisionLabel.SIDE_SWIPE_LEFT),
    (event((L, RT), position=(2.0, -1.0), velocity=(-0.5, 0.0)), CollisionLabel.SIDE_SWIPE_RIGHT),
    (event((F, L), heading=0.1, position=(1.0, 3.0)), CollisionLabel.FRONT_CUT_IN),
    (event((L, RT), heading=math.pi / 2, position=(2.0, 0.0)), CollisionLabel.SIDE_CONTACT),
    (event((F, F), heading=math.pi), CollisionLabel.HEAD_ON),
    (event((F, L), heading=math.pi / 2), CollisionLabel.T_SHAPED),
    (event((R, R), heading=math.pi, position=(0.0, -5.0)), CollisionLabel.REAR_TO_REAR),
]


class TestTaxonomy:
    """Test geometric collision labels."""

    @pytest.mark.parametrize("collision, expected", LABELED)
    def test_label(self, collision, expected):
        """Test that each reference geometry gets its label."""
        assert label_collision_type(collision) is expected

    @pytest.mark.parametrize("collision, expected", LABELED)
    def test_symmetric(self, collision, expected):
        """Test that the swapped view of an event gets the same label."""
        assert label_collision_type(collision.swapped()) is expected

    def test_closing_speed(self):
        """Test the approach speed and that separating vehicles close at zero."""
        assert closing_speed(event((F, R))) == pytest.approx(8.0)
        assert closing_speed(event((F, R), velocity=(0.0, 3.0))) == 0.0

    def test_counter_intuitive(self):
        """Test that only the last three labels are counter-intuitive."""
        flagged = [label for label in CollisionLabel if label.counter_intuitive]
        assert flagged == [CollisionLabel.HIGH_SPEED_REAR, CollisionLabel.T_SHAPED, CollisionLabel.REAR_TO_REAR]
        assert CollisionLabel.REAR_END.semantic_name == "rear-end"


class TestMetrics:
    """Test macroscopic and microscopic metrics and effectiveness."""

    @pytest.fixture
    def records(self):
        return [
            make_record(0, [1, 1, 2, None, 2, 1], [event((F, R), ids=(1, 2), step=5)]),
            make_record(1, [1, 1, 1], [event((F, R), ids=(3, 1), step=2)]),
            make_record(2, [2, 2, 2], [event((F, R), ids=(1, 3), step=2), event((F, R), ids=(2, 1), step=2)]),
            make_record(3, [1, 1, 1]),
        ]

    def test_macro(self, records):
        """Test collision rates, the same-step tie rule and lane changes."""
        rate_av, rate_other, lane_changes = macro_metrics(records)
        assert rate_av == pytest.approx(0.5)
        assert rate_other == pytest.approx(0.25)
        assert lane_changes == 2

    def test_macro_needs_records(self):
        """Test that an empty batch raises DomainError."""
        with pytest.raises(DomainError):
            macro_metrics([])

    def test_micro(self, records):
        """Test exact ranges per role and that histograms count every control."""
        ranges, histograms = micro_metrics(records)
        assert set(ranges) == {"agent", "av", "background"}
        assert ranges["agent"]["accel"] == (0.5, 2.5)
        assert ranges["av"]["accel"] == (-1.0, -1.0)
        agent_accel = histograms[(histograms["role"] == "agent") & (histograms["quantity"] == "accel")]
        assert agent_accel["count"].sum() == 5 + 2 + 2 + 2

    def test_histogram(self):
        """Test bins aligned at multiples of the width and unit-mass densities."""
        hist = histogram(np.array([0.1, 0.3, -0.1]), 0.25)
        assert hist["bin_left"].tolist() == pytest.approx([-0.25, 0.0, 0.25])
        assert hist["count"].tolist() == [1, 1, 1]
        assert (hist["density"] * 0.25).sum() == pytest.approx(1.0)
        assert histogram(np.array([]), 0.25).empty

    def test_report(self, records):
        """Test mean rewards and effectiveness of a report."""
        report = metrics_report(records)
        assert report.runs == 4
        assert report.mean_r_nat == pytest.approx(0.9)
        assert report.effectiveness(0.5, 0.5) == pytest.approx(0.5 * 0.9 + 0.5 * 0.5)

    def test_effectiveness(self):
        """Test the weighted sum and the relative gain."""
        assert effectiveness(0.8, 0.4, 0.5, 0.5) == pytest.approx(0.6)
        assert effectiveness_gain(0.6, 0.4) == pytest.approx(0.5)
        with pytest.raises(DomainError):
            effectiveness_gain(0.6, 0.0)

    def test_compare_reports(self, records):
        """Test that weights add effectiveness rows to the comparison."""
        proposed = metrics_report(records)
        baseline = metrics_report(records[1:])
        text = compare_reports(proposed, baseline, weights=(0.5, 0.5))
        assert "effectiveness gain" in text
        assert "agent accel" in text
        assert "effectiveness" not in compare_reports(proposed, baseline)


class TestClustering:
    """Test PCA, k-means and the cluster/label report."""

    def test_pca_line(self):
        """Test that points on a line give one component with all the variance."""
        x = np.arange(10, dtype=np.float64)
        result = pca_reduce(np.column_stack([x, -2 * x]), k=1)
        assert result.basis[:, 0] == pytest.approx(np.array([1.0, -2.0]) / math.sqrt(5))
        assert result.explained_variance_ratio[0] == pytest.approx(1.0)

    def test_pca_full_rank_reconstructs(self, rng):
        """Test that keeping every component reconstructs the data."""
        x = rng.normal(size=(20, 3))
        result = pca_reduce(x, k=3)
        assert result.reconstruct() == pytest.approx(x)

    @pytest.mark.parametrize("k", [0, 3])
    def test_pca_bad_k(self, k):
        """Test that k outside [1, min(rows, columns)] raises DomainError."""
        with pytest.raises(DomainError):
            pca_reduce(np.ones((5, 2)), k=k)

    def test_kmeans_blobs(self, rng):
        """Test that two separated blobs fall into two clusters."""
        x = np.vstack([rng.normal(0.0, 0.1, size=(20, 2)), rng.normal(10.0, 0.1, size=(20, 2))])
        result = kmeans_cluster(x, 2, seed=3)
        assert len(set(result.assignments[:20])) == 1
        assert len(set(result.assignments[20:])) == 1
        assert result.assignments[0] != result.assignments[-1]
        assert result.inertia < 2.0
        assert np.array_equal(kmeans_cluster(x, 2, seed=3).assignments, result.assignments)

    def test_kmeans_too_few_points(self):
        """Test that fewer points than clusters raise DomainError."""
        with pytest.raises(DomainError):
            kmeans_cluster(np.zeros((2, 2)), 3)

    def test_agent_frame(self):
        """Test that collisions are re-expressed with the agent first."""
        record = make_record(0, [1, 1], [event((F, R), ids=(2, 1))])
        ((_, collision),) = agent_collisions([record])
        assert collision.ids == (1, 2)
        assert collision.contact_sides == (R, F)

    def test_report(self):
        """Test labels, shrunken K and label ratios."""
        records = [make_record(i, [1, 1], [collision]) for i, (collision, _) in enumerate(LABELED[:4])]
        report = cluster_label_report(records, k=10)
        assert list(report.events.columns[:len(EVENT_COLUMNS)]) == EVENT_COLUMNS
        assert report.events["cluster"].nunique() <= 4
        assert report.events["with_av"].all()
        assert sum(report.label_ratios.values()) == pytest.approx(1.0)
        assert report.counter_intuitive_share == pytest.approx(0.25)

    def test_no_collisions(self):
        """Test that a batch without agent collisions gives an empty report."""
        report = cluster_label_report([make_record(0, [1, 1])])
        assert report.empty
        assert set(report.label_ratios.values()) == {0.0}

    def test_write_analysis(self, tmp_path):
        """Test the analysis files and the hash inside metrics.json."""
        records = [make_record(0, [1, 2], [event((F, R))]), make_record(1, [1, 1])]
        paths = write_analysis(tmp_path, metrics_report(records), cluster_label_report(records), "abc123",
                               weights=(0.5, 0.5))
        assert {p.name for p in paths} == {"metrics.json", "summary.txt", "histograms.csv",
                                           "collisions.csv", "cluster_labels.csv"}
        body = json.loads((tmp_path / "metrics.json").read_text())
        assert body["config_hash"] == "abc123"
        assert body["collision_rate_av"] == 0.5
        assert "effectiveness" in (tmp_path / "summary.txt").read_text()
