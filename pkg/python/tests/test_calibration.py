"""Tests for IDM genetic-algorithm calibration and MOBIL thresholds."""

import numpy as np
import pytest

from advscenario.calibration import GaConfig, calibrate_idm, calibrate_mobil, corpus_objective
from advscenario.driver_models import FollowingTrace, IdmParameters, simulate_idm_follower
from advscenario.errors import CalibrationError
from advscenario.preprocess import LaneChangeContext, LaneChangeEvent

TRUTH = IdmParameters(a_max=1.4, v_desired=14.0, s0=2.0, b_comfort=1.8, headway_T=1.2)


def synthetic_traces(params: IdmParameters = TRUTH, count: int = 3, n: int = 150):
    traces = []
    for k in range(count):
        t = np.arange(n) * 0.1
        speed = 8.0 + 2.0 * np.sin(0.3 * t + k)
        position = 20.0 + np.concatenate([[0.0], np.cumsum(speed[:-1] * 0.1)])
        gaps = simulate_idm_follower(params, position, speed, 20.0, 8.0)
        traces.append(FollowingTrace(0.1, position, speed, np.full(n, 8.0), gaps))
    return traces


def _event(gain: float, a_n_tilde: float) -> LaneChangeEvent:
    return LaneChangeEvent(1, 0.0, 3.0, 1, 2, 0.1, LaneChangeContext(0.0, gain, 0.0, a_n_tilde, 0.0, 0.0))


class TestIdmCalibration:
    """Test the GA search over IDM parameters."""

    @pytest.mark.timeout(120)
    def test_fits_generated_data(self):
        """Test that the GA approaches data generated by known parameters."""
        traces = synthetic_traces()
        assert corpus_objective(TRUTH, traces) == pytest.approx(0.0, abs=1e-9)
        result = calibrate_idm(traces, GaConfig(population=24, generations=15, seed=3))
        assert len(result.curve) == 15
        assert all(b <= a for a, b in zip(result.curve, result.curve[1:]))
        assert result.objective == result.curve[-1]
        assert result.objective < result.curve[0]
        assert result.params.within_ranges()
        assert result.params.delta == 4.0
        assert result.corpus_size == 3

    @pytest.mark.timeout(120)
    def test_seeded_runs_repeat(self):
        """Test that the same seed returns the same parameters."""
        traces = synthetic_traces(count=2, n=80)
        ga = GaConfig(population=8, generations=4, seed=11)
        assert calibrate_idm(traces, ga).params == calibrate_idm(traces, ga).params

    @pytest.mark.slow
    @pytest.mark.timeout(300)
    def test_workers_agree(self):
        """Test that a process pool evaluates the same fitness as one process."""
        traces = synthetic_traces(count=4, n=80)
        serial = calibrate_idm(traces, GaConfig(population=8, generations=3, seed=5))
        pooled = calibrate_idm(traces, GaConfig(population=8, generations=3, seed=5, workers=2))
        assert pooled.curve == pytest.approx(serial.curve)

    def test_to_dict(self):
        """Test the serialized calibration record."""
        result = calibrate_idm(synthetic_traces(count=1, n=30), GaConfig(population=4, generations=1))
        data = result.to_dict()
        assert set(data) == {"params", "objective", "curve", "corpus_size", "ranges", "ga"}
        assert data["ranges"]["a_max"] == [0.1, 6.0]
        assert len(data["curve"]) == 1

    def test_empty_corpus(self):
        """Test that an empty corpus raises CalibrationError pointing at preprocessing."""
        with pytest.raises(CalibrationError, match="preprocess"):
            calibrate_idm([])

    def test_non_positive_gap(self):
        """Test that a trace with a non-positive gap raises CalibrationError pointing at preprocessing."""
        (trace,) = synthetic_traces(count=1, n=30)
        gap = trace.gap.copy()
        gap[10] = 0.0
        bad = FollowingTrace(trace.dt, trace.leader_position, trace.leader_speed, trace.follower_speed, gap)
        with pytest.raises(CalibrationError, match="preprocess"):
            calibrate_idm([bad])

    @pytest.mark.timeout(120)
    def test_recovers_default_parameters(self):
        """Test that the GA fits noise-free data from the default parameters to within 0.05."""
        traces = synthetic_traces(IdmParameters(), count=4, n=300)
        result = calibrate_idm(traces, GaConfig(population=48, generations=40, seed=1))
        assert all(b <= a for a, b in zip(result.curve, result.curve[1:]))
        assert result.objective <= 0.05

    @pytest.mark.timeout(120)
    def test_tolerates_gap_noise(self):
        """Test that 5 % Gaussian gap noise keeps the fitted objective within 0.25."""
        rng = np.random.default_rng(7)
        noisy = [
            FollowingTrace(t.dt, t.leader_position, t.leader_speed, t.follower_speed,
                           t.gap * (1.0 + 0.05 * rng.standard_normal(len(t))))
            for t in synthetic_traces(IdmParameters(), count=4, n=300)
        ]
        result = calibrate_idm(noisy, GaConfig(population=48, generations=40, seed=1))
        assert np.isfinite(result.objective)
        assert result.objective <= 0.25

    @pytest.mark.parametrize("kwargs", [
        {"population": 2}, {"generations": 0}, {"mutation_rate": 1.5}, {"tournament_k": 100}, {"workers": 0},
    ])
    def test_bad_ga_config(self, kwargs):
        """Test that invalid GA settings raise CalibrationError."""
        with pytest.raises(CalibrationError):
            GaConfig(**kwargs)


class TestMobilCalibration:
    """Test percentile-based MOBIL thresholds."""

    def test_percentiles(self):
        """Test the 10th-percentile gain and 90th-percentile imposed braking."""
        events = [_event(0.1 * k, -0.3 * k) for k in range(1, 11)]
        result = calibrate_mobil(events, politeness=0.5)
        assert result.params.delta_a_th == pytest.approx(0.19)
        assert result.params.max_braking_imposed == pytest.approx(2.73)
        assert result.params.politeness_p == 0.5
        assert result.event_count == 10

    def test_threshold_floor(self):
        """Test that negative gains floor the thresholds at 0.1."""
        result = calibrate_mobil([_event(-1.0, 1.0), _event(-2.0, 0.5)])
        assert result.params.delta_a_th == pytest.approx(0.1)
        assert result.params.max_braking_imposed == pytest.approx(0.1)

    def test_no_events(self):
        """Test that no events raise CalibrationError mentioning the defaults."""
        with pytest.raises(CalibrationError, match="default thresholds"):
            calibrate_mobil([])
