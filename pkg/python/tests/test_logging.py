"""Tests for package logging and progress reporting."""

import logging

import numpy as np
import pytest

import advscenario
from advscenario import progress
from advscenario.calibration import GaConfig, calibrate_idm
from advscenario.env import ToyTargetEnv
from advscenario.ppo import TrainingConfig, train_ppo
from test_calibration import synthetic_traces


class TestLoggingSetup:
    """Test that the package logger is configured on import."""

    def test_logger_exists(self):
        """Test the package logger and its default level."""
        logger = logging.getLogger("advscenario")
        assert logger.level == logging.INFO
        assert logger.handlers

    @pytest.mark.parametrize("level, expected", [
        (logging.DEBUG, logging.DEBUG), ("warning", logging.WARNING), ("INFO", logging.INFO),
    ])
    def test_set_log_level(self, level, expected):
        """Test that set_log_level accepts numbers and names."""
        logger = logging.getLogger("advscenario")
        try:
            advscenario.set_log_level(level)
            assert logger.level == expected
        finally:
            advscenario.set_log_level(logging.INFO)


class TestLoggingCapture:
    """Test that modules log through the package hierarchy."""

    def test_calibration_logs(self, caplog):
        """Test that IDM calibration reports its result."""
        with caplog.at_level(logging.INFO, logger="advscenario"):
            calibrate_idm(synthetic_traces(count=1, n=30), GaConfig(population=4, generations=2))
        records = [r for r in caplog.records if r.name == "advscenario.calibration"]
        assert records

    def test_debug_hidden_at_info(self, caplog):
        """Test that debug messages are filtered at the default level."""
        with caplog.at_level(logging.INFO, logger="advscenario"):
            logging.getLogger("advscenario.kernel").debug("hidden")
        assert "hidden" not in caplog.text


class TestProgress:
    """Test progress callbacks."""

    def test_callback_events(self):
        """Test that a training loop reports start, one update per episode and finish."""
        events = []
        progress.set_callback(lambda event, op, id, current, total, message: events.append((event, op, current, total)))
        try:
            train_ppo(ToyTargetEnv(), TrainingConfig(batch_size=16, minibatch_size=8, epochs=1, hidden=(4,)),
                      seed=0, episodes=3)
        finally:
            progress.disable()
        assert events[0][0] == "start"
        assert events[-1] == ("finish", events[0][1], 3, 3)
        assert [e[2] for e in events if e[0] == "update"] == [1, 2, 3]

    def test_metrics_message(self):
        """Test that keyword metrics become the status string unless a message is given."""
        messages = []
        progress.set_callback(lambda event, op, id, current, total, message: messages.append(message))
        try:
            with progress.track("IDM calibration", total=2) as bar:
                bar.update(best=0.03125, acc=0.5)
                bar.update(message="done", best=0.01)
        finally:
            progress.disable()
        assert messages == [None, "best=0.03125 acc=0.5", "done", None]
        assert progress.format_metrics({}) is None

    def test_track_without_tracker(self):
        """Test that tracking with no tracker still counts updates."""
        progress.disable()
        with progress.track("noop", total=2) as bar:
            bar.update()
            bar.update()
        assert bar.current == 2

    def test_tqdm_optional(self):
        """Test that enabling tqdm works when it is installed."""
        pytest.importorskip("tqdm")
        try:
            progress.enable_tqdm()
            with progress.track("bars", total=1) as bar:
                bar.update(1, message=str(np.float64(1.0)))
        finally:
            progress.disable()
