"""Exception hierarchy for advscenario.

Every error raised on purpose by the package derives from AdvScenarioError
and from the closest builtin, so callers may catch either.
"""

from typing import Iterable, Optional


class AdvScenarioError(Exception):
    """Base class for all advscenario errors."""


class InvalidStateError(AdvScenarioError, ValueError):
    """A vehicle state or control contains non-finite or out-of-range values."""


class VehicleNotFoundError(AdvScenarioError, KeyError):
    """A vehicle id is not present in the world."""

    def __init__(self, vehicle_id: int):
        self.vehicle_id = vehicle_id
        super().__init__(f"Vehicle {vehicle_id} is not present in the world")

    def __str__(self) -> str:
        return self.args[0]


class ParseError(AdvScenarioError, ValueError):
    """A row of a trajectory file could not be parsed."""

    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class SchemaError(AdvScenarioError, ValueError):
    """A trajectory file lacks mandatory columns."""

    def __init__(self, schema: str, missing: Iterable[str]):
        self.schema = schema
        self.missing = sorted(missing)
        super().__init__(
            f"Input does not match the '{schema}' schema; missing column(s): "
            f"{', '.join(self.missing)}"
        )


class RoadSpecError(AdvScenarioError, ValueError):
    """A road description is invalid."""


class DomainError(AdvScenarioError, ValueError):
    """A model was evaluated outside its mathematical domain."""


class SegmentTooShortError(AdvScenarioError, ValueError):
    """A segment has too few samples for the requested operation."""


class CalibrationError(AdvScenarioError, ValueError):
    """Calibration could not run on the given corpus."""


class StaleCacheError(AdvScenarioError, RuntimeError):
    """A forward cache no longer matches the network parameters."""


class CheckpointError(AdvScenarioError, ValueError):
    """A checkpoint file is unreadable or of an unsupported version."""


class ConfigError(AdvScenarioError, ValueError):
    """A run configuration value is invalid."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class MissingArtifactError(AdvScenarioError, FileNotFoundError):
    """An upstream stage artifact is missing."""

    def __init__(self, artifact: str, producer: str):
        self.artifact = artifact
        self.producer = producer
        super().__init__(
            f"Required artifact '{artifact}' not found. "
            f"Run `advscenario {producer}` first to produce it."
        )

    def __str__(self) -> str:
        return self.args[0]


class HashMismatchError(AdvScenarioError, ValueError):
    """Inputs produced under different configurations were mixed."""
