"""Run configuration.

A RunConfig is resolved in layers: shipped defaults, then an optional YAML
file, then `key.path=value` overrides (values parsed as YAML), then the
`--seed` / `--out` flags. Every validation failure raises ConfigError
naming the dotted path of the offending key.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import yaml

from .adversarial import AdvRewardConfig
from .calibration import GaConfig
from .errors import AdvScenarioError, ConfigError
from .gail import ExpertRules
from .ingest import Schema
from .ppo import TrainingConfig
from .preprocess import ScreeningRules
from .roads import ROAD_PRESETS, RoadNetwork, load_road
from .synthetic import SynthConfig
from .traffic import SceneConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DatasetConfig:
    """Trajectory files; empty means the synth-data output in the run directory."""

    paths: List[str] = field(default_factory=list)
    schema: str = Schema.CANONICAL.value

    def __post_init__(self):
        Schema(self.schema)


@dataclass(frozen=True)
class RoadConfig:
    preset: Optional[str] = "us101"
    spec_path: Optional[str] = None

    def __post_init__(self):
        if self.spec_path is None and self.preset not in ROAD_PRESETS:
            raise ValueError(f"unknown road preset {self.preset!r}; expected one of {sorted(ROAD_PRESETS)}")


@dataclass(frozen=True)
class ScreeningConfig:
    preset: str = "ngsim"
    rules: Dict[str, Any] = field(default_factory=dict)
    sema_width_s: float = 0.5

    def build(self) -> ScreeningRules:
        return ScreeningRules.preset(self.preset, **self.rules)


@dataclass(frozen=True)
class MobilConfig:
    politeness: float = 0.5


@dataclass(frozen=True)
class GenerationConfig:
    runs: int = 100
    workers: int = 1

    def __post_init__(self):
        if self.runs < 1 or self.workers < 1:
            raise ValueError("runs and workers must be at least 1")


@dataclass(frozen=True)
class AnalysisConfig:
    """Effectiveness weights have no default; the score is skipped without them."""

    clusters: int = 10
    pca_components: int = 2
    weights: Optional[List[float]] = None

    def __post_init__(self):
        if self.weights is not None and len(self.weights) != 2:
            raise ValueError("weights must be [w_naturalness, w_adversariality]")
        if self.clusters < 1 or self.pca_components < 1:
            raise ValueError("clusters and pca_components must be at least 1")


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    road: RoadConfig = field(default_factory=RoadConfig)
    screening: ScreeningConfig = field(default_factory=ScreeningConfig)
    ga: GaConfig = field(default_factory=GaConfig)
    mobil: MobilConfig = field(default_factory=MobilConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    reward: AdvRewardConfig = field(default_factory=AdvRewardConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    expert: ExpertRules = field(default_factory=ExpertRules)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    output_dir: str = "runs/default"
    seed: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return _plain(asdict(self))

    def road_network(self) -> RoadNetwork:
        if self.road.spec_path is not None:
            return load_road(self.road.spec_path)
        return ROAD_PRESETS[self.road.preset]()

    @property
    def out(self) -> Path:
        return Path(self.output_dir)


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def config_hash(config: RunConfig) -> str:
    """SHA-256 of the canonical JSON of the resolved configuration.

    The run directory is left out; copying a run keeps its hash.
    """
    body = config.to_dict()
    body.pop("output_dir")
    canonical = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True)


def _check_type(default: Any, value: Any, path: str) -> Any:
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true or false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
    elif isinstance(default, (tuple, list)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return tuple(value) if isinstance(default, tuple) else list(value)
    elif isinstance(default, dict) and not isinstance(value, Mapping):
        raise ConfigError(path, f"expected a mapping, got {value!r}")
    return value


def _build(cls: type, data: Any, path: str) -> Any:
    """Instantiate a config dataclass from a mapping, validating keys and types."""
    if not isinstance(data, Mapping):
        raise ConfigError(path or "<root>", f"expected a mapping, got {type(data).__name__}")
    defaults = cls()
    known = {f.name for f in fields(cls) if f.init}
    kwargs = {}
    for key, value in data.items():
        key_path = f"{path}.{key}" if path else str(key)
        if key not in known:
            raise ConfigError(key_path, f"unknown key; expected one of {sorted(known)}")
        current = getattr(defaults, key)
        if is_dataclass(current):
            kwargs[key] = _build(type(current), value, key_path)
        else:
            kwargs[key] = _check_type(current, value, key_path)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (AdvScenarioError, TypeError, ValueError) as e:
        raise ConfigError(path or "<root>", str(e)) from e


def _merge(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def parse_override(text: str) -> Dict[str, Any]:
    """`a.b.c=value` as a nested mapping; the value is parsed as YAML.

    Raises:
        ConfigError: If the text has no '=' or an empty key.
    """
    key, sep, raw = text.partition("=")
    key = key.strip()
    if not sep or not key or any(not part for part in key.split(".")):
        raise ConfigError(key or text, "override must look like key.path=value")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(key, f"cannot parse value {raw!r}: {e}") from e
    nested: Dict[str, Any] = {}
    cursor = nested
    parts = key.split(".")
    for part in parts[:-1]:
        cursor = cursor.setdefault(part, {})
    cursor[parts[-1]] = value
    return nested


def _check_paths(config: RunConfig) -> None:
    for i, p in enumerate(config.dataset.paths):
        if not Path(p).exists():
            raise ConfigError(f"dataset.paths[{i}]", f"file {p} does not exist")
    if config.road.spec_path is not None and not Path(config.road.spec_path).exists():
        raise ConfigError("road.spec_path", f"file {config.road.spec_path} does not exist")
    try:
        config.screening.build()
    except ValueError as e:
        raise ConfigError("screening", str(e)) from e


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
    out: Optional[Union[str, Path]] = None,
) -> RunConfig:
    """Resolve defaults, the YAML file, overrides and flags into a RunConfig.

    Raises:
        ConfigError: For unreadable files, unknown keys, wrong types,
            invalid values or referenced files that do not exist.
    """
    data = RunConfig().to_dict()
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                loaded = yaml.safe_load(f)
        except OSError as e:
            raise ConfigError("--config", f"cannot read {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError("--config", f"{path} is not valid YAML: {e}") from e
        if loaded is not None:
            if not isinstance(loaded, Mapping):
                raise ConfigError("<root>", f"{path} must contain a mapping at the top level")
            data = _merge(data, loaded)
    for text in overrides:
        data = _merge(data, parse_override(text))
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        data["output_dir"] = str(out)
    config = _build(RunConfig, data, "")
    _check_paths(config)
    logger.debug("Resolved configuration %s", config_hash(config)[:12])
    return config
