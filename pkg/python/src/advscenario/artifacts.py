"""Stage artifacts: atomic writes, manifests and config-hash checks.

Every command writes its outputs through `atomic_write` (temp file in the
target directory, then `os.replace`) and records them in a manifest that
carries the configuration hash and seed. Manifests hold no timestamps, so
repeated runs with the same inputs produce identical files.
"""

import hashlib
import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Union

import pandas as pd
import pyarrow as pa
import pyarrow.parquet as pq

from .errors import HashMismatchError, MissingArtifactError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
MANIFEST_SUFFIX = ".manifest.json"


def atomic_write(path: PathLike, data: Union[str, bytes]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.debug("Wrote %s (%d bytes)", path, len(payload))
    return path


def dumps_json(obj: Any) -> str:
    """Canonical JSON: sorted keys, repr floats, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path: PathLike, obj: Any) -> Path:
    return atomic_write(path, dumps_json(obj))


def write_jsonl(path: PathLike, rows: Iterable[Mapping[str, Any]]) -> Path:
    return atomic_write(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def write_csv(path: PathLike, frame: pd.DataFrame) -> Path:
    return atomic_write(path, frame.to_csv(index=False, lineterminator="\n"))


def write_parquet(path: PathLike, table: pa.Table) -> Path:
    sink = pa.BufferOutputStream()
    pq.write_table(table, sink)
    return atomic_write(path, sink.getvalue().to_pybytes())


def require(path: PathLike, producer: str) -> Path:
    """Return path if it exists, otherwise name the command that produces it.

    Raises:
        MissingArtifactError: If path does not exist.
    """
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(str(path), producer)
    return path


def read_json(path: PathLike, producer: str) -> Any:
    with open(require(path, producer), "r", encoding="utf-8") as f:
        return json.load(f)


def read_jsonl(path: PathLike, producer: str) -> List[dict]:
    with open(require(path, producer), "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def read_parquet(path: PathLike, producer: str) -> pa.Table:
    return pq.read_table(require(path, producer))


def file_sha256(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _versions() -> Dict[str, str]:
    versions = {}
    for name in ("advscenario", "numpy", "pandas", "pyarrow"):
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


@dataclass
class Manifest:
    command: str
    config_hash: str
    seed: int
    artifacts: Dict[str, str] = field(default_factory=dict)
    versions: Dict[str, str] = field(default_factory=_versions)
    extra: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Manifest":
        return cls(**dict(data))


def manifest_path(out_dir: PathLike, command: str) -> Path:
    return Path(out_dir) / f"{command}{MANIFEST_SUFFIX}"


def write_manifest(
    out_dir: PathLike,
    command: str,
    config_hash: str,
    seed: int,
    files: Iterable[PathLike],
    extra: Optional[Mapping[str, Any]] = None,
) -> Manifest:
    """Hash each produced file and write `<command>.manifest.json` to out_dir."""
    out_dir = Path(out_dir)
    artifacts = {}
    for f in files:
        f = Path(f)
        artifacts[f.relative_to(out_dir).as_posix() if f.is_relative_to(out_dir) else f.name] = file_sha256(f)
    manifest = Manifest(command, config_hash, seed, dict(sorted(artifacts.items())), extra=dict(extra or {}))
    write_json(manifest_path(out_dir, command), asdict(manifest))
    logger.info("%s: wrote %d artifact(s) to %s", command, len(artifacts), out_dir)
    return manifest


def load_manifest(out_dir: PathLike, command: str) -> Manifest:
    return Manifest.from_dict(read_json(manifest_path(out_dir, command), command))


def check_config_hashes(manifests: Iterable[Manifest], expected: Optional[str] = None, force: bool = False) -> None:
    """Refuse inputs produced under different configurations.

    Raises:
        HashMismatchError: If the manifests (and expected, when given)
            disagree on the config hash and force is False.
    """
    hashes: Dict[str, List[str]] = {}
    for m in manifests:
        hashes.setdefault(m.config_hash, []).append(m.command)
    if expected is not None:
        hashes.setdefault(expected, []).append("<current config>")
    if len(hashes) <= 1:
        return
    detail = "; ".join(f"{h[:12]}: {', '.join(cmds)}" for h, cmds in sorted(hashes.items()))
    if force:
        logger.warning("Mixing artifacts from different configurations (%s)", detail)
        return
    raise HashMismatchError(
        f"Artifacts were produced under different configurations ({detail}). "
        "Re-run the upstream commands with one config, or pass --force to proceed anyway."
    )
