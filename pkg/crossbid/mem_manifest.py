from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any


logger = logging.getLogger(__name__)

MANIFEST_FORMAT = "crossbid.manifest"


@dataclass
class RunManifest:
  """Everything needed to reproduce one trained model version.

  Checkpoint and dataset entries map a name to {"path", "sha256"}. Checkpoint paths are
  relative to the run directory, dataset paths are absolute.
  """
  run_id: str
  version: int
  seed: int
  config: dict[str, Any]
  config_hash: str
  world_hash: str
  checkpoints: dict[str, dict[str, str]] = field(default_factory=dict)
  datasets: dict[str, dict[str, str]] = field(default_factory=dict)
  traces: dict[str, str] = field(default_factory=dict)
  wall_clock: dict[str, float] = field(default_factory=dict)
  ancestry: list[str] = field(default_factory=list)
  created: str = ""

  def __post_init__(self) -> None:
    if self.version < 0:
      raise ValueError(f"version must be >= 0, got {self.version}")

  @property
  def tag(self) -> str:
    return f"v{self.version}"

  def checkpoint_path(self, run_dir: Path | str, name: str) -> Path:
    if name not in self.checkpoints:
      raise KeyError(f"manifest {self.run_id} has no checkpoint '{name}'")
    return Path(run_dir) / self.checkpoints[name]["path"]

  def to_dict(self) -> dict[str, Any]:
    return {"format": MANIFEST_FORMAT, **asdict(self)}

  @classmethod
  def from_dict(cls, data: dict[str, Any]) -> RunManifest:
    if data.get("format") != MANIFEST_FORMAT:
      raise ValueError("not a crossbid run manifest")
    return cls(**{k: v for k, v in data.items() if k != "format"})


def manifest_path(run_dir: Path | str, version: int) -> Path:
  return Path(run_dir) / f"manifest_v{version}.json"


def save_manifest(manifest: RunManifest, run_dir: Path | str) -> Path:
  """Write the manifest for its version. Existing versions are never overwritten."""
  path = manifest_path(run_dir, manifest.version)
  path.parent.mkdir(parents=True, exist_ok=True)
  try:
    with open(path, 'x') as f:
      json.dump(manifest.to_dict(), f, indent=2)
  except FileExistsError as e:
    raise RuntimeError(f"manifest {path} already exists; model versions are append-only") from e
  logger.info("wrote manifest %s", path)
  return path


def load_manifest(path: Path | str) -> RunManifest:
  path = Path(path)
  try:
    with open(path, 'r') as f:
      return RunManifest.from_dict(json.load(f))
  except (OSError, json.JSONDecodeError, TypeError) as e:
    raise ValueError(f"cannot read manifest {path}: {e}") from e


def latest_manifest(run_dir: Path | str) -> Path | None:
  """Path of the highest manifest version in a run directory, if any."""
  found = sorted(Path(run_dir).glob("manifest_v*.json"),
                 key=lambda p: int(p.stem.removeprefix("manifest_v")))
  return found[-1] if found else None
