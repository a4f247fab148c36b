from __future__ import annotations

import json
import logging
import zipfile
from pathlib import Path
from typing import Any

import numpy as np


logger = logging.getLogger(__name__)

SCHEMA_VERSION = 2
FORMAT_NAME = "crossbid.logs"
KINDS = ("top", "bottom")
SUFFIXES = (".jsonl", ".npz")

TOP_COLUMNS = ("state", "action", "reward", "next_state", "done", "day", "advertiser",
               "trajectory", "budget", "cpc_target", "tier", "label")
BOTTOM_COLUMNS = ("obs", "action", "reward", "next_obs", "policy_next", "live", "done", "t",
                  "day", "advertiser", "trajectory")


class DatasetError(ValueError):
  """Missing, truncated or malformed dataset file."""


class SchemaVersionError(DatasetError):
  def __init__(self, found: Any, expected: int = SCHEMA_VERSION) -> None:
    super().__init__(f"dataset schema version {found} cannot be read by schema version {expected}")
    self.found = found
    self.expected = expected


class LogDataset: # {{{
  """Immutable column store of transitions, ordered by trajectory then time.

  Every column shares the first axis. `meta` carries the generation config hash and
  whatever the consumers need to rebuild networks (widths, bounds, layout).
  """

  def __init__(self, kind: str, columns: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> None:
    if kind not in KINDS:
      raise ValueError(f"dataset kind must be one of {KINDS}, got '{kind}'")
    expected = TOP_COLUMNS if kind == "top" else BOTTOM_COLUMNS
    missing = [c for c in expected if c not in columns]
    if missing:
      raise ValueError(f"{kind} dataset is missing columns {missing}")
    lengths = {len(v) for v in columns.values()}
    if len(lengths) > 1:
      raise ValueError(f"columns differ in length: {sorted(lengths)}")
    self.kind = kind
    self.meta = json.loads(json.dumps(meta or {}))
    self.meta.setdefault("config_hash", "")
    self._columns: dict[str, np.ndarray] = {}
    for name in expected:
      arr = np.array(columns[name])
      arr.setflags(write=False)
      self._columns[name] = arr
    trajectory = self._columns["trajectory"]
    if len(trajectory) and np.any(np.diff(trajectory) < 0):
      raise ValueError("rows must be grouped by trajectory in ascending order")

  @property
  def schema_version(self) -> int:
    return SCHEMA_VERSION

  @property
  def config_hash(self) -> str:
    return self.meta["config_hash"]

  def __len__(self) -> int:
    return len(self._columns["trajectory"])

  def __getitem__(self, name: str) -> np.ndarray:
    return self._columns[name]

  @property
  def columns(self) -> dict[str, np.ndarray]:
    return dict(self._columns)

  def trajectories(self) -> list[slice]:
    ids = self._columns["trajectory"]
    if len(ids) == 0:
      return []
    starts = np.flatnonzero(np.concatenate([[True], ids[1:] != ids[:-1]]))
    stops = np.append(starts[1:], len(ids))
    return [slice(int(a), int(b)) for a, b in zip(starts, stops)]

  def select(self, mask: np.ndarray) -> LogDataset:
    return LogDataset(self.kind, {k: v[mask] for k, v in self._columns.items()}, self.meta)

  @classmethod
  def concat(cls, datasets: list[LogDataset]) -> LogDataset:
    """Append datasets; trajectory ids of later parts are shifted past earlier ones."""
    if not datasets:
      raise ValueError("nothing to concatenate")
    kind = datasets[0].kind
    parts: dict[str, list[np.ndarray]] = {k: [] for k in datasets[0]._columns}
    offset = 0
    for ds in datasets:
      if ds.kind != kind:
        raise ValueError("cannot mix top and bottom datasets")
      for k, v in ds._columns.items():
        parts[k].append(v + offset if k == "trajectory" else v)
      if len(ds):
        offset = int(parts["trajectory"][-1].max()) + 1
    return cls(kind, {k: np.concatenate(v) for k, v in parts.items()}, datasets[-1].meta)

  def equals(self, other: LogDataset) -> bool:
    if self.kind != other.kind or self.meta != other.meta:
      return False
    return all(
      a.dtype == b.dtype and a.shape == b.shape and np.array_equal(a, b)
      for a, b in ((self._columns[k], other._columns[k]) for k in self._columns)
    )

  def _header(self) -> dict[str, Any]:
    return {
      "format": FORMAT_NAME,
      "schema_version": SCHEMA_VERSION,
      "kind": self.kind,
      "rows": len(self),
      "meta": self.meta,
      "columns": {k: {"dtype": v.dtype.str, "shape": list(v.shape[1:])} for k, v in self._columns.items()},
    }
# }}}


# Save / Load {{{
def save_dataset(ds: LogDataset, path: Path | str) -> Path:
  """Write as line-delimited JSON (.jsonl) or compressed columns (.npz), chosen by suffix."""
  path = Path(path)
  if path.suffix not in SUFFIXES:
    raise ValueError(f"dataset path must end in one of {SUFFIXES}: {path}")
  path.parent.mkdir(parents=True, exist_ok=True)
  header = ds._header()
  if path.suffix == ".jsonl":
    names = list(header["columns"])
    with open(path, 'w') as f:
      f.write(json.dumps(header) + "\n")
      for i in range(len(ds)):
        f.write(json.dumps({k: ds[k][i].tolist() for k in names}) + "\n")
  else:
    with open(path, 'wb') as f:
      np.savez_compressed(f, __header__=np.array(json.dumps(header)), **ds.columns)
  logger.debug("saved %s dataset with %d rows to %s", ds.kind, len(ds), path)
  return path


def _check_header(header: Any, path: Path) -> dict[str, Any]:
  if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
    raise DatasetError(f"{path} is not a crossbid dataset")
  if header.get("schema_version") != SCHEMA_VERSION:
    raise SchemaVersionError(header.get("schema_version"))
  return header


def _load_jsonl(path: Path) -> LogDataset:
  raw = path.read_bytes()
  offset = 0
  header: dict[str, Any] | None = None
  records: list[dict[str, Any]] = []
  for line in raw.splitlines(keepends=True):
    text = line.strip()
    if text:
      try:
        item = json.loads(text)
      except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: malformed record at byte offset {offset + e.pos}") from e
      if header is None:
        header = _check_header(item, path)
      else:
        records.append(item)
    offset += len(line)
  if header is None:
    raise DatasetError(f"{path}: empty file, no header at byte offset 0")
  if len(records) != header["rows"]:
    raise DatasetError(
      f"{path}: expected {header['rows']} records, found {len(records)} (truncated at byte offset {len(raw)})"
    )
  columns = {}
  for name, info in header["columns"].items():
    dtype = np.dtype(info["dtype"])
    try:
      values = [r[name] for r in records]
    except KeyError as e:
      raise DatasetError(f"{path}: record without column '{name}'") from e
    columns[name] = np.array(values, dtype=dtype).reshape((len(records), *info["shape"]))
  return LogDataset(header["kind"], columns, header["meta"])


def _load_npz(path: Path) -> LogDataset:
  size = path.stat().st_size
  try:
    with np.load(path, allow_pickle=False) as archive:
      header = _check_header(json.loads(str(archive["__header__"])), path)
      columns = {name: archive[name] for name in header["columns"]}
  except (zipfile.BadZipFile, EOFError, OSError, KeyError, json.JSONDecodeError) as e:
    raise DatasetError(f"{path}: truncated or corrupt archive ({size} bytes, failed before byte offset {size})") from e
  except ValueError as e:
    if isinstance(e, DatasetError):
      raise
    raise DatasetError(f"{path}: corrupt archive ({size} bytes, failed before byte offset {size})") from e
  return LogDataset(header["kind"], columns, header["meta"])


def load_dataset(path: Path | str) -> LogDataset:
  path = Path(path)
  if not path.exists():
    raise DatasetError(f"dataset not found: {path}")
  if path.suffix == ".jsonl":
    return _load_jsonl(path)
  if path.suffix == ".npz":
    return _load_npz(path)
  raise DatasetError(f"unknown dataset format: {path}")


def dataset_path(directory: Path | str, name: str, fmt: str = "npz") -> Path:
  """Location of a named dataset (e.g. 'bottom_train') inside a log directory."""
  if f".{fmt}" not in SUFFIXES:
    raise ValueError(f"unknown dataset format '{fmt}'")
  return Path(directory) / f"{name}.{fmt}"


def find_dataset(directory: Path | str, name: str) -> Path:
  for suffix in SUFFIXES:
    candidate = Path(directory) / f"{name}{suffix}"
    if candidate.exists():
      return candidate
  raise DatasetError(f"dataset '{name}' not found in {directory}")
# }}}
