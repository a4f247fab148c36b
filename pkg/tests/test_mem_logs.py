import json

import numpy as np
import pytest

from crossbid.mem_logs import (
  DatasetError, LogDataset, SchemaVersionError, dataset_path, find_dataset, load_dataset,
  save_dataset,
)


def _top(n=6, trajectories=(0, 0, 0, 1, 1, 1)):
  rng = np.random.default_rng(0)
  return LogDataset("top", {
    "state": rng.normal(size=(n, 4)).astype(np.float32),
    "action": rng.uniform(size=(n, 2)).astype(np.float32),
    "reward": rng.integers(0, 5, n).astype(np.float32),
    "next_state": rng.normal(size=(n, 4)).astype(np.float32),
    "done": np.array([i % 3 == 2 for i in range(n)]),
    "day": np.arange(n, dtype=np.int64) % 3 + 1,
    "advertiser": np.zeros(n, dtype=np.int64),
    "trajectory": np.array(trajectories, dtype=np.int64),
    "budget": np.full(n, 5.0, dtype=np.float32),
    "cpc_target": np.ones(n, dtype=np.float32),
    "tier": np.array(["expert", "medium", "random"] * (n // 3)),
    "label": np.array(["expert"] * n),
  }, {"config_hash": "abc", "num_channels": 2})


@pytest.mark.parametrize("fmt", ["npz", "jsonl"])
def test_save_and_load(tmp_path, fmt):
  ds = _top()
  path = save_dataset(ds, dataset_path(tmp_path, "top_train", fmt))
  loaded = load_dataset(path)
  assert loaded.equals(ds)
  assert loaded.config_hash == "abc"
  assert find_dataset(tmp_path, "top_train") == path


def test_truncated_jsonl_reports_offset(tmp_path):
  path = save_dataset(_top(), tmp_path / "top.jsonl")
  lines = path.read_bytes().splitlines(keepends=True)
  path.write_bytes(b"".join(lines[:-1]))
  with pytest.raises(DatasetError, match="byte offset"):
    load_dataset(path)


def test_malformed_record_reports_offset(tmp_path):
  path = save_dataset(_top(), tmp_path / "top.jsonl")
  lines = path.read_bytes().splitlines(keepends=True)
  header_size = len(lines[0])
  path.write_bytes(lines[0] + b'{"state": [1, \n' + b"".join(lines[2:]))
  with pytest.raises(DatasetError) as info:
    load_dataset(path)
  offset = int(str(info.value).rsplit(" ", 1)[-1])
  assert offset >= header_size


def test_old_schema_is_rejected(tmp_path):
  path = save_dataset(_top(), tmp_path / "top.jsonl")
  lines = path.read_text().splitlines(keepends=True)
  header = json.loads(lines[0])
  header["schema_version"] = 1
  path.write_text(json.dumps(header) + "\n" + "".join(lines[1:]))
  with pytest.raises(SchemaVersionError) as info:
    load_dataset(path)
  assert info.value.found == 1


def test_truncated_npz(tmp_path):
  path = save_dataset(_top(), tmp_path / "top.npz")
  data = path.read_bytes()
  path.write_bytes(data[: len(data) // 2])
  with pytest.raises(DatasetError, match="byte offset"):
    load_dataset(path)


def test_missing_and_unknown_files(tmp_path):
  with pytest.raises(DatasetError):
    load_dataset(tmp_path / "nothing.npz")
  with pytest.raises(DatasetError):
    find_dataset(tmp_path, "bottom_train")
  with pytest.raises(ValueError):
    dataset_path(tmp_path, "x", "csv")
  with pytest.raises(ValueError):
    save_dataset(_top(), tmp_path / "top.csv")


def test_dataset_validation():
  columns = _top().columns
  with pytest.raises(ValueError):
    LogDataset("middle", columns)
  with pytest.raises(ValueError):
    LogDataset("top", {k: v for k, v in columns.items() if k != "reward"})
  with pytest.raises(ValueError):
    LogDataset("top", {**columns, "reward": columns["reward"][:3]})
  with pytest.raises(ValueError):
    _top(trajectories=(1, 1, 1, 0, 0, 0))


def test_columns_are_read_only():
  ds = _top()
  with pytest.raises(ValueError):
    ds["reward"][0] = 10.0


def test_trajectories_and_concat():
  ds = _top()
  assert ds.trajectories() == [slice(0, 3), slice(3, 6)]
  both = LogDataset.concat([ds, ds])
  assert len(both) == 12
  assert list(both["trajectory"]) == [0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]
  assert list(both["day"][3:6]) == [1, 2, 3]
  with pytest.raises(ValueError):
    LogDataset.concat([])
