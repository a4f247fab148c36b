import json

import pytest

from crossbid.mem_config import Config


def test_defaults_and_dotted_access():
  config = Config()
  assert config.get("world.channels") == ["feed", "search", "brand", "recommendation"]
  assert config.get("top.schedule") == "vp"
  assert config.get("logs.train_days") == 28
  with pytest.raises(KeyError):
    config.get("top.nonexistent")
  with pytest.raises(KeyError):
    config.set("bottom.gamma2", 0.5)


def test_get_returns_copies():
  config = Config()
  mixture = config.get("logs.mixture")
  mixture["expert"] = 1.0
  assert config.get("logs.mixture")["expert"] == 0.4


def test_derive_leaves_original_untouched():
  config = Config()
  derived = config.derive({"top.cpc_weight": 0.0})
  assert derived.get("top.cpc_weight") == 0.0
  assert config.get("top.cpc_weight") == 1.0


def test_hashes():
  a, b = Config(), Config()
  assert a.hash() == b.hash()
  assert len(a.hash()) == 64
  trained = a.derive({"top.epochs": 3})
  assert trained.hash() != a.hash()
  assert trained.world_hash() == a.world_hash()
  assert a.derive({"world.advertisers": 5}).world_hash() != a.world_hash()


def test_file_overrides_only_named_keys(tmp_path):
  path = tmp_path / "config.json"
  path.write_text(json.dumps({"top": {"alpha": 2.5}, "logs": {"mixture": {"expert": 1.0}}}))
  config = Config(path)
  assert config.get("top.alpha") == 2.5
  assert config.get("top.lr") == 1e-5
  assert config.get("logs.mixture") == {"expert": 1.0}


def test_missing_file_is_created_with_defaults(tmp_path):
  path = tmp_path / "sub" / "config.json"
  Config(path)
  assert json.loads(path.read_text())["top"]["alpha"] == 1.0


def test_corrupted_file_falls_back_to_defaults(tmp_path):
  path = tmp_path / "config.json"
  path.write_text("{not json")
  assert Config(path).get("top.alpha") == 1.0


def test_unknown_key_in_file_is_rejected(tmp_path):
  path = tmp_path / "config.json"
  path.write_text(json.dumps({"top": {"alhpa": 2.0}}))
  with pytest.raises(KeyError, match="top.alhpa"):
    Config(path)


def test_set_persists(tmp_path):
  path = tmp_path / "config.json"
  config = Config(path)
  config.set("eval.days", 3, persist=True)
  assert Config(path).get("eval.days") == 3


def test_from_snapshot():
  snapshot = Config(overrides={"bottom.central": False}).snapshot()
  rebuilt = Config.from_snapshot(snapshot)
  assert rebuilt.get("bottom.central") is False
  assert rebuilt.hash() == Config(overrides={"bottom.central": False}).hash()
