import json

import pytest
from conftest import TINY

from crossbid.core_export import load_reports
from crossbid.mem_config import Config
from crossbid.mem_manifest import latest_manifest
from crossbid.ui_main import build_parser, main


# Recipes {{{
def test_recipes_list(capsys):
  assert main(["recipes", "list"]) == 0
  out = capsys.readouterr().out
  assert "desk" in out
  assert "no-cpc" in out


def test_recipes_save_and_delete(capsys):
  assert main(["recipes", "save", "fast-top", '{"top.epochs": 5}']) == 0
  main(["recipes", "list"])
  assert "fast-top" in capsys.readouterr().out
  assert main(["recipes", "delete", "fast-top"]) == 0
  main(["recipes", "list"])
  assert "fast-top" not in capsys.readouterr().out


def test_recipes_builtin_name_rejected(capsys):
  assert main(["recipes", "save", "desk", "{}"]) == 1
  assert "Config Error" in capsys.readouterr().err


def test_unknown_recipe(capsys):
  assert main(["recipes", "list", "--recipe", "nope"]) == 1
  err = capsys.readouterr().err
  assert err.startswith("Config Error")
  assert "nope" in err
# }}}


def test_parser_defaults():
  args = build_parser().parse_args(["evaluate"])
  assert args.policy == ["hmmcb"]
  assert args.out == "reports.jsonl"
  with pytest.raises(SystemExit):
    build_parser().parse_args(["evaluate", "--policy", "oracle"])


def test_train_without_data(tmp_path, capsys):
  (tmp_path / "data").mkdir()
  assert main(["train", "--data", str(tmp_path / "data"), "--out", str(tmp_path / "run")]) == 1
  err = capsys.readouterr().err
  assert err.startswith("Training Error")
  assert "gen-logs" in err


def test_evaluate_hmmcb_needs_run(tmp_path, capsys):
  assert main(["evaluate", "--run", str(tmp_path), "--out", str(tmp_path / "r.jsonl")]) == 1
  assert "Evaluation Error" in capsys.readouterr().err


def test_full_cycle(tmp_path, capsys):
  config = tmp_path / "tiny.json"
  with open(config, 'w') as f:
    json.dump(Config(overrides=TINY).snapshot(), f)
  common = ["--config", str(config), "--seed", "0"]
  data, run = tmp_path / "data", tmp_path / "run"
  reports, out = tmp_path / "reports.jsonl", tmp_path / "report"

  assert main(["gen-logs", "--out", str(data), *common]) == 0
  for name in ("top_train", "top_eval", "bottom_train", "bottom_eval"):
    assert (data / f"{name}.npz").exists()
  assert (data / "raw").is_dir()

  assert main(["train", "--data", str(data), "--out", str(run), *common]) == 0
  assert latest_manifest(run).name == "manifest_v0.json"

  assert main(["evaluate", "--run", str(run), "--policy", "hmmcb", "pid",
               "--out", str(reports), *common]) == 0
  loaded = load_reports(reports)
  assert [(r.policy, r.version) for r in loaded] == [("hmmcb", "v0"), ("pid", "")]

  capsys.readouterr()
  assert main(["report", str(reports), "--out", str(out), *common]) == 0
  assert "2 runs" in capsys.readouterr().out
  assert (out / "report.csv").exists()
