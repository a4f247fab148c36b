import warnings

import numpy as np
import pytest
from conftest import TINY

from crossbid.core_behavior import (
  EventLog, build_bottom_dataset, build_top_dataset, run_behavior_policy,
)
from crossbid.core_eval import evaluate_policy
from crossbid.core_features import ObservationLayout
from crossbid.core_hmmcb import (
  HierarchicalBidder, bottom_batch, build_trainers, context_width, load_bidder, top_batch,
  window_contexts,
)
from crossbid.core_nn import file_sha256
from crossbid.core_pipeline import StageError, finetune_cycle, train_pipeline
from crossbid.core_world import World
from crossbid.mem_config import Config
from crossbid.mem_logs import dataset_path, save_dataset
from crossbid.mem_manifest import latest_manifest


GAINS = {"kp": 0.4, "ki": 0.05, "kd": 0.1, "integral_limit": 2.0}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
  config = Config(overrides=TINY)
  world = World.from_config(config)
  log = run_behavior_policy(world, config.get("logs.mixture"), 0, 6, GAINS, expert_margin=0.9)
  top = build_top_dataset(log, world)
  bottom = build_bottom_dataset(log, world)
  data = tmp_path_factory.mktemp("data")
  save_dataset(top.select(top["day"] <= 4), dataset_path(data, "top_train"))
  save_dataset(bottom.select(bottom["day"] <= 4), dataset_path(data, "bottom_train"))
  run_dir = tmp_path_factory.mktemp("run")
  manifest = train_pipeline(config, data, run_dir, seed=0)
  return {"config": config, "world": world, "data": data, "run_dir": run_dir,
          "manifest": manifest, "bottom": bottom, "top": top}


# Training {{{
def test_checkpoints_written(trained):
  manifest, run_dir = trained["manifest"], trained["run_dir"]
  assert manifest.tag == "v0"
  assert set(manifest.checkpoints) == {"cmck", "bottom", "top"}
  for stage, entry in manifest.checkpoints.items():
    assert file_sha256(run_dir / entry["path"]) == entry["sha256"]
    assert (run_dir / manifest.traces[stage]).exists()
  assert (run_dir / "manifest_v0.json").exists()
  assert set(manifest.wall_clock) == {"cmck", "bottom", "top"}


def test_resume_reuses_checkpoints(trained):
  again = train_pipeline(trained["config"], trained["data"], trained["run_dir"], seed=0)
  assert again.checkpoints == trained["manifest"].checkpoints


def test_missing_dataset(tmp_path, trained):
  with pytest.raises(StageError) as info:
    train_pipeline(trained["config"], tmp_path, tmp_path / "run")
  assert info.value.stage == "bottom"
  assert "not found" in str(info.value)


def test_trained_bidder_evaluates(trained):
  reports = evaluate_policy(trained["config"], "hmmcb", [0], 1, trained["manifest"], trained["run_dir"])
  assert len(reports) == 1
  assert reports[0].version == "v0"
  assert reports[0].policy == "hmmcb"


def test_load_bidder(trained):
  bidder = load_bidder(trained["manifest"], trained["run_dir"], trained["world"])
  assert isinstance(bidder, HierarchicalBidder)
  assert bidder.encoders is not None and bidder.encoders.frozen
def test_empty_top_dataset(tmp_path, trained):
  top, bottom = trained["top"], trained["bottom"]
  save_dataset(bottom.select(bottom["day"] <= 4), dataset_path(tmp_path, "bottom_train"))
  save_dataset(top.select(top["day"] > 100), dataset_path(tmp_path, "top_train"))
  with pytest.raises(StageError) as info:
    train_pipeline(trained["config"], tmp_path, tmp_path / "run")
  assert info.value.stage == "top"
  assert "no complete episodes" in str(info.value)


def test_bottom_batch_copies_read_only_columns(trained):
  ds = trained["bottom"]
  with warnings.catch_warnings():
    warnings.simplefilter("error")
    batch = bottom_batch(ds)
  batch.live[0, 0] = not bool(batch.live[0, 0])
  assert bool(batch.live[0, 0]) != bool(ds["live"][0, 0])
# }}}


# Fine-tuning {{{
def test_finetune_without_logs(trained):
  manifest = trained["manifest"]
  assert finetune_cycle(manifest, trained["run_dir"], None, trained["world"]) is manifest


def test_finetune_schema_mismatch(trained):
  world = trained["world"]
  log = run_behavior_policy(world, trained["config"].get("logs.mixture"), 1, 1, GAINS, expert_margin=0.9)
  broken = EventLog(log.events.drop(columns=["histctr"]), log.allocations, log.days, log.seed,
                    log.config_hash)
  with pytest.raises(StageError) as info:
    finetune_cycle(trained["manifest"], trained["run_dir"], broken, world)
  assert info.value.stage == "finetune"
  assert "histctr" in str(info.value)


def test_finetune_next_version(trained):
  world, run_dir, manifest = trained["world"], trained["run_dir"], trained["manifest"]
  log = run_behavior_policy(world, trained["config"].get("logs.mixture"), 1, 2, GAINS, expert_margin=0.9)
  nxt = finetune_cycle(manifest, run_dir, log, world)
  assert nxt.tag == "v1"
  assert nxt.ancestry == ["v0"]
  assert nxt.checkpoints["cmck"] == manifest.checkpoints["cmck"]
  assert nxt.checkpoints["top"]["path"] == "top_v1.pt"
  assert (run_dir / "bottom_v1.npz").exists()
  assert latest_manifest(run_dir).name == "manifest_v1.json"
  # v0 stays untouched
  assert file_sha256(run_dir / "top_v0.pt") == manifest.checkpoints["top"]["sha256"]
# }}}


# Helpers {{{
def test_context_width():
  assert context_width(13) == 28


def test_top_batch_rejects_bottom(trained):
  with pytest.raises(ValueError):
    top_batch(trained["bottom"])


def test_window_contexts(trained):
  config, ds = trained["config"], trained["bottom"]
  layout = ObservationLayout.from_dict(ds.meta["layout"])
  bounds = [tuple(b) for b in ds.meta["bounds"]]
  _, _, encoders = build_trainers(config, layout, bounds, 24, 0)
  with pytest.raises(RuntimeError):
    window_contexts(ds, encoders, 4)
  encoders.freeze()
  contexts = window_contexts(ds, encoders, 4)
  assert contexts.shape == (len(ds), ds["live"].shape[1], encoders.z_width)
  first = {}
  for i in range(len(ds)):
    for p in np.flatnonzero(ds["live"][i]):
      first.setdefault((int(ds["trajectory"][i]), int(p)), i)
  for (_, p), i in first.items():
    assert np.all(contexts[i, p] == 0.0)
# }}}
