from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Callable, Iterator

import pandas as pd
import torch
from torch import nn

from .core_behavior import EventLog, build_bottom_dataset, build_top_dataset
from .core_cmck import KnowledgeEncoders, train_task_infer
from .core_features import ObservationLayout
from .core_hmmcb import (
  bottom_batch, build_trainers, channel_contexts, top_batch, window_contexts,
)
from .core_market import event_columns
from .core_nn import (
  NonFiniteError, OptimizerConfig, file_sha256, load_checkpoint, make_optimizer,
  read_checkpoint_meta, save_checkpoint,
)
from .core_world import World
from .mem_config import Config
from .mem_logs import DatasetError, LogDataset, find_dataset, load_dataset, save_dataset
from .mem_manifest import RunManifest, manifest_path, save_manifest


logger = logging.getLogger(__name__)

STAGES = ("cmck", "bottom", "top")
TRAIN_DATASETS = {"bottom": "bottom_train", "top": "top_train"}


class StageError(RuntimeError):
  def __init__(self, stage: str, message: str) -> None:
    super().__init__(f"stage '{stage}' failed: {message}")
    self.stage = stage


@contextmanager
def stage_guard(stage: str) -> Iterator[None]:
  """Re-raise training and data faults as StageError naming the stage."""
  try:
    yield
  except StageError:
    raise
  except (NonFiniteError, ValueError, RuntimeError, FileNotFoundError, KeyError) as e:
    raise StageError(stage, f"{type(e).__name__}: {e}") from e


def load_stage_dataset(stage: str, data_dir: Path | str, name: str) -> tuple[LogDataset, Path]:
  try:
    path = find_dataset(data_dir, name)
  except DatasetError as e:
    raise StageError(stage, f"dataset '{name}' not found in {data_dir}") from e
  with stage_guard(stage):
    return load_dataset(path), path


# Stages {{{
def fit_cmck(encoders: KnowledgeEncoders, ds: LogDataset, config: Config,
             seed: int) -> list[dict[str, float]]:
  settings = config.section("cmck")
  nn_settings = config.section("nn")
  optimizer = make_optimizer(encoders, OptimizerConfig(
    lr=settings["lr"], clip_norm=nn_settings["clip_norm"], betas=tuple(nn_settings["betas"]),
  ))
  contexts = channel_contexts(ds)
  channels = max(sum(1 for rows in contexts.values() if len(rows)), 1)
  return train_task_infer(encoders, contexts, settings["eta"], settings["steps"], optimizer,
                          rows=max(settings["batch"] // channels, 1),
                          normalize=settings["normalize_latents"], seed=seed,
                          clip_norm=nn_settings["clip_norm"])


def _run_stage(stage: str, manifest: RunManifest, run_dir: Path, modules: dict[str, nn.Module],
               optimizers: dict[str, torch.optim.Optimizer], meta: dict[str, Any],
               train: Callable[[], list[dict[str, float]]]) -> None:
  """Train one stage unless a checkpoint with identical meta already exists."""
  path = run_dir / f"{stage}_{manifest.tag}.pt"
  trace_path = run_dir / f"{stage}_{manifest.tag}_trace.csv"
  start = time.perf_counter()
  if read_checkpoint_meta(path) == meta:
    logger.info("%s: reusing %s", stage, path)
    load_checkpoint(path, modules, optimizers)
  else:
    if path.exists():
      logger.warning("%s: %s was trained under other settings; retraining", stage, path)
    logger.info("%s: training", stage)
    with stage_guard(stage):
      trace = train()
    pd.DataFrame(trace).to_csv(trace_path, index=False)
    save_checkpoint(path, modules, optimizers, meta)
  manifest.checkpoints[stage] = {"path": path.name, "sha256": file_sha256(path)}
  if trace_path.exists():
    manifest.traces[stage] = trace_path.name
  manifest.wall_clock[stage] = round(time.perf_counter() - start, 3)


def _dataset_entry(path: Path) -> dict[str, str]:
  return {"path": str(path.resolve()), "sha256": file_sha256(path)}
# }}}


def train_pipeline(config: Config, data_dir: Path | str, run_dir: Path | str,
                   seed: int = 0) -> RunManifest:
  """Train CMCK encoders, then the bottom-level bidder, then the top-level allocator.

  Stages whose checkpoint already exists with the same config, seed and data are
  reused, so an interrupted run resumes where it stopped.

  Returns:
    the v0 manifest, also written to run_dir
  """
  run_dir = Path(run_dir)
  run_dir.mkdir(parents=True, exist_ok=True)
  bottom_ds, bottom_path = load_stage_dataset("bottom", data_dir, TRAIN_DATASETS["bottom"])
  top_ds, top_path = load_stage_dataset("top", data_dir, TRAIN_DATASETS["top"])
  if len(bottom_ds) == 0:
    raise StageError("bottom", f"no logged steps in {TRAIN_DATASETS['bottom']}")
  if len(top_ds) == 0:
    raise StageError("top", f"no complete episodes in {TRAIN_DATASETS['top']} "
                            f"(episodes span {top_ds.meta.get('episode_days', '?')} days)")
  for ds in (bottom_ds, top_ds):
    if ds.config_hash != config.world_hash():
      logger.warning("%s dataset was generated under world %s, training config has %s",
                     ds.kind, ds.config_hash[:12], config.world_hash()[:12])

  layout = ObservationLayout.from_dict(bottom_ds.meta["layout"])
  bounds = [tuple(b) for b in bottom_ds.meta["bounds"]]
  top, bottom, encoders = build_trainers(config, layout, bounds, top_ds.meta["state_width"], seed)
  manifest = RunManifest(
    run_id=f"{config.hash()[:12]}-s{seed}",
    version=0,
    seed=seed,
    config=config.snapshot(),
    config_hash=config.hash(),
    world_hash=config.world_hash(),
    datasets={"bottom": _dataset_entry(bottom_path), "top": _dataset_entry(top_path)},
    created=pd.Timestamp.now().isoformat(timespec="seconds"),
  )
  base_meta = {"config_hash": manifest.config_hash, "seed": seed, "version": 0}

  contexts = None
  if encoders is not None:
    _run_stage("cmck", manifest, run_dir, {"encoders": encoders}, {},
               {**base_meta, "stage": "cmck", "data": manifest.datasets["bottom"]["sha256"]},
               lambda: fit_cmck(encoders, bottom_ds, config, seed))
    encoders.freeze()
    with stage_guard("bottom"):
      contexts = window_contexts(bottom_ds, encoders, config.get("cmck.window"))

  _run_stage("bottom", manifest, run_dir, bottom.modules(), bottom.optimizers(),
             {**base_meta, "stage": "bottom", "data": manifest.datasets["bottom"]["sha256"]},
             lambda: bottom.fit(bottom_batch(bottom_ds, contexts), config.get("bottom.epochs")))
  _run_stage("top", manifest, run_dir, top.modules(), top.optimizers(),
             {**base_meta, "stage": "top", "data": manifest.datasets["top"]["sha256"]},
             lambda: top.fit(top_batch(top_ds), config.get("top.epochs")))
  if manifest_path(run_dir, 0).exists():
    logger.info("manifest v0 already present in %s; keeping it", run_dir)
  else:
    save_manifest(manifest, run_dir)
  return manifest


def finetune_cycle(manifest: RunManifest, run_dir: Path | str, new_log: EventLog | None,
                   world: World) -> RunManifest:
  """Continue training the bottom and top levels on the prior data plus `new_log`.

  The encoders stay frozen. The result is the next model version; an empty log leaves the
  current version in place and returns it unchanged.
  """
  run_dir = Path(run_dir)
  if new_log is None or len(new_log.events) == 0 or not new_log.days:
    logger.info("no new logs; %s stays current", manifest.tag)
    return manifest
  expected = event_columns(world.feature_dim)
  found = list(new_log.events.columns)
  if found != expected:
    missing = sorted(set(expected) - set(found))
    extra = sorted(set(found) - set(expected))
    raise StageError("finetune", f"new logs do not match the event schema (missing {missing}, unexpected {extra})")
  if new_log.config_hash and new_log.config_hash != manifest.world_hash:
    logger.warning("new logs come from world %s, model was trained on %s",
                   new_log.config_hash[:12], manifest.world_hash[:12])

  config = Config.from_snapshot(manifest.config)
  version = manifest.version + 1
  with stage_guard("finetune"):
    new_bottom = build_bottom_dataset(new_log, world, config.get("bottom.reward_mode"))
    new_top = build_top_dataset(new_log, world, min(world.episode_days, len(new_log.days)))
    prior = {}
    for name, entry in manifest.datasets.items():
      path = Path(entry["path"])
      if file_sha256(path) != entry["sha256"]:
        logger.warning("dataset %s changed since %s was trained", path, manifest.tag)
      prior[name] = load_dataset(path)
  for name, new in (("bottom", new_bottom), ("top", new_top)):
    width = "obs_width" if name == "bottom" else "state_width"
    if new.meta[width] != prior[name].meta[width]:
      raise StageError("finetune", f"{name} rows have width {new.meta[width]}, "
                                   f"trained model expects {prior[name].meta[width]}")

  datasets = {}
  combined = {}
  for name, new in (("bottom", new_bottom), ("top", new_top)):
    combined[name] = LogDataset.concat([prior[name], new]) if len(new) else prior[name]
    path = save_dataset(combined[name], run_dir / f"{name}_v{version}.npz")
    datasets[name] = _dataset_entry(path)

  layout = ObservationLayout.from_dict(combined["bottom"].meta["layout"])
  bounds = [tuple(b) for b in combined["bottom"].meta["bounds"]]
  top, bottom, encoders = build_trainers(config, layout, bounds, combined["top"].meta["state_width"],
                                         manifest.seed)
  with stage_guard("finetune"):
    load_checkpoint(manifest.checkpoint_path(run_dir, "bottom"), bottom.modules(), bottom.optimizers())
    load_checkpoint(manifest.checkpoint_path(run_dir, "top"), top.modules(), top.optimizers())
  nxt = RunManifest(
    run_id=manifest.run_id,
    version=version,
    seed=manifest.seed,
    config=manifest.config,
    config_hash=manifest.config_hash,
    world_hash=manifest.world_hash,
    datasets=datasets,
    ancestry=[*manifest.ancestry, manifest.tag],
    created=pd.Timestamp.now().isoformat(timespec="seconds"),
  )
  contexts = None
  if encoders is not None:
    with stage_guard("finetune"):
      load_checkpoint(manifest.checkpoint_path(run_dir, "cmck"), {"encoders": encoders})
    encoders.freeze()
    nxt.checkpoints["cmck"] = dict(manifest.checkpoints["cmck"])
    contexts = window_contexts(combined["bottom"], encoders, config.get("cmck.window"))

  fraction = config.get("finetune.epochs_fraction")
  bottom_epochs = max(1, round(config.get("bottom.epochs") * fraction))
  top_epochs = max(1, round(config.get("top.epochs") * fraction))
  base_meta = {"config_hash": nxt.config_hash, "seed": nxt.seed, "version": version}
  _run_stage("bottom", nxt, run_dir, bottom.modules(), bottom.optimizers(),
             {**base_meta, "stage": "bottom", "data": datasets["bottom"]["sha256"]},
             lambda: bottom.fit(bottom_batch(combined["bottom"], contexts), bottom_epochs))
  _run_stage("top", nxt, run_dir, top.modules(), top.optimizers(),
             {**base_meta, "stage": "top", "data": datasets["top"]["sha256"]},
             lambda: top.fit(top_batch(combined["top"]), top_epochs))
  save_manifest(nxt, run_dir)
  logger.info("fine-tuned %s -> %s on %d new days", manifest.tag, nxt.tag, len(new_log.days))
  return nxt
