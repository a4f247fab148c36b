from __future__ import annotations

import logging
from collections import deque
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .core_bidder import BottomBatch, BottomTrainer, reward
from .core_cmck import KnowledgeEncoders, context_latent, context_rows, settings_encoders
from .core_diffusion import TopBatch, TopTrainer
from .core_features import FeatureBuilder, ObservationLayout
from .core_market import BidOutcome, Bidder
from .core_nn import as_tensor, load_checkpoint
from .core_world import Advertiser, ImpressionRequest, World, WorldState
from .mem_config import Config
from .mem_logs import LogDataset
from .mem_manifest import RunManifest


logger = logging.getLogger(__name__)


def context_width(obs_width: int) -> int:
  """Width of one [o, a, r, o_next] context row."""
  return 2 * obs_width + 2


# Datasets -> batches {{{
def top_batch(ds: LogDataset) -> TopBatch:
  if ds.kind != "top":
    raise ValueError(f"expected a top dataset, got '{ds.kind}'")
  return TopBatch(
    states=as_tensor(ds["state"]),
    actions=as_tensor(ds["action"]),
    rewards=as_tensor(ds["reward"]),
    next_states=as_tensor(ds["next_state"]),
    done=as_tensor(ds["done"]),
    budget=as_tensor(ds["budget"]),
    cpc_target=as_tensor(ds["cpc_target"]),
  )


def bottom_batch(ds: LogDataset, contexts: np.ndarray | None = None) -> BottomBatch:
  if ds.kind != "bottom":
    raise ValueError(f"expected a bottom dataset, got '{ds.kind}'")
  return BottomBatch(
    obs=as_tensor(ds["obs"]),
    actions=as_tensor(ds["action"]),
    rewards=as_tensor(ds["reward"]),
    next_obs=as_tensor(ds["next_obs"]),
    policy_next=as_tensor(ds["policy_next"]),
    live=torch.as_tensor(np.array(ds["live"], dtype=bool)),
    done=as_tensor(ds["done"]),
    contexts=None if contexts is None else as_tensor(contexts),
  )


def channel_contexts(ds: LogDataset) -> dict[int, np.ndarray]:
  """Context rows of every channel: its live steps as [o, a, r, o_next]."""
  out = {}
  for p in range(ds["live"].shape[1]):
    live = ds["live"][:, p]
    out[p] = context_rows(ds["obs"][live, p], ds["action"][live, p], ds["reward"][live, p],
                          ds["policy_next"][live, p])
  return out


@torch.no_grad()
def window_contexts(ds: LogDataset, encoders: KnowledgeEncoders, window: int) -> np.ndarray:
  """z* for every (step, channel): the aggregate of that channel's previous `window` live
  steps in the same trajectory. Zeros before a channel's first step of the day."""
  if not encoders.frozen:
    raise RuntimeError("encoders must be frozen before they augment states")
  n, channels = ds["live"].shape
  out = np.zeros((n, channels, encoders.z_width), dtype=np.float32)
  dtype = next(encoders.parameters()).dtype
  trajectory = ds["trajectory"]
  for p, rows in channel_contexts(ds).items():
    steps = np.flatnonzero(ds["live"][:, p])
    if len(steps) == 0:
      continue
    latents = encoders.row_latents(torch.as_tensor(rows, dtype=dtype))
    starts: dict[int, int] = {}
    for q, step_index in enumerate(steps):
      first = starts.setdefault(int(trajectory[step_index]), q)
      lo = max(first, q - window)
      if q > lo:
        out[step_index, p] = encoders.aggregator(latents[lo:q].mean(dim=0)).numpy()
  return out
# }}}


class HierarchicalBidder(Bidder): # {{{
  """Top-level allocator once per day, bottom-level per-channel bidder per request.

  Each (advertiser, channel) keeps its own context window of completed steps for the day.
  A step completes when the same channel sees its next request.
  """

  name = "hmmcb"
  needs_observation = True

  def __init__(self, top: TopTrainer, bottom: BottomTrainer, encoders: KnowledgeEncoders | None = None,
               window: int = 64, reward_mode: str = "hinge", seed: int = 0) -> None:
    self.top = top
    self.bottom = bottom
    self.encoders = encoders
    self.window = window
    self.reward_mode = reward_mode
    self.top.generator.manual_seed(seed)
    self._windows: dict[tuple[int, int], deque] = {}
    self._pending: dict[tuple[int, int], list[Any]] = {}

  def begin_day(self, world: World, day: int, features: FeatureBuilder) -> np.ndarray:
    self._windows = {}
    self._pending = {}
    states = features.top_states(day)
    mask = world.active_mask()
    return np.stack([self.top.allocate(states[m], mask[m]).fractions
                     for m in range(world.num_advertisers)])

  def bid_ratio(self, world, state, request, advertiser, observation) -> float:
    key = (advertiser.id, request.channel_id)
    rows = self._windows.setdefault(key, deque(maxlen=self.window))
    pending = self._pending.pop(key, None)
    if pending is not None:
      o, a, r = pending
      rows.append(np.concatenate([o, [a, r], observation]))
    z = None
    if self.encoders is not None:
      z = context_latent(np.array(rows).reshape(-1, self.encoders.context_width), self.encoders)
    ratio = self.bottom.act(request.channel_id, observation, z)
    self._pending[key] = [observation, ratio, 0.0]
    return ratio

  def observe(self, world: World, state: WorldState, request: ImpressionRequest,
              advertiser: Advertiser, outcome: BidOutcome) -> None:
    m, p = advertiser.id, request.channel_id
    self._pending[(m, p)][2] = reward(outcome.clicked, state.spend[m, p], state.allocation[m, p],
                                      self.reward_mode)
# }}}


# Loading {{{
def build_trainers(config: Config, layout: ObservationLayout, bounds: list[tuple[float, float]],
                   state_dim: int, seed: int) -> tuple[TopTrainer, BottomTrainer, KnowledgeEncoders | None]:
  """Fresh, untrained networks shaped for one world. Each block is seeded on its own so
  its initial weights do not depend on which other blocks exist."""
  nn_settings = config.section("nn")
  cmck = config.section("cmck")
  encoders = None
  z_width = 0
  if cmck["enabled"]:
    torch.manual_seed(seed * 10 + 1)
    encoders = settings_encoders(context_width(layout.width), cmck, nn_settings)
    z_width = encoders.z_width
  torch.manual_seed(seed * 10 + 2)
  bottom = BottomTrainer(layout, bounds, config.section("bottom"), nn_settings, z_width, seed)
  torch.manual_seed(seed * 10 + 3)
  top = TopTrainer(state_dim, len(bounds), config.section("top"), nn_settings, seed)
  return top, bottom, encoders


def load_bidder(manifest: RunManifest, run_dir: Path | str, world: World,
                seed: int = 0) -> HierarchicalBidder:
  """HierarchicalBidder from the checkpoints a manifest names (read-only)."""
  trained = Config.from_snapshot(manifest.config)
  features = FeatureBuilder(world)
  bounds = [c.bid_ratio_bounds for c in world.channels]
  top, bottom, encoders = build_trainers(trained, features.layout, bounds, features.top_width,
                                         manifest.seed)
  if encoders is not None:
    load_checkpoint(manifest.checkpoint_path(run_dir, "cmck"), {"encoders": encoders})
    encoders.freeze()
  load_checkpoint(manifest.checkpoint_path(run_dir, "bottom"), bottom.modules())
  load_checkpoint(manifest.checkpoint_path(run_dir, "top"), top.modules())
  for module in (*top.modules().values(), *bottom.modules().values()):
    module.eval()
  return HierarchicalBidder(top, bottom, encoders, trained.get("cmck.window"),
                            trained.get("bottom.reward_mode"), seed)
# }}}
