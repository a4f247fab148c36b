from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd

from .core_baselines import PidBidder
from .core_bidder import REWARD_MODES, reward
from .core_diffusion import discretize_and_mask
from .core_features import FeatureBuilder
from .core_market import BidOutcome, Bidder, event_columns, run_day
from .core_world import Advertiser, ImpressionRequest, World, WorldState
from .mem_logs import LogDataset


logger = logging.getLogger(__name__)

TIERS = ("expert", "medium", "random")
CALIBRATION_MARGINS = (1.0, 0.95, 0.9, 0.85, 0.8, 0.7, 0.6)


def validate_mixture(mixture: dict[str, float]) -> np.ndarray:
  unknown = set(mixture) - set(TIERS)
  if unknown:
    raise ValueError(f"unknown behavior tiers {sorted(unknown)}")
  weights = np.array([float(mixture.get(t, 0.0)) for t in TIERS])
  if np.any(weights < 0):
    raise ValueError("mixture weights must be >= 0")
  if abs(weights.sum() - 1.0) > 1e-9:
    raise ValueError(f"mixture weights must sum to 1, got {weights.sum():.4f}")
  return weights


class MixtureBehavior(Bidder): # {{{
  """Logging policy: every advertiser-day draws a tier.

  expert: PID held under the CPC target (calibrated margin), history-weighted split
  medium: PID aiming above the target, even split
  random: uniform bid ratios, random split
  """

  name = "behavior"

  def __init__(self, mixture: dict[str, float], pid_gains: dict[str, float], seed: int,
               expert_margin: float = 0.9, medium_margin: float = 1.3,
               grid_step: float = 0.05, bounds: tuple[float, float] = (0.5, 1.5)) -> None:
    self.weights = validate_mixture(mixture)
    self.rng = np.random.default_rng([seed, 0xB1D])
    self.grid_step = grid_step
    self.controllers = {
      "expert": PidBidder(pid_gains, expert_margin, bounds),
      "medium": PidBidder(pid_gains, medium_margin, bounds),
    }
    self.tiers: dict[int, str] = {}

  def assign_tiers(self, count: int) -> list[str]:
    return [TIERS[i] for i in self.rng.choice(len(TIERS), size=count, p=self.weights)]

  def _split(self, tier: str, adv: Advertiser, ctr: np.ndarray, num_channels: int) -> np.ndarray:
    active = np.zeros(num_channels, dtype=bool)
    active[list(adv.active_channels)] = True
    if tier == "expert":
      weights = np.where(active, ctr[adv.id], 0.0)
      continuous = weights / weights.sum()
    elif tier == "medium":
      continuous = active / active.sum()
    else:
      continuous = np.zeros(num_channels)
      continuous[active] = self.rng.dirichlet(np.ones(active.sum())) * self.rng.uniform(0.5, 1.0)
    return discretize_and_mask(continuous, self.grid_step, 1.0, active).fractions

  def begin_day(self, world: World, day: int, features: FeatureBuilder) -> np.ndarray:
    tiers = self.assign_tiers(world.num_advertisers)
    self.tiers = dict(enumerate(tiers))
    ctr = features.hist_ctr()
    for controller in self.controllers.values():
      controller.begin_day(world, day, features)
    return np.stack([self._split(tiers[a.id], a, ctr, world.num_channels) for a in world.advertisers])

  def bid_ratio(self, world, state, request, advertiser, observation) -> float:
    tier = self.tiers[advertiser.id]
    if tier == "random":
      lo, hi = world.channels[request.channel_id].bid_ratio_bounds
      return float(self.rng.uniform(lo, hi))
    return self.controllers[tier].bid_ratio(world, state, request, advertiser, observation)

  def observe(self, world: World, state: WorldState, request: ImpressionRequest,
              advertiser: Advertiser, outcome: BidOutcome) -> None:
    tier = self.tiers[advertiser.id]
    if tier in self.controllers:
      self.controllers[tier].observe(world, state, request, advertiser, outcome)

  def tier(self, advertiser_id: int) -> str:
    return self.tiers.get(advertiser_id, "")
# }}}


class ReplayBidder(Bidder):
  """Re-executes the allocations and bid ratios recorded in an event log."""

  name = "replay"

  def __init__(self, log: EventLog) -> None:
    self.fractions: dict[int, np.ndarray] = {}
    for day, frame in log.allocations.groupby("day"):
      table = frame.pivot(index="advertiser", columns="pvid", values="fraction")
      self.fractions[int(day)] = table.sort_index().sort_index(axis=1).to_numpy()
    self.ratios = {
      (int(d), int(t), int(m)): float(r)
      for d, t, m, r in log.events[["day", "t", "advertiser", "ratio"]].itertuples(index=False)
    }
    self.tiers = {
      (int(d), int(m)): str(tier)
      for d, m, tier in log.allocations[["day", "advertiser", "tier"]].drop_duplicates().itertuples(index=False)
    }
    self._seed = log.seed
    self._day = 0
    self._index: dict[tuple[float, int, int], int] = {}

  def begin_day(self, world: World, day: int, features: FeatureBuilder) -> np.ndarray:
    if day not in self.fractions:
      raise KeyError(f"day {day} is not in the replayed log")
    self._day = day
    self._index = {(r.tick, r.channel_id, r.t): gt
                   for gt, r in enumerate(world.requests_for_day(day, self._seed))}
    return self.fractions[day]

  def bid_ratio(self, world, state, request, advertiser, observation) -> float:
    gt = self._index[(request.tick, request.channel_id, request.t)]
    return self.ratios[(self._day, gt, advertiser.id)]

  def tier(self, advertiser_id: int) -> str:
    return self.tiers.get((self._day, advertiser_id), "")


# Event logs {{{
@dataclass
class EventLog:
  """Raw behavior log: one row per (request, candidate advertiser) plus daily allocations."""
  events: pd.DataFrame
  allocations: pd.DataFrame
  days: list[int]
  seed: int
  config_hash: str = ""
  partial_days: list[int] = field(default_factory=list)

  def day_events(self, day: int) -> pd.DataFrame:
    return self.events[self.events["day"] == day]

  def allocation_amounts(self, day: int, shape: tuple[int, int]) -> np.ndarray:
    frame = self.allocations[self.allocations["day"] == day]
    amounts = np.zeros(shape)
    amounts[frame["advertiser"].to_numpy(dtype=int), frame["pvid"].to_numpy(dtype=int)] = frame["budget"].to_numpy()
    return amounts

  def save(self, directory: Path | str) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    self.events.to_csv(directory / "events.csv", index=False)
    self.allocations.to_csv(directory / "allocations.csv", index=False)
    meta = {"days": self.days, "seed": self.seed, "config_hash": self.config_hash,
            "partial_days": self.partial_days}
    with open(directory / "log_meta.json", 'w') as f:
      json.dump(meta, f, indent=2)
    return directory

  @classmethod
  def load(cls, directory: Path | str) -> EventLog:
    directory = Path(directory)
    with open(directory / "log_meta.json", 'r') as f:
      meta = json.load(f)
    events = pd.read_csv(directory / "events.csv", float_precision="round_trip")
    allocations = pd.read_csv(directory / "allocations.csv", float_precision="round_trip")
    return cls(events, allocations, meta["days"], meta["seed"], meta["config_hash"],
               meta.get("partial_days", []))


def outcome_labels(events: pd.DataFrame, world: World, expert_roi: float = 1.0) -> pd.DataFrame:
  """Per advertiser-day outcome label: expert when the CPC target is met and ROI clears
  `expert_roi`, medium when exactly one holds, random otherwise."""
  frame = events.groupby(["day", "advertiser"])[["final_charge", "clicks", "revenue"]].sum().reset_index()
  targets = np.array([a.cpc_target for a in world.advertisers])
  spend = frame["final_charge"].to_numpy()
  clicks = frame["clicks"].to_numpy()
  cpc_met = np.where(clicks > 0, spend / np.maximum(clicks, 1) <= targets[frame["advertiser"].to_numpy(dtype=int)], spend == 0)
  roi_met = np.where(spend > 0, frame["revenue"].to_numpy() / np.where(spend > 0, spend, 1) >= expert_roi, False)
  met = cpc_met.astype(int) + roi_met.astype(int)
  frame["cpc_met"] = cpc_met
  frame["roi_met"] = roi_met
  frame["label"] = np.array(["random", "medium", "expert"])[met]
  return frame


def calibrate_expert(world: World, pid_gains: dict[str, float], seed: int, days: int = 2,
                     margins: Sequence[float] = CALIBRATION_MARGINS, threshold: float = 0.9) -> float:
  """Largest PID setpoint margin whose expert-only runs meet the CPC target on at least
  `threshold` of advertiser-days."""
  compliance = 0.0
  for margin in margins:
    behavior = MixtureBehavior({"expert": 1.0}, pid_gains, seed, expert_margin=margin)
    features = FeatureBuilder(world)
    frames = [run_day(world, day, behavior, features, seed).events for day in range(1, days + 1)]
    labels = outcome_labels(pd.concat(frames, ignore_index=True), world)
    compliance = float(labels["cpc_met"].mean()) if len(labels) else 1.0
    logger.info("expert calibration: margin %.2f meets CPC on %.1f%% of advertiser-days",
                margin, 100 * compliance)
    if compliance >= threshold:
      return margin
  logger.warning("expert calibration never reached %.0f%% (last %.1f%%); using margin %.2f",
                 100 * threshold, 100 * compliance, margins[-1])
  return margins[-1]


def run_behavior_policy(world: World, mixture: dict[str, float], seed: int, days: int,
                        pid_gains: dict[str, float], expert_margin: float | None = None,
                        expert_roi: float = 1.0, grid_step: float = 0.05) -> EventLog:
  """Simulate `days` days under the tier mixture and return the raw event log.

  Args:
    expert_margin: PID setpoint of the expert tier; calibrated closed-loop when None
  """
  validate_mixture(mixture)
  if expert_margin is None:
    expert_margin = calibrate_expert(world, pid_gains, seed)
  behavior = MixtureBehavior(mixture, pid_gains, seed, expert_margin=expert_margin, grid_step=grid_step)
  features = FeatureBuilder(world)
  events, allocations = [], []
  for day in range(1, days + 1):
    result = run_day(world, day, behavior, features, seed)
    events.append(result.events)
    allocations.append(result.allocations)
  events_frame = pd.concat(events, ignore_index=True) if events else pd.DataFrame(columns=event_columns(world.feature_dim))
  alloc_frame = pd.concat(allocations, ignore_index=True) if allocations else pd.DataFrame()
  if len(alloc_frame):
    labels = outcome_labels(events_frame, world, expert_roi)[["day", "advertiser", "label"]]
    alloc_frame = alloc_frame.merge(labels, on=["day", "advertiser"], how="left")
    alloc_frame["label"] = alloc_frame["label"].fillna("expert")
  return EventLog(events_frame, alloc_frame, list(range(1, days + 1)), seed, world.config_hash)


def replay(world: World, log: EventLog) -> EventLog:
  """Run the logged actions through the world again with the log's seed."""
  bidder = ReplayBidder(log)
  features = FeatureBuilder(world)
  results = [run_day(world, day, bidder, features, log.seed) for day in log.days]
  return EventLog(pd.concat([r.events for r in results], ignore_index=True),
                  pd.concat([r.allocations for r in results], ignore_index=True),
                  list(log.days), log.seed, log.config_hash)
# }}}


def _complete_days(log: EventLog) -> list[int]:
  closed = set(log.allocations["day"].unique()) if len(log.allocations) else set()
  partial = sorted(set(log.partial_days) | {d for d in log.days if d not in closed})
  if partial:
    logger.warning("dropping partial days %s from the log", partial)
  return [d for d in sorted(log.days) if d not in partial]


# Datasets {{{
def build_top_dataset(log: EventLog, world: World, episode_days: int | None = None) -> LogDataset:
  """One transition per advertiser per day, grouped into episodes of `episode_days`
  (world.episode_days by default)."""
  days = _complete_days(log)
  span = episode_days or world.episode_days
  episodes = [days[i:i + span] for i in range(0, len(days), span)]
  if episodes and len(episodes[-1]) < span:
    logger.warning("dropping %d trailing days that do not fill a %d-day episode",
                   len(episodes[-1]), span)
    episodes = episodes[:-1]
  keep = {d for episode in episodes for d in episode}
  shape = (world.num_advertisers, world.num_channels)

  features = FeatureBuilder(world)
  per_day: dict[int, dict[str, Any]] = {}
  for day in sorted(keep):
    frame = log.day_events(day)
    allocations = log.allocations[log.allocations["day"] == day]
    fractions = np.zeros(shape)
    fractions[allocations["advertiser"].to_numpy(dtype=int), allocations["pvid"].to_numpy(dtype=int)] = \
      allocations["fraction"].to_numpy()
    states = features.top_states(day)
    features.record_day(day, frame, log.allocation_amounts(day, shape))
    clicks = np.zeros(world.num_advertisers)
    np.add.at(clicks, frame["advertiser"].to_numpy(dtype=int), frame["clicks"].to_numpy(dtype=float))
    per_adv = allocations.drop_duplicates("advertiser").set_index("advertiser")
    per_day[day] = {"states": states, "next": features.top_states(day + 1), "fractions": fractions,
                    "clicks": clicks, "tier": per_adv["tier"], "label": per_adv.get("label", per_adv["tier"])}

  columns: dict[str, list] = {k: [] for k in ("state", "action", "reward", "next_state", "done", "day",
                                               "advertiser", "trajectory", "budget", "cpc_target",
                                               "tier", "label")}
  for k, episode in enumerate(episodes):
    for adv in world.advertisers:
      for j, day in enumerate(episode):
        d = per_day[day]
        columns["state"].append(d["states"][adv.id])
        columns["action"].append(d["fractions"][adv.id])
        columns["reward"].append(d["clicks"][adv.id])
        columns["next_state"].append(d["next"][adv.id])
        columns["done"].append(j == len(episode) - 1)
        columns["day"].append(day)
        columns["advertiser"].append(adv.id)
        columns["trajectory"].append(k * world.num_advertisers + adv.id)
        columns["budget"].append(adv.daily_budget)
        columns["cpc_target"].append(adv.cpc_target)
        columns["tier"].append(str(d["tier"].get(adv.id, "")))
        columns["label"].append(str(d["label"].get(adv.id, "")))

  width = FeatureBuilder(world).top_width
  arrays = {
    "state": np.array(columns["state"], dtype=np.float32).reshape(-1, width),
    "action": np.array(columns["action"], dtype=np.float32).reshape(-1, world.num_channels),
    "reward": np.array(columns["reward"], dtype=np.float32),
    "next_state": np.array(columns["next_state"], dtype=np.float32).reshape(-1, width),
    "done": np.array(columns["done"], dtype=bool),
    "day": np.array(columns["day"], dtype=np.int64),
    "advertiser": np.array(columns["advertiser"], dtype=np.int64),
    "trajectory": np.array(columns["trajectory"], dtype=np.int64),
    "budget": np.array(columns["budget"], dtype=np.float32),
    "cpc_target": np.array(columns["cpc_target"], dtype=np.float32),
    "tier": np.array(columns["tier"], dtype=str),
    "label": np.array(columns["label"], dtype=str),
  }
  meta = {"config_hash": log.config_hash, "num_channels": world.num_channels, "state_width": width,
          "episode_days": span, "seed": log.seed}
  return LogDataset("top", arrays, meta)


def build_bottom_dataset(log: EventLog, world: World, reward_mode: str = "hinge") -> LogDataset:
  """Joint per-advertiser-day trajectories over the union of that advertiser's request
  instants across channels.

  At each step exactly one channel is live. Silent channels keep their previous
  observation and get zero reward. `policy_next` holds each channel's own next observation
  (at its next request, or after its last one).
  """
  if reward_mode not in REWARD_MODES:
    raise ValueError(f"reward mode must be one of {REWARD_MODES}, got '{reward_mode}'")
  days = _complete_days(log)
  features = FeatureBuilder(world)
  P, D, F = world.num_channels, features.layout.width, world.feature_dim
  shape = (world.num_advertisers, P)
  pref_columns = [f"user_pref_{i}" for i in range(F)]
  mask = world.active_mask()
  out: dict[str, list] = {k: [] for k in ("obs", "action", "reward", "next_obs", "policy_next", "live",
                                          "done", "t", "day", "advertiser", "trajectory")}
  trajectory = 0
  for day in days:
    frame = log.day_events(day)
    amounts = log.allocation_amounts(day, shape)
    ctr, cvr = features.hist_ctr(), features.hist_cvr()
    for m, group in frame.groupby("advertiser", sort=True):
      m = int(m)
      if len(group) == 0:
        continue
      joint = np.zeros((P, D))
      for p in range(P):
        if mask[m, p]:
          joint[p] = features.initial_observation(m, p, amounts[m, p], ctr, cvr)
      spend, clicks = np.zeros(P), np.zeros(P)
      prefs = group[pref_columns].to_numpy(dtype=float)
      steps = []
      for row, pref in zip(group[["pvid", "request_time", "ratio", "clicks", "cum_cost", "cum_clicks", "t"]]
                           .itertuples(index=False), prefs):
        p = int(row.pvid)
        joint[p] = features.observation(m, p, amounts[m, p], row.request_time, spend[p], clicks[p],
                                        pref, ctr, cvr)
        spend[p], clicks[p] = row.cum_cost, row.cum_clicks
        r = reward(row.clicks, row.cum_cost, amounts[m, p], reward_mode)
        post = features.observation(m, p, amounts[m, p], row.request_time, spend[p], clicks[p],
                                    pref, ctr, cvr)
        steps.append((joint.copy(), p, float(row.ratio), r, int(row.t), post))

      n = len(steps)
      next_live: dict[int, np.ndarray] = {}
      policy_next = [None] * n
      for k in range(n - 1, -1, -1):
        _, p, _, _, _, post = steps[k]
        policy_next[k] = next_live.get(p, post)
        next_live[p] = steps[k][0][p]
      for k, (obs, p, a, r, t, post) in enumerate(steps):
        if k + 1 < n:
          nxt = steps[k + 1][0]
        else:
          nxt = obs.copy()
          nxt[p] = post
        pn = nxt.copy()
        pn[p] = policy_next[k]
        actions = np.ones(P)
        actions[p] = a
        rewards = np.zeros(P)
        rewards[p] = r
        live = np.zeros(P, dtype=bool)
        live[p] = True
        out["obs"].append(obs)
        out["action"].append(actions)
        out["reward"].append(rewards)
        out["next_obs"].append(nxt)
        out["policy_next"].append(pn)
        out["live"].append(live)
        out["done"].append(k == n - 1)
        out["t"].append(t)
        out["day"].append(day)
        out["advertiser"].append(m)
        out["trajectory"].append(trajectory)
      trajectory += 1
    features.record_day(day, frame, amounts)

  arrays = {
    "obs": np.array(out["obs"], dtype=np.float32).reshape(-1, P, D),
    "action": np.array(out["action"], dtype=np.float32).reshape(-1, P),
    "reward": np.array(out["reward"], dtype=np.float32).reshape(-1, P),
    "next_obs": np.array(out["next_obs"], dtype=np.float32).reshape(-1, P, D),
    "policy_next": np.array(out["policy_next"], dtype=np.float32).reshape(-1, P, D),
    "live": np.array(out["live"], dtype=bool).reshape(-1, P),
    "done": np.array(out["done"], dtype=bool),
    "t": np.array(out["t"], dtype=np.int64),
    "day": np.array(out["day"], dtype=np.int64),
    "advertiser": np.array(out["advertiser"], dtype=np.int64),
    "trajectory": np.array(out["trajectory"], dtype=np.int64),
  }
  meta = {
    "config_hash": log.config_hash,
    "num_channels": P,
    "obs_width": D,
    "layout": features.layout.to_dict(),
    "bounds": [list(c.bid_ratio_bounds) for c in world.channels],
    "reward_mode": reward_mode,
    "seed": log.seed,
  }
  return LogDataset("bottom", arrays, meta)


def downsample_channel(ds: LogDataset, channel: int, ratio: float, seed: int = 0) -> LogDataset:
  """Keep only `ratio` of the steps in which `channel` is live (e.g. 0.02 for 1:50)."""
  if ds.kind != "bottom":
    raise ValueError("only bottom-level datasets can be downsampled per channel")
  if not 0 < ratio <= 1:
    raise ValueError(f"ratio must be in (0, 1], got {ratio}")
  live = ds["live"][:, channel]
  rng = np.random.default_rng(seed)
  keep = ~live | (rng.random(len(ds)) < ratio)
  logger.info("channel %d downsampled: %d of %d live steps kept", channel,
              int((keep & live).sum()), int(live.sum()))
  return ds.select(keep)
# }}}
