from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any

import numpy as np
import pandas as pd

from .core_world import World


logger = logging.getLogger(__name__)

STATIC_FIELDS = ("cpc_target", "budget", "quality", "hist_ctr", "hist_cvr", "alloc_frac")
DYNAMIC_FIELDS = ("time", "consumption_rate", "constraint_ratio")
TOP_FIELDS = ("prev_alloc_frac", "hist_ctr", "hist_cvr", "prev_spend_rate",
              "prev_clicks", "prev_cpc_ratio", "cpc_target", "budget")
BEFORE_WEEKS = (1, 2, 3, 4)


@dataclass(frozen=True)
class ObservationLayout: # {{{
  """Which positions of a bottom-level observation are static advertiser fields
  (passed through by state policies) and which change between requests."""
  static: tuple[int, ...]
  dynamic: tuple[int, ...]

  def __post_init__(self) -> None:
    indices = sorted(self.static + self.dynamic)
    if indices != list(range(len(indices))):
      raise ValueError("layout indices must cover 0..width-1 exactly once")
    if not self.dynamic:
      raise ValueError("layout needs at least one dynamic field")

  @property
  def width(self) -> int:
    return len(self.static) + len(self.dynamic)

  @classmethod
  def standard(cls, feature_dim: int) -> ObservationLayout:
    n_static = len(STATIC_FIELDS)
    return cls(static=tuple(range(n_static)),
               dynamic=tuple(range(n_static, n_static + len(DYNAMIC_FIELDS) + feature_dim)))

  @classmethod
  def all_dynamic(cls, width: int) -> ObservationLayout:
    return cls(static=(), dynamic=tuple(range(width)))

  def to_dict(self) -> dict[str, Any]:
    return {"static": list(self.static), "dynamic": list(self.dynamic)}

  @classmethod
  def from_dict(cls, data: dict[str, Any]) -> ObservationLayout:
    return cls(static=tuple(data["static"]), dynamic=tuple(data["dynamic"]))
# }}}


@dataclass
class DayStats: # {{{
  """Per (advertiser, channel) aggregates of one finished day."""
  day: int
  impressions: np.ndarray
  clicks: np.ndarray
  conversions: np.ndarray
  spend: np.ndarray
  revenue: np.ndarray
  allocation: np.ndarray
  events: np.ndarray
  feature_sum: np.ndarray

  @classmethod
  def from_events(cls, day: int, events: pd.DataFrame, allocation: np.ndarray,
                  feature_dim: int) -> DayStats:
    shape = allocation.shape
    stats = cls(
      day=day,
      impressions=np.zeros(shape), clicks=np.zeros(shape), conversions=np.zeros(shape),
      spend=np.zeros(shape), revenue=np.zeros(shape),
      allocation=np.asarray(allocation, dtype=float).copy(),
      events=np.zeros(shape), feature_sum=np.zeros(shape + (feature_dim,)),
    )
    if len(events) == 0:
      return stats
    idx = (events["advertiser"].to_numpy(dtype=int), events["pvid"].to_numpy(dtype=int))
    np.add.at(stats.impressions, idx, events["impr"].to_numpy(dtype=float))
    np.add.at(stats.clicks, idx, events["clicks"].to_numpy(dtype=float))
    np.add.at(stats.conversions, idx, events["order_num"].to_numpy(dtype=float))
    np.add.at(stats.spend, idx, events["final_charge"].to_numpy(dtype=float))
    np.add.at(stats.revenue, idx, events["revenue"].to_numpy(dtype=float))
    np.add.at(stats.events, idx, 1.0)
    pref = events[[f"user_pref_{i}" for i in range(feature_dim)]].to_numpy(dtype=float)
    np.add.at(stats.feature_sum, idx, pref)
    return stats
# }}}


class FeatureBuilder: # {{{
  """Turns market history into top-level states and bottom-level observations.

  The same builder serves log generation, dataset construction and online evaluation, so
  features computed offline from an event log equal the ones a policy saw while bidding.
  History only ever contains finished days.
  """

  CPC_SCALE = 1.0
  BUDGET_SCALE = 10.0
  CLICK_SCALE = 10.0
  PRIOR_WEIGHT = 20.0

  def __init__(self, world: World) -> None:
    self.world = world
    self.layout = ObservationLayout.standard(world.feature_dim)
    self.history: dict[int, DayStats] = {}
    self._base_ctr = np.array([c.base_ctr for c in world.channels])
    self._base_cvr = np.array([c.base_cvr for c in world.channels])
    self._totals = np.zeros((3, world.num_advertisers, world.num_channels))
    self._active = world.active_mask()

  @property
  def top_block(self) -> int:
    return len(TOP_FIELDS) + self.world.feature_dim

  @property
  def top_width(self) -> int:
    return self.top_block * self.world.num_channels

  def record_day(self, day: int, events: pd.DataFrame, allocation: np.ndarray) -> DayStats:
    if day in self.history:
      raise ValueError(f"day {day} already recorded")
    stats = DayStats.from_events(day, events, allocation, self.world.feature_dim)
    self.history[day] = stats
    self._totals += np.stack([stats.impressions, stats.clicks, stats.conversions])
    return stats

  # Smoothed rates {{{
  def hist_ctr(self) -> np.ndarray:
    impressions, clicks, _ = self._totals
    return (clicks + self.PRIOR_WEIGHT * self._base_ctr) / (impressions + self.PRIOR_WEIGHT)

  def hist_cvr(self) -> np.ndarray:
    _, clicks, conversions = self._totals
    return (conversions + self.PRIOR_WEIGHT * self._base_cvr) / (clicks + self.PRIOR_WEIGHT)
  # }}}

  # Top level {{{
  def top_state(self, advertiser_id: int, day: int) -> np.ndarray:
    """Concatenated per-channel blocks; zero blocks where the advertiser is inactive."""
    adv = self.world.advertisers[advertiser_id]
    m = advertiser_id
    prev = self.history.get(day - 1)
    ctr, cvr = self.hist_ctr(), self.hist_cvr()
    state = np.zeros((self.world.num_channels, self.top_block))
    for p in adv.active_channels:
      block = np.zeros(self.top_block)
      block[1], block[2] = ctr[m, p], cvr[m, p]
      block[6] = adv.cpc_target / self.CPC_SCALE
      block[7] = adv.daily_budget / self.BUDGET_SCALE
      if prev is not None:
        alloc = prev.allocation[m, p]
        clicks = prev.clicks[m, p]
        block[0] = alloc / adv.daily_budget
        block[3] = prev.spend[m, p] / alloc if alloc > 0 else 0.0
        block[4] = clicks / self.CLICK_SCALE
        block[5] = (prev.spend[m, p] / clicks) / adv.cpc_target if clicks > 0 else 0.0
        if prev.events[m, p] > 0:
          block[len(TOP_FIELDS):] = prev.feature_sum[m, p] / prev.events[m, p]
      state[p] = block
    return state.reshape(-1)

  def top_states(self, day: int) -> np.ndarray:
    return np.stack([self.top_state(m, day) for m in range(self.world.num_advertisers)])
  # }}}

  # Bottom level {{{
  def observation(self, advertiser_id: int, channel_id: int, allocated: float, tick: float,
                  spend: float, clicks: float, features: np.ndarray,
                  ctr: np.ndarray | None = None, cvr: np.ndarray | None = None) -> np.ndarray:
    """Local observation o^p of one advertiser on one channel just before a request.

    Args:
      allocated: budget amount b^p for the day
      tick: request instant within the day
      spend, clicks: channel totals of the advertiser before this request
      ctr, cvr: precomputed smoothed rate tables, to avoid recomputing per request
    """
    adv = self.world.advertisers[advertiser_id]
    m, p = advertiser_id, channel_id
    ctr = self.hist_ctr() if ctr is None else ctr
    cvr = self.hist_cvr() if cvr is None else cvr
    ticks = self.world.channels[p].ticks
    obs = np.empty(self.layout.width)
    obs[0] = adv.cpc_target / self.CPC_SCALE
    obs[1] = adv.daily_budget / self.BUDGET_SCALE
    obs[2] = adv.quality[p]
    obs[3] = ctr[m, p]
    obs[4] = cvr[m, p]
    obs[5] = allocated / adv.daily_budget
    obs[6] = tick / ticks
    obs[7] = spend / allocated if allocated > 0 else 0.0
    obs[8] = (spend / max(clicks, 1.0)) / adv.cpc_target
    obs[9:] = features
    return obs

  def initial_observation(self, advertiser_id: int, channel_id: int, allocated: float,
                          ctr: np.ndarray | None = None,
                          cvr: np.ndarray | None = None) -> np.ndarray:
    """Observation of a channel before its first request of the day."""
    return self.observation(advertiser_id, channel_id, allocated, 0.0, 0.0, 0.0,
                            np.zeros(self.world.feature_dim), ctr, cvr)
  # }}}

  def before_weeks(self, day: int) -> dict[str, np.ndarray]:
    """Same-weekday aggregates 1..4 weeks back, (M, P) each; zeros where absent."""
    shape = (self.world.num_advertisers, self.world.num_channels)
    out: dict[str, np.ndarray] = {}
    for n in BEFORE_WEEKS:
      stats = self.history.get(day - 7 * n)
      if stats is None:
        impr = clicks = orders = cpc = np.zeros(shape)
      else:
        impr, clicks, orders = stats.impressions, stats.clicks, stats.conversions
        cpc = np.divide(stats.spend, clicks, out=np.zeros(shape), where=clicks > 0)
      out[f"impr_before{n}week"] = impr
      out[f"click_before{n}week"] = clicks
      out[f"cpc_before{n}week"] = cpc
      out[f"order_num_before{n}week"] = orders
    return out
# }}}
