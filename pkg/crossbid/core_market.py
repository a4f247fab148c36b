from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import pandas as pd

from .core_features import BEFORE_WEEKS, FeatureBuilder
from .core_world import (
  NO_FEEDBACK, Advertiser, ImpressionRequest, World, WorldState,
  charge_and_update, compute_final_bid, predict_feedback, run_auction,
)


logger = logging.getLogger(__name__)

FIRST_DATE = pd.Timestamp("2024-01-01")


def event_columns(feature_dim: int) -> list[str]:
  """Column contract of raw event logs (one row per candidate advertiser per request)."""
  columns = [
    "dt", "day", "t", "request_index", "pvid", "request_time", "user_id", "advertiser", "tier",
    "ratio", "bid", "excluded", "impr", "clicks", "order_num", "final_charge", "revenue",
    "cum_cost", "cum_clicks", "budget", "total_budget", "aimcpc", "ctr", "histctr", "cpc",
  ]
  columns += [f"user_pref_{i}" for i in range(feature_dim)]
  for n in BEFORE_WEEKS:
    columns += [f"impr_before{n}week", f"click_before{n}week",
                f"cpc_before{n}week", f"order_num_before{n}week"]
  return columns


ALLOCATION_COLUMNS = ["day", "advertiser", "pvid", "fraction", "budget", "total_budget", "tier"]


@dataclass(frozen=True)
class BidOutcome:
  ratio: float
  bid: float
  excluded: bool
  won: bool
  charged: float
  clicked: int
  converted: int
  revenue: float
  observation: np.ndarray | None


class Bidder: # {{{
  """Base class of everything that bids in the market.

  A bidder splits each advertiser's daily budget across channels once per day and then
  answers one bid ratio per (request, candidate advertiser).
  """

  name = "base"
  needs_observation = False

  def begin_day(self, world: World, day: int, features: FeatureBuilder) -> np.ndarray:
    """Per-channel budget fractions, shape (M, P). Default: even split over active channels."""
    mask = world.active_mask().astype(float)
    return mask / mask.sum(axis=1, keepdims=True)

  def bid_ratio(self, world: World, state: WorldState, request: ImpressionRequest,
                advertiser: Advertiser, observation: np.ndarray | None) -> float:
    raise NotImplementedError

  def observe(self, world: World, state: WorldState, request: ImpressionRequest,
              advertiser: Advertiser, outcome: BidOutcome) -> None:
    pass

  def end_day(self, world: World, state: WorldState) -> None:
    pass

  def tier(self, advertiser_id: int) -> str:
    return self.name
# }}}


@dataclass
class DayResult:
  day: int
  state: WorldState
  events: pd.DataFrame
  allocations: pd.DataFrame


def run_day(world: World, day: int, bidder: Bidder, features: FeatureBuilder,
            seed: int) -> DayResult:
  """Simulate one day: allocation once, then every request in joint time order.

  The finished day is recorded into `features`, so consecutive calls build history.
  """
  fractions = np.asarray(bidder.begin_day(world, day, features), dtype=float)
  state = world.start_day(day, fractions, seed)
  requests = world.requests_for_day(day, seed)
  ctr, cvr = features.hist_ctr(), features.hist_cvr()
  before = features.before_weeks(day)
  dt = (FIRST_DATE + pd.Timedelta(days=day - 1)).strftime("%Y-%m-%d")
  columns = event_columns(world.feature_dim)
  rows: dict[str, list] = {c: [] for c in columns}

  for gt, request in enumerate(requests):
    p = request.channel_id
    channel = world.channels[p]
    lo, hi = channel.bid_ratio_bounds
    entries = []
    bids: dict[int, float] = {}
    for m in request.eligible_advertisers:
      adv = world.advertisers[m]
      obs = None
      if bidder.needs_observation:
        obs = features.observation(m, p, state.allocation[m, p], request.tick,
                                   state.spend[m, p], state.clicks[m, p],
                                   request.user_features, ctr, cvr)
      ratio = bidder.bid_ratio(world, state, request, adv, obs)
      bid = compute_final_bid(ratio, adv.cpc_target, channel.bid_ratio_bounds)
      excluded = not state.can_afford(m, p, bid)
      if not excluded:
        bids[m] = bid
      entries.append((adv, min(max(float(ratio), lo), hi), bid, excluded, obs))

    result = run_auction(request, bids, max(world.reserve, request.floor_price))
    feedback = NO_FEEDBACK
    if result.winner is not None:
      feedback = predict_feedback(world.feedback, request, world.advertisers[result.winner],
                                  state.rng)
    charged = charge_and_update(state, request, result, feedback)

    for adv, ratio, bid, excluded, obs in entries:
      m = adv.id
      won = m == result.winner
      outcome = BidOutcome(
        ratio=ratio, bid=bid, excluded=excluded, won=won,
        charged=charged if won else 0.0,
        clicked=feedback.clicked if won else 0,
        converted=feedback.converted if won else 0,
        revenue=feedback.revenue if won else 0.0,
        observation=obs,
      )
      clicks_so_far = state.clicks[m, p]
      rows["dt"].append(dt)
      rows["day"].append(day)
      rows["t"].append(gt)
      rows["request_index"].append(request.t)
      rows["pvid"].append(p)
      rows["request_time"].append(request.tick)
      rows["user_id"].append(request.user_id)
      rows["advertiser"].append(m)
      rows["tier"].append(bidder.tier(m))
      rows["ratio"].append(ratio)
      rows["bid"].append(bid)
      rows["excluded"].append(excluded)
      rows["impr"].append(int(won))
      rows["clicks"].append(outcome.clicked)
      rows["order_num"].append(outcome.converted)
      rows["final_charge"].append(outcome.charged)
      rows["revenue"].append(outcome.revenue)
      rows["cum_cost"].append(state.spend[m, p])
      rows["cum_clicks"].append(int(clicks_so_far))
      rows["budget"].append(state.allocation[m, p])
      rows["total_budget"].append(adv.daily_budget)
      rows["aimcpc"].append(adv.cpc_target)
      rows["ctr"].append(world.feedback.click_probability(request, adv))
      rows["histctr"].append(ctr[m, p])
      rows["cpc"].append(state.spend[m, p] / clicks_so_far if clicks_so_far > 0 else 0.0)
      for i, value in enumerate(request.user_features):
        rows[f"user_pref_{i}"].append(value)
      for key, table in before.items():
        rows[key].append(table[m, p])
      bidder.observe(world, state, request, adv, outcome)

  events = pd.DataFrame(rows, columns=columns)
  allocations = _allocation_frame(world, day, bidder, fractions, state)
  features.record_day(day, events, state.allocation)
  bidder.end_day(world, state)
  logger.debug("day %d: %d requests, %d bid events, spend %.2f", day, len(requests),
               len(events), state.spend.sum())
  return DayResult(day=day, state=state, events=events, allocations=allocations)


def run_days(world: World, days: Iterable[int], bidder: Bidder, features: FeatureBuilder,
             seed: int) -> list[DayResult]:
  return [run_day(world, day, bidder, features, seed) for day in days]


def _allocation_frame(world: World, day: int, bidder: Bidder, fractions: np.ndarray,
                      state: WorldState) -> pd.DataFrame:
  records = []
  for adv in world.advertisers:
    for p in range(world.num_channels):
      records.append({
        "day": day,
        "advertiser": adv.id,
        "pvid": p,
        "fraction": float(fractions[adv.id, p]) if adv.is_active(p) else 0.0,
        "budget": float(state.allocation[adv.id, p]),
        "total_budget": adv.daily_budget,
        "tier": bidder.tier(adv.id),
      })
  return pd.DataFrame.from_records(records, columns=ALLOCATION_COLUMNS)
