from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, logit

from .mem_config import Config


logger = logging.getLogger(__name__)

BILLING_MODES = ("click", "impression")


# Market participants {{{
@dataclass(frozen=True, eq=False)
class Advertiser:
  id: int
  daily_budget: float
  cpc_target: float
  value_per_conversion: float
  quality: np.ndarray
  active_channels: tuple[int, ...]

  def __post_init__(self) -> None:
    if self.daily_budget <= 0:
      raise ValueError(f"Advertiser {self.id}: daily_budget must be > 0, got {self.daily_budget}")
    if self.cpc_target <= 0:
      raise ValueError(f"Advertiser {self.id}: cpc_target must be > 0, got {self.cpc_target}")
    if self.value_per_conversion <= 0:
      raise ValueError(f"Advertiser {self.id}: value_per_conversion must be > 0")
    if not self.active_channels:
      raise ValueError(f"Advertiser {self.id}: active_channels must be non-empty")
    object.__setattr__(self, "quality", np.asarray(self.quality, dtype=float))
    object.__setattr__(self, "active_channels", tuple(sorted(set(self.active_channels))))

  def is_active(self, channel_id: int) -> bool:
    return channel_id in self.active_channels


@dataclass(frozen=True, eq=False)
class Channel:
  id: int
  name: str
  arrival_profile: np.ndarray   # (K,) or (cycle_days, K) requests per tick
  bid_ratio_bounds: tuple[float, float]
  base_ctr: float
  base_cvr: float = 0.2
  floor_price: float = 0.0      # mean competing demand per request

  def __post_init__(self) -> None:
    profile = np.atleast_2d(np.asarray(self.arrival_profile, dtype=float))
    if np.any(profile < 0) or not np.all(np.isfinite(profile)):
      raise ValueError(f"Channel {self.name}: arrival rates must be finite and >= 0")
    lo, hi = self.bid_ratio_bounds
    if not 0 < lo < hi:
      raise ValueError(f"Channel {self.name}: need 0 < xi_min < xi_max, got {self.bid_ratio_bounds}")
    if not 0 < self.base_ctr < 1:
      raise ValueError(f"Channel {self.name}: base_ctr must be in (0, 1)")
    if not 0 < self.base_cvr < 1:
      raise ValueError(f"Channel {self.name}: base_cvr must be in (0, 1)")
    object.__setattr__(self, "arrival_profile", profile)
    object.__setattr__(self, "bid_ratio_bounds", (float(lo), float(hi)))

  @property
  def ticks(self) -> int:
    return self.arrival_profile.shape[1]

  def rates(self, day: int) -> np.ndarray:
    """Per-tick arrival rates of a 1-based day; the profile repeats with its own cycle."""
    return self.arrival_profile[(day - 1) % self.arrival_profile.shape[0]]
# }}}


# Requests, auctions and feedback {{{
@dataclass(frozen=True, eq=False)
class ImpressionRequest:
  channel_id: int
  tick: float                   # instant within the day, in ticks
  user_features: np.ndarray
  eligible_advertisers: tuple[int, ...]
  t: int                        # request index within (channel, day)
  day: int = 1
  floor_price: float = 0.0
  user_id: int = 0


@dataclass(frozen=True)
class AuctionResult:
  winner: int | None
  price: float
  winning_bid: float = 0.0
  losing_bids: tuple[tuple[int, float], ...] = ()


@dataclass(frozen=True)
class Feedback:
  clicked: int = 0
  converted: int = 0
  revenue: float = 0.0


NO_FEEDBACK = Feedback()


@dataclass(frozen=True, eq=False)
class FeedbackModel:
  """Hidden ground truth of user response: logistic click model over user features,
  a per-channel bias and the winner's channel affinity; conversion only after a click."""
  click_weights: np.ndarray
  click_bias: np.ndarray
  conversion_weights: np.ndarray
  conversion_bias: np.ndarray

  @classmethod
  def from_seed(cls, seed: int, feature_dim: int, channels: Sequence[Channel],
                scale: float = 0.4) -> FeedbackModel:
    rng = np.random.default_rng(seed)
    spread = scale / np.sqrt(max(feature_dim, 1))
    return cls(
      click_weights=rng.normal(0.0, spread, feature_dim),
      click_bias=logit(np.array([c.base_ctr for c in channels])),
      conversion_weights=rng.normal(0.0, spread, feature_dim),
      conversion_bias=logit(np.array([c.base_cvr for c in channels])),
    )

  def click_probability(self, request: ImpressionRequest, advertiser: Advertiser) -> float:
    p = request.channel_id
    z = self.click_weights @ request.user_features + self.click_bias[p] + advertiser.quality[p]
    return float(expit(z))

  def conversion_probability(self, request: ImpressionRequest) -> float:
    z = self.conversion_weights @ request.user_features + self.conversion_bias[request.channel_id]
    return float(expit(z))


def generate_requests(channel: Channel, day: int, rng: np.random.Generator,
                      advertisers: Sequence[Advertiser] = (), feature_dim: int = 4,
                      max_candidates: int = 5) -> list[ImpressionRequest]:
  """Poisson traffic for one channel and day, time-ordered.
  Retrieval is an eligibility filter: up to max_candidates advertisers active on the
  channel, sampled without replacement.
  """
  if day < 1:
    raise ValueError(f"day must be >= 1, got {day}")
  counts = rng.poisson(channel.rates(day))
  active = np.array([a.id for a in advertisers if a.is_active(channel.id)], dtype=int)
  requests: list[ImpressionRequest] = []
  t = 0
  for tick, n in enumerate(counts):
    for offset in np.sort(rng.random(int(n))):
      features = rng.standard_normal(feature_dim)
      if len(active) > max_candidates:
        eligible = tuple(int(m) for m in np.sort(rng.choice(active, size=max_candidates, replace=False)))
      else:
        eligible = tuple(int(m) for m in active)
      floor = channel.floor_price * float(rng.lognormal(0.0, 0.5)) if channel.floor_price > 0 else 0.0
      requests.append(ImpressionRequest(
        channel_id=channel.id,
        tick=tick + float(offset),
        user_features=features,
        eligible_advertisers=eligible,
        t=t,
        day=day,
        floor_price=floor,
        user_id=int(rng.integers(1_000_000)),
      ))
      t += 1
  return requests


def run_auction(request: ImpressionRequest, bids: dict[int, float], reserve: float) -> AuctionResult:
  """Second-price auction with a reserve; ties go to the lowest advertiser id."""
  eligible = set(request.eligible_advertisers)
  for advertiser_id, bid in bids.items():
    if advertiser_id not in eligible:
      raise ValueError(
        f"Advertiser {advertiser_id} is not eligible for request {request.t} "
        f"on channel {request.channel_id}"
      )
    if not np.isfinite(bid) or bid < 0:
      raise ValueError(f"Invalid bid {bid!r} from advertiser {advertiser_id}")

  ranked = sorted(bids.items(), key=lambda item: (-item[1], item[0]))
  qualifying = [(m, b) for m, b in ranked if b >= reserve]
  if not qualifying:
    return AuctionResult(winner=None, price=0.0, losing_bids=tuple(ranked))

  winner, winning_bid = qualifying[0]
  runner_up = qualifying[1][1] if len(qualifying) > 1 else reserve
  price = max(runner_up, reserve)
  losing = tuple((m, b) for m, b in ranked if m != winner)
  return AuctionResult(winner=winner, price=float(price), winning_bid=float(winning_bid),
                       losing_bids=losing)


def predict_feedback(model: FeedbackModel, request: ImpressionRequest, winner: Advertiser,
                     rng: np.random.Generator) -> Feedback:
  if not winner.is_active(request.channel_id):
    raise ValueError(f"Advertiser {winner.id} is not active on channel {request.channel_id}")
  u_click, u_conversion = rng.random(2)
  clicked = int(u_click < model.click_probability(request, winner))
  converted = int(clicked and u_conversion < model.conversion_probability(request))
  return Feedback(clicked=clicked, converted=converted,
                  revenue=converted * winner.value_per_conversion)


def compute_final_bid(ratio: float, cpc_target: float,
                      bounds: tuple[float, float] = (0.5, 1.5)) -> float:
  """Final bidding price a * CPC_target. Out-of-bounds ratios are clamped and logged."""
  if cpc_target <= 0:
    raise ValueError(f"cpc_target must be > 0, got {cpc_target}")
  lo, hi = bounds
  if not lo <= ratio <= hi:
    logger.warning("Bid ratio %.4f outside [%.3f, %.3f]; clamped", ratio, lo, hi)
    ratio = min(max(ratio, lo), hi)
  return float(ratio * cpc_target)
# }}}


# WorldState {{{
@dataclass
class WorldState:
  """Mutable accounting of one simulated day. Owned by a single simulation loop."""
  day: int
  budgets: np.ndarray           # (M,) B_m
  allocation: np.ndarray        # (M, P) b^p amounts
  rng: np.random.Generator      # feedback stream
  billing: str = "click"
  spend: np.ndarray = field(init=False)
  clicks: np.ndarray = field(init=False)
  impressions: np.ndarray = field(init=False)
  conversions: np.ndarray = field(init=False)
  revenue: np.ndarray = field(init=False)
  requests: np.ndarray = field(init=False)

  def __post_init__(self) -> None:
    if self.billing not in BILLING_MODES:
      raise ValueError(f"billing must be one of {BILLING_MODES}, got '{self.billing}'")
    if np.any(self.allocation < 0):
      raise ValueError("allocations must be >= 0")
    if np.any(self.allocation.sum(axis=1) > self.budgets + 1e-9):
      raise ValueError("allocations exceed the advertiser's daily budget")
    shape = self.allocation.shape
    self.spend = np.zeros(shape)
    self.clicks = np.zeros(shape, dtype=np.int64)
    self.impressions = np.zeros(shape, dtype=np.int64)
    self.conversions = np.zeros(shape, dtype=np.int64)
    self.revenue = np.zeros(shape)
    self.requests = np.zeros(shape[1], dtype=np.int64)

  @property
  def remaining_allocation(self) -> np.ndarray:
    return self.allocation - self.spend

  @property
  def remaining_budget(self) -> np.ndarray:
    return self.budgets - self.spend.sum(axis=1)

  def can_afford(self, advertiser_id: int, channel_id: int, bid: float) -> bool:
    """Feasibility gate: a bid may only enter an auction if the allocation covers it."""
    return bool(self.allocation[advertiser_id, channel_id] - self.spend[advertiser_id, channel_id] >= bid)


def charge_and_update(state: WorldState, request: ImpressionRequest, result: AuctionResult,
                      feedback: Feedback) -> float:
  """Apply one auction outcome to the day's accounting. Returns the amount charged."""
  p = request.channel_id
  state.requests[p] += 1
  if result.winner is None:
    return 0.0
  m = result.winner
  charged = result.price if (state.billing == "impression" or feedback.clicked) else 0.0
  remaining = state.allocation[m, p] - state.spend[m, p]
  if charged > remaining:
    raise RuntimeError(
      f"Charge {charged:.6f} exceeds remaining allocation {remaining:.6f} "
      f"for advertiser {m} on channel {p}"
    )
  state.spend[m, p] += charged
  state.impressions[m, p] += 1
  state.clicks[m, p] += feedback.clicked
  state.conversions[m, p] += feedback.converted
  state.revenue[m, p] += feedback.revenue
  return float(charged)
# }}}


# World {{{
class World:
  """Static description of a market: advertisers, channels, hidden feedback model."""

  def __init__(self, advertisers: Sequence[Advertiser], channels: Sequence[Channel],
               feedback: FeedbackModel, reserve: float = 0.1, billing: str = "click",
               feature_dim: int = 4, max_candidates: int = 5, episode_days: int = 7,
               config_hash: str = "") -> None:
    if billing not in BILLING_MODES:
      raise ValueError(f"billing must be one of {BILLING_MODES}, got '{billing}'")
    if reserve < 0:
      raise ValueError(f"reserve must be >= 0, got {reserve}")
    for i, a in enumerate(advertisers):
      if a.id != i:
        raise ValueError("advertiser ids must be 0..M-1 in order")
      if len(a.quality) != len(channels):
        raise ValueError(f"Advertiser {a.id}: quality needs one entry per channel")
    self.advertisers = list(advertisers)
    self.channels = list(channels)
    self.feedback = feedback
    self.reserve = reserve
    self.billing = billing
    self.feature_dim = feature_dim
    self.max_candidates = max_candidates
    self.episode_days = episode_days
    self.config_hash = config_hash

  @property
  def num_advertisers(self) -> int:
    return len(self.advertisers)

  @property
  def num_channels(self) -> int:
    return len(self.channels)

  def active_mask(self) -> np.ndarray:
    mask = np.zeros((self.num_advertisers, self.num_channels), dtype=bool)
    for a in self.advertisers:
      mask[a.id, list(a.active_channels)] = True
    return mask

  def start_day(self, day: int, fractions: np.ndarray, seed: int) -> WorldState:
    """Open a day with per-channel budget fractions (M, P)."""
    fractions = np.asarray(fractions, dtype=float)
    if fractions.shape != (self.num_advertisers, self.num_channels):
      raise ValueError(f"allocation shape {fractions.shape} does not match the world")
    if np.any(fractions < 0) or np.any(fractions.sum(axis=1) > 1 + 1e-9):
      raise ValueError("allocation fractions must be >= 0 and sum to at most 1 per advertiser")
    budgets = np.array([a.daily_budget for a in self.advertisers])
    amounts = np.where(self.active_mask(), fractions, 0.0) * budgets[:, None]
    excess = amounts.sum(axis=1) - budgets
    for m in np.flatnonzero(excess > 0):
      amounts[m, np.argmax(amounts[m])] -= excess[m]
    return WorldState(day=day, budgets=budgets, allocation=amounts,
                      rng=np.random.default_rng([seed, day, 0xFEED]), billing=self.billing)

  def requests_for_day(self, day: int, seed: int) -> list[ImpressionRequest]:
    """All channels' requests of a day, merged on time (the joint request index)."""
    merged: list[ImpressionRequest] = []
    for channel in self.channels:
      rng = np.random.default_rng([seed, day, 1 + channel.id])
      merged.extend(generate_requests(channel, day, rng, self.advertisers,
                                      self.feature_dim, self.max_candidates))
    merged.sort(key=lambda r: (r.tick, r.channel_id, r.t))
    return merged

  @classmethod
  def from_config(cls, config: Config) -> World:
    """Build the market described by the 'world' section; world.seed fixes its structure."""
    w = config.section("world")
    rng = np.random.default_rng(w["seed"])
    names = list(w["channels"])
    num_channels = len(names)
    for key in ("channel_share", "base_ctr", "base_cvr", "floor_price"):
      if len(w[key]) != num_channels:
        raise ValueError(f"world.{key} needs one entry per channel ({num_channels})")
    ticks = int(w["ticks_per_day"])
    share = np.asarray(w["channel_share"], dtype=float)
    share = share / share.sum()

    channels: list[Channel] = []
    for p, name in enumerate(names):
      phase = rng.uniform(0, 2 * np.pi)
      hours = np.arange(ticks)
      shape = 1.0 + 0.6 * np.sin(2 * np.pi * hours / ticks + phase)
      weekday = 1.0 + 0.15 * np.cos(2 * np.pi * np.arange(7) / 7 + phase)
      profile = np.outer(weekday, shape / shape.sum()) * w["requests_per_day"] * share[p]
      channels.append(Channel(
        id=p,
        name=name,
        arrival_profile=profile,
        bid_ratio_bounds=tuple(w["bid_ratio_bounds"]),
        base_ctr=w["base_ctr"][p],
        base_cvr=w["base_cvr"][p],
        floor_price=w["floor_price"][p],
      ))

    mean_cvr = float(np.mean(w["base_cvr"]))
    advertisers: list[Advertiser] = []
    for m in range(int(w["advertisers"])):
      active = [p for p in range(num_channels) if rng.random() < 0.7]
      if not active:
        active = [int(rng.integers(num_channels))]
      cpc_target = float(rng.uniform(0.6, 1.4))
      advertisers.append(Advertiser(
        id=m,
        daily_budget=float(cpc_target * rng.uniform(3.0, 9.0)),
        cpc_target=cpc_target,
        value_per_conversion=float(cpc_target / mean_cvr * rng.uniform(0.8, 1.6)),
        quality=rng.normal(0.0, 0.4, num_channels),
        active_channels=tuple(active),
      ))

    feedback = FeedbackModel.from_seed(w["feedback_seed"], w["feature_dim"], channels)
    return cls(advertisers, channels, feedback,
               reserve=w["reserve"], billing=w["billing"], feature_dim=w["feature_dim"],
               max_candidates=w["max_candidates"], episode_days=w["episode_days"],
               config_hash=config.world_hash())
# }}}
