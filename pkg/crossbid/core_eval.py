from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .core_baselines import CemBidder, PidBidder, RandomBidder
from .core_features import FeatureBuilder
from .core_hmmcb import load_bidder
from .core_market import Bidder, DayResult, run_day
from .core_world import World
from .mem_config import Config
from .mem_manifest import RunManifest


logger = logging.getLogger(__name__)

POLICIES = ("hmmcb", "pid", "cem", "random")
METRICS = ("impressions", "clicks", "cost", "revenue", "cpc", "roi")


def safe_ratio(numerator: float, denominator: float) -> float | None:
  return float(numerator / denominator) if denominator > 0 else None


@dataclass
class ChannelMetrics:
  channel: int
  impressions: int
  clicks: int
  cost: float
  revenue: float
  cpc: float | None
  roi: float | None


@dataclass
class MetricsReport: # {{{
  """Outcome of one policy on one evaluation seed.

  cpc is absent (None) without clicks and roi is absent without cost; neither is ever
  reported as 0 in those cases.
  """
  policy: str
  seed: int
  config_hash: str
  days: int
  impressions: int
  clicks: int
  conversions: int
  cost: float
  revenue: float
  cpc: float | None
  roi: float | None
  violation_rate: float | None
  channels: list[ChannelMetrics] = field(default_factory=list)
  version: str = ""

  def __post_init__(self) -> None:
    if min(self.impressions, self.clicks, self.conversions) < 0 or self.cost < 0:
      raise ValueError("metric counts must be >= 0")

  @classmethod
  def from_results(cls, policy: str, seed: int, world: World, results: Sequence[DayResult],
                   version: str = "") -> MetricsReport:
    """Totals straight from the world states, so cost is the sum of charged prices and
    clicks the sum of feedback clicks."""
    shape = (world.num_advertisers, world.num_channels)
    totals = {k: np.zeros(shape) for k in ("impressions", "clicks", "conversions", "spend", "revenue")}
    for r in results:
      for k in totals:
        totals[k] += getattr(r.state, k)
    clicks_m = totals["clicks"].sum(axis=1)
    spend_m = totals["spend"].sum(axis=1)
    targets = np.array([a.cpc_target for a in world.advertisers])
    scored = clicks_m > 0
    violation = None
    if scored.any():
      violation = float(np.mean(spend_m[scored] / clicks_m[scored] > targets[scored]))
    channels = []
    for p in range(world.num_channels):
      cost = float(totals["spend"][:, p].sum())
      clicks = int(round(totals["clicks"][:, p].sum()))
      revenue = float(totals["revenue"][:, p].sum())
      channels.append(ChannelMetrics(p, int(round(totals["impressions"][:, p].sum())), clicks, cost,
                                     revenue, safe_ratio(cost, clicks), safe_ratio(revenue, cost)))
    cost = float(totals["spend"].sum())
    clicks = int(round(totals["clicks"].sum()))
    revenue = float(totals["revenue"].sum())
    return cls(
      policy=policy, seed=seed, config_hash=world.config_hash, days=len(results),
      impressions=int(round(totals["impressions"].sum())), clicks=clicks,
      conversions=int(round(totals["conversions"].sum())), cost=cost, revenue=revenue,
      cpc=safe_ratio(cost, clicks), roi=safe_ratio(revenue, cost),
      violation_rate=violation, channels=channels, version=version,
    )

  def metric(self, name: str) -> float | None:
    if name not in METRICS:
      raise KeyError(f"unknown metric '{name}'")
    return getattr(self, name)

  def to_dict(self) -> dict[str, Any]:
    return asdict(self)

  @classmethod
  def from_dict(cls, data: dict[str, Any]) -> MetricsReport:
    data = dict(data)
    data["channels"] = [ChannelMetrics(**c) for c in data.get("channels", [])]
    return cls(**data)
# }}}


def normalized_improvement(report: MetricsReport, baseline: MetricsReport) -> dict[str, float]:
  """Percentage change per metric, 100 * (x - x_base) / x_base. Lower CPC gives a negative delta."""
  if report.config_hash != baseline.config_hash:
    raise ValueError("reports come from different world configs")
  deltas = {}
  for name in METRICS:
    x, base = report.metric(name), baseline.metric(name)
    if base is None or base == 0:
      raise ValueError(f"baseline {name} is {base}; relative change is undefined")
    if x is None:
      raise ValueError(f"{name} is undefined for {report.policy} seed {report.seed}")
    deltas[name] = 100.0 * (x - base) / base
  return deltas


def make_bidder(policy: str, config: Config, world: World, seed: int,
                manifest: RunManifest | None = None, run_dir: Path | str | None = None) -> Bidder:
  if policy not in POLICIES:
    raise ValueError(f"policy must be one of {POLICIES}, got '{policy}'")
  bounds = tuple(config.get("world.bid_ratio_bounds"))
  if policy == "pid":
    return PidBidder(config.get("baselines.pid"), 1.0, bounds)
  if policy == "cem":
    return CemBidder(config.get("baselines.cem"), seed, bounds)
  if policy == "random":
    return RandomBidder(seed)
  if manifest is None or run_dir is None:
    raise FileNotFoundError("hmmcb needs a trained run (manifest and run directory)")
  if manifest.world_hash != world.config_hash:
    logger.warning("model %s was trained on world %s, evaluating on %s", manifest.tag,
                   manifest.world_hash[:12], world.config_hash[:12])
  return load_bidder(manifest, run_dir, world, seed)


def evaluate_policy(config: Config, policy: str, seeds: Sequence[int] | None = None,
                    days: int | None = None, manifest: RunManifest | None = None,
                    run_dir: Path | str | None = None) -> list[MetricsReport]:
  """Score a policy on the held-out days that follow the training days.

  Each seed first runs eval.warmup_days days under the PID bidder so channel history
  exists, then the policy bids for `days` scored days.
  """
  world = World.from_config(config)
  seeds = list(config.get("eval.seeds") if seeds is None else seeds)
  days = days or config.get("eval.days")
  first = config.get("logs.train_days") + 1
  warmup = config.get("eval.warmup_days")
  if warmup < 0:
    raise ValueError(f"eval.warmup_days must be >= 0, got {warmup}")
  if warmup >= first:
    logger.warning("eval.warmup_days %d reaches before day 1; warming up on days 1-%d", warmup, first - 1)
    warmup = first - 1
  version = manifest.tag if manifest is not None and policy == "hmmcb" else ""
  reports = []
  for seed in seeds:
    features = FeatureBuilder(world)
    expert = PidBidder(config.get("baselines.pid"), 0.9, tuple(config.get("world.bid_ratio_bounds")))
    for day in range(first - warmup, first):
      run_day(world, day, expert, features, seed)
    bidder = make_bidder(policy, config, world, seed, manifest, run_dir)
    results = [run_day(world, day, bidder, features, seed) for day in range(first, first + days)]
    report = MetricsReport.from_results(policy, seed, world, results, version)
    logger.info("%s seed %d: clicks %d, cpc %s, roi %s", policy, seed, report.clicks,
                "n/a" if report.cpc is None else f"{report.cpc:.3f}",
                "n/a" if report.roi is None else f"{report.roi:.3f}")
    reports.append(report)
  return reports
