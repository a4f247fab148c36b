import numpy as np
import pandas as pd
import pytest

from crossbid.core_baselines import CemBidder, PidBidder, RandomBidder
from crossbid.core_eval import (
  ChannelMetrics, MetricsReport, evaluate_policy, make_bidder, normalized_improvement, safe_ratio,
)
from crossbid.core_market import DayResult
from crossbid.core_world import World


def _result(world, day=1):
  state = world.start_day(day, np.zeros((world.num_advertisers, world.num_channels)), seed=0)
  return DayResult(day=day, state=state, events=pd.DataFrame(), allocations=pd.DataFrame())


def _report(policy="pid", seed=0, clicks=100, cost=200.0, revenue=400.0, impressions=1000,
            config_hash="h", version=""):
  return MetricsReport(policy=policy, seed=seed, config_hash=config_hash, days=7,
                       impressions=impressions, clicks=clicks, conversions=clicks // 5, cost=cost,
                       revenue=revenue, cpc=safe_ratio(cost, clicks), roi=safe_ratio(revenue, cost),
                       violation_rate=0.0, version=version)


def test_safe_ratio():
  assert safe_ratio(3.0, 2.0) == 1.5
  assert safe_ratio(3.0, 0.0) is None


def test_report_from_results(small_world):
  result = _result(small_world)
  state = result.state
  state.spend[0, 0], state.clicks[0, 0], state.revenue[0, 0] = 10.0, 5, 15.0
  state.impressions[0, 0], state.conversions[0, 0] = 8, 2
  report = MetricsReport.from_results("hmmcb", 3, small_world, [result], "v1")
  assert report.cpc == pytest.approx(2.0)
  assert report.roi == pytest.approx(1.5)
  assert report.violation_rate == 1.0
  assert report.channels[0] == ChannelMetrics(0, 8, 5, 10.0, 15.0, 2.0, 1.5)
  assert report.channels[1].cpc is None and report.channels[1].roi is None
  assert (report.days, report.version, report.config_hash) == (1, "v1", "small")


def test_report_without_clicks_has_no_cpc(small_world):
  report = MetricsReport.from_results("pid", 0, small_world, [_result(small_world)])
  assert report.clicks == 0
  assert report.cpc is None and report.roi is None and report.violation_rate is None


def test_report_round_trip_and_validation():
  report = _report()
  assert MetricsReport.from_dict(report.to_dict()) == report
  with pytest.raises(KeyError):
    report.metric("ctr")
  with pytest.raises(ValueError):
    _report(clicks=-1)


def test_normalized_improvement():
  base = _report()
  better = _report(policy="hmmcb", revenue=437.4)
  deltas = normalized_improvement(better, base)
  assert deltas["revenue"] == pytest.approx(9.35)
  assert deltas["clicks"] == 0.0
  assert all(v == 0.0 for v in normalized_improvement(base, base).values())
  cheaper = normalized_improvement(_report(cost=180.0), base)
  assert cheaper["cpc"] < 0


def test_normalized_improvement_guards():
  with pytest.raises(ValueError):
    normalized_improvement(_report(), _report(config_hash="other"))
  with pytest.raises(ValueError):
    normalized_improvement(_report(), _report(clicks=0))
  with pytest.raises(ValueError):
    normalized_improvement(_report(clicks=0), _report())


def test_make_bidder(tiny_config, tiny_world):
  assert isinstance(make_bidder("pid", tiny_config, tiny_world, 0), PidBidder)
  assert isinstance(make_bidder("cem", tiny_config, tiny_world, 0), CemBidder)
  assert isinstance(make_bidder("random", tiny_config, tiny_world, 0), RandomBidder)
  with pytest.raises(ValueError):
    make_bidder("oracle", tiny_config, tiny_world, 0)
  with pytest.raises(FileNotFoundError):
    make_bidder("hmmcb", tiny_config, tiny_world, 0)


@pytest.mark.parametrize("policy", ["pid", "random"])
def test_evaluate_policy(tiny_config, policy):
  reports = evaluate_policy(tiny_config, policy, seeds=[0, 1], days=2)
  assert [r.seed for r in reports] == [0, 1]
  for r in reports:
    assert r.policy == policy
    assert r.days == 2
    assert r.config_hash == World.from_config(tiny_config).config_hash
    assert r.clicks == sum(c.clicks for c in r.channels)
    assert r.cost == pytest.approx(sum(c.cost for c in r.channels))
    assert r.version == ""


def test_evaluate_policy_is_reproducible(tiny_config):
  a = evaluate_policy(tiny_config, "pid", seeds=[3], days=1)
  b = evaluate_policy(tiny_config, "pid", seeds=[3], days=1)
  assert a == b


def test_warmup_longer_than_history_starts_on_day_one(tiny_config):
  long = tiny_config.derive({"eval.warmup_days": 6})
  full = tiny_config.derive({"eval.warmup_days": 4})
  assert evaluate_policy(long, "pid", seeds=[0], days=1) == evaluate_policy(full, "pid", seeds=[0], days=1)
  with pytest.raises(ValueError):
    evaluate_policy(tiny_config.derive({"eval.warmup_days": -1}), "pid", seeds=[0], days=1)
