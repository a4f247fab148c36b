import numpy as np
import pytest

from conftest import make_advertiser, make_channel, make_request
from crossbid.core_world import (
  Advertiser, Channel, Feedback, FeedbackModel, World, WorldState, charge_and_update,
  compute_final_bid, generate_requests, predict_feedback, run_auction,
)


# Requests {{{
def test_generate_requests_follows_arrival_rate():
  channel = make_channel(0, rate=5.0, ticks=1000)
  requests = generate_requests(channel, 1, np.random.default_rng(0))
  assert 4.8 <= len(requests) / 1000 <= 5.2
  ticks = [r.tick for r in requests]
  assert ticks == sorted(ticks)
  assert [r.t for r in requests] == list(range(len(requests)))


def test_generate_requests_rejects_day_zero():
  with pytest.raises(ValueError):
    generate_requests(make_channel(0), 0, np.random.default_rng(0))


def test_eligibility_filter_caps_candidates():
  advertisers = [make_advertiser(m, channels=(0,), num_channels=1) for m in range(6)]
  requests = generate_requests(make_channel(0, rate=20.0), 1, np.random.default_rng(1),
                               advertisers, max_candidates=3)
  assert requests
  for r in requests:
    assert len(r.eligible_advertisers) == 3
    assert list(r.eligible_advertisers) == sorted(set(r.eligible_advertisers))


def test_inactive_advertisers_never_eligible(small_world):
  requests = small_world.requests_for_day(1, seed=0)
  assert requests
  for r in requests:
    if r.channel_id == 0:
      assert 2 not in r.eligible_advertisers


def test_requests_for_day_is_deterministic(small_world):
  a = small_world.requests_for_day(3, seed=5)
  b = small_world.requests_for_day(3, seed=5)
  assert [(r.channel_id, r.tick) for r in a] == [(r.channel_id, r.tick) for r in b]
  assert [r.tick for r in a] == sorted(r.tick for r in a)
# }}}


# Auction {{{
def test_auction_second_price():
  result = run_auction(make_request(), {0: 1.0, 1: 0.7, 2: 0.4}, reserve=0.1)
  assert result.winner == 0
  assert result.price == pytest.approx(0.7)
  assert result.winning_bid == pytest.approx(1.0)


def test_auction_tie_goes_to_lowest_id():
  result = run_auction(make_request(), {2: 0.9, 1: 0.9, 0: 0.3}, reserve=0.1)
  assert result.winner == 1
  assert result.price == pytest.approx(0.9)


def test_auction_single_bidder_pays_reserve():
  result = run_auction(make_request(), {1: 0.8}, reserve=0.25)
  assert result.winner == 1
  assert result.price == pytest.approx(0.25)


def test_auction_without_qualifying_bid_has_no_winner():
  result = run_auction(make_request(), {0: 0.05, 1: 0.02}, reserve=0.1)
  assert result.winner is None
  assert result.price == 0.0


def test_auction_rejects_ineligible_and_invalid_bids():
  with pytest.raises(ValueError):
    run_auction(make_request(eligible=(0, 1)), {2: 1.0}, reserve=0.1)
  with pytest.raises(ValueError):
    run_auction(make_request(), {0: -1.0}, reserve=0.1)
  with pytest.raises(ValueError):
    run_auction(make_request(), {0: float("nan")}, reserve=0.1)


def test_truthful_bidding_is_dominant():
  grid = np.round(np.arange(0.0, 2.01, 0.25), 2)
  request = make_request()

  def utility(value, bid, others):
    result = run_auction(request, {0: bid, 1: others[0], 2: others[1]}, reserve=0.1)
    return value - result.price if result.winner == 0 else 0.0

  for value in grid:
    for b1 in grid:
      for b2 in grid:
        truthful = utility(value, value, (b1, b2))
        for bid in grid:
          assert utility(value, bid, (b1, b2)) <= truthful + 1e-12
# }}}


# Feedback and billing {{{
def test_click_rate_at_zero_logit():
  model = FeedbackModel(click_weights=np.zeros(4), click_bias=np.zeros(1),
                        conversion_weights=np.zeros(4), conversion_bias=np.zeros(1))
  winner = make_advertiser(0, channels=(0,), num_channels=1)
  request = make_request(eligible=(0,))
  rng = np.random.default_rng(0)
  clicks = [predict_feedback(model, request, winner, rng).clicked for _ in range(10_000)]
  assert 0.47 <= np.mean(clicks) <= 0.53


def test_conversion_needs_click():
  model = FeedbackModel(click_weights=np.zeros(4), click_bias=np.array([-30.0]),
                        conversion_weights=np.zeros(4), conversion_bias=np.array([30.0]))
  winner = make_advertiser(0, channels=(0,), num_channels=1)
  rng = np.random.default_rng(0)
  for _ in range(100):
    feedback = predict_feedback(model, make_request(eligible=(0,)), winner, rng)
    assert feedback.converted == 0 and feedback.revenue == 0.0


def test_compute_final_bid_clamps():
  assert compute_final_bid(1.2, 0.5) == pytest.approx(0.6)
  assert compute_final_bid(3.0, 1.0) == pytest.approx(1.5)
  assert compute_final_bid(0.1, 2.0) == pytest.approx(1.0)
  with pytest.raises(ValueError):
    compute_final_bid(1.0, 0.0)


def _state(billing="click"):
  return WorldState(day=1, budgets=np.array([2.0, 2.0, 2.0]),
                    allocation=np.array([[1.0, 1.0], [1.0, 1.0], [0.0, 2.0]]),
                    rng=np.random.default_rng(0), billing=billing)


def test_click_billing_charges_only_clicks():
  state = _state()
  result = run_auction(make_request(), {0: 0.9, 1: 0.5}, reserve=0.1)
  assert charge_and_update(state, make_request(), result, Feedback()) == 0.0
  assert state.impressions[0, 0] == 1
  assert charge_and_update(state, make_request(), result, Feedback(clicked=1)) == pytest.approx(0.5)
  assert state.spend[0, 0] == pytest.approx(0.5)
  assert state.clicks[0, 0] == 1
  assert state.requests[0] == 2


def test_impression_billing_charges_every_win():
  state = _state("impression")
  result = run_auction(make_request(), {0: 0.9, 1: 0.5}, reserve=0.1)
  assert charge_and_update(state, make_request(), result, Feedback()) == pytest.approx(0.5)


def test_overcharge_is_an_error():
  state = _state()
  result = run_auction(make_request(), {0: 3.0, 1: 2.5}, reserve=0.1)
  with pytest.raises(RuntimeError):
    charge_and_update(state, make_request(), result, Feedback(clicked=1))


def test_feasibility_gate():
  state = _state()
  assert state.can_afford(0, 0, 1.0)
  assert not state.can_afford(0, 0, 1.01)
  assert not state.can_afford(2, 0, 0.1)


def test_world_state_rejects_overallocation():
  with pytest.raises(ValueError):
    WorldState(day=1, budgets=np.array([1.0]), allocation=np.array([[0.6, 0.6]]),
               rng=np.random.default_rng(0))
# }}}


# World {{{
def test_start_day_drops_inactive_channels(small_world):
  state = small_world.start_day(1, np.array([[0.5, 0.5], [1.0, 0.0], [0.5, 0.5]]), seed=0)
  assert state.allocation[2, 0] == 0.0
  assert state.allocation[2, 1] == pytest.approx(2.5)
  assert state.allocation[1].sum() == pytest.approx(5.0)


def test_start_day_rejects_bad_fractions(small_world):
  with pytest.raises(ValueError):
    small_world.start_day(1, np.array([[0.8, 0.8], [0.5, 0.5], [0.0, 1.0]]), seed=0)
  with pytest.raises(ValueError):
    small_world.start_day(1, np.ones((2, 2)) / 2, seed=0)


def test_from_config_is_reproducible(tiny_config):
  a, b = World.from_config(tiny_config), World.from_config(tiny_config)
  assert a.config_hash == b.config_hash == tiny_config.world_hash()
  assert [x.daily_budget for x in a.advertisers] == [x.daily_budget for x in b.advertisers]
  assert a.num_channels == 4
  assert a.channels[0].ticks == 6


def test_from_config_rejects_ragged_channel_lists(tiny_config):
  with pytest.raises(ValueError):
    World.from_config(tiny_config.derive({"world.base_ctr": [0.1, 0.1]}))


def test_world_requires_ordered_ids():
  channels = [make_channel(0), make_channel(1)]
  with pytest.raises(ValueError):
    World([make_advertiser(1)], channels, FeedbackModel.from_seed(0, 4, channels))
  with pytest.raises(ValueError):
    World([make_advertiser(0)], channels, FeedbackModel.from_seed(0, 4, channels), billing="cpa")


def test_advertiser_and_channel_validation():
  with pytest.raises(ValueError):
    make_advertiser(0, budget=0.0)
  with pytest.raises(ValueError):
    Advertiser(0, 1.0, 1.0, 1.0, np.zeros(1), active_channels=())
  with pytest.raises(ValueError):
    Channel(0, "x", np.ones(3), (1.5, 0.5), 0.1)
  with pytest.raises(ValueError):
    Channel(0, "x", -np.ones(3), (0.5, 1.5), 0.1)
# }}}
