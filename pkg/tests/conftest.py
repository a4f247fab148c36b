import numpy as np
import pytest

from crossbid.core_world import Advertiser, Channel, FeedbackModel, ImpressionRequest, World
from crossbid.mem_config import Config


# A market small enough that a full gen-logs/train/evaluate cycle takes seconds.
TINY = {
  "world.advertisers": 4,
  "world.requests_per_day": 120,
  "world.ticks_per_day": 6,
  "world.episode_days": 2,
  "logs.days": 6,
  "logs.train_days": 4,
  "nn.policy_hidden": [8, 8],
  "nn.encoder_hidden": [8, 8],
  "top.batch": 16,
  "top.epochs": 1,
  "top.lr": 1e-3,
  "bottom.batch": 64,
  "bottom.epochs": 1,
  "bottom.lr": 1e-3,
  "cmck.steps": 3,
  "cmck.window": 4,
  "cmck.batch": 32,
  "cmck.latent_dim": 4,
  "eval.days": 1,
  "eval.warmup_days": 1,
  "eval.seeds": [0],
  "baselines.cem": {"population": 4, "elite_fraction": 0.25, "iterations": 1,
                    "sigma": 0.3, "sigma_floor": 0.01, "penalty": 50.0},
}


@pytest.fixture
def tiny_config():
  return Config(overrides=TINY)


@pytest.fixture
def tiny_world(tiny_config):
  return World.from_config(tiny_config)


@pytest.fixture(autouse=True)
def isolated_home(tmp_path, monkeypatch):
  """Keep config and recipe files out of the real home directory."""
  home = tmp_path / "home"
  monkeypatch.setattr("crossbid.mem_config.CONFIG_DIR", home)
  monkeypatch.setattr("crossbid.mem_recipes.RECIPES_FILE", home / "recipes.json")
  return home


def make_channel(p: int, rate: float = 5.0, ticks: int = 4, ctr: float = 0.1) -> Channel:
  return Channel(id=p, name=f"c{p}", arrival_profile=np.full(ticks, rate),
                 bid_ratio_bounds=(0.5, 1.5), base_ctr=ctr, base_cvr=0.2)


def make_advertiser(m: int, channels: tuple[int, ...] = (0, 1), num_channels: int = 2,
                    budget: float = 5.0, cpc_target: float = 1.0) -> Advertiser:
  return Advertiser(id=m, daily_budget=budget, cpc_target=cpc_target, value_per_conversion=4.0,
                    quality=np.zeros(num_channels), active_channels=channels)


def make_request(eligible=(0, 1, 2), channel_id: int = 0, tick: float = 0.5,
                 feature_dim: int = 4) -> ImpressionRequest:
  return ImpressionRequest(channel_id=channel_id, tick=tick, user_features=np.zeros(feature_dim),
                           eligible_advertisers=tuple(eligible), t=0)


@pytest.fixture
def small_world():
  """Three advertisers on two channels; advertiser 2 only buys channel 1."""
  channels = [make_channel(0), make_channel(1, ctr=0.2)]
  advertisers = [make_advertiser(0), make_advertiser(1), make_advertiser(2, channels=(1,))]
  feedback = FeedbackModel.from_seed(3, 4, channels)
  return World(advertisers, channels, feedback, reserve=0.1, max_candidates=3,
               config_hash="small")
