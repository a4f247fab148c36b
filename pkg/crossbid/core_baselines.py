from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .core_features import FeatureBuilder
from .core_market import BidOutcome, Bidder, run_day
from .core_world import Advertiser, ImpressionRequest, World, WorldState


logger = logging.getLogger(__name__)


class EvaluatorError(RuntimeError):
  def __init__(self, iteration: int, cause: BaseException) -> None:
    super().__init__(f"CEM objective failed at iteration {iteration}: {cause}")
    self.iteration = iteration


# PID {{{
@dataclass
class PidState:
  kp: float = 0.4
  ki: float = 0.05
  kd: float = 0.1
  scale: float = 1.0
  bounds: tuple[float, float] = (0.5, 1.5)
  integral_limit: float = 2.0
  integral: float = 0.0
  prev_error: float | None = None

  def __post_init__(self) -> None:
    lo, hi = self.bounds
    if not lo < hi:
      raise ValueError(f"PID bounds must satisfy lo < hi, got {self.bounds}")
    self.scale = min(max(self.scale, lo), hi)


def pid_update(state: PidState, cpc_target: float, cpc_realized: float) -> float:
  """One controller step toward cpc_target. Mutates and returns the bid scale."""
  if cpc_realized < 0:
    raise ValueError(f"cpc_realized must be >= 0, got {cpc_realized}")
  error = cpc_target - cpc_realized
  # anti-windup
  state.integral = float(np.clip(state.integral + error, -state.integral_limit, state.integral_limit))
  derivative = 0.0 if state.prev_error is None else error - state.prev_error
  lo, hi = state.bounds
  step = state.kp * error + state.ki * state.integral + state.kd * derivative
  state.scale = float(min(max(state.scale + step, lo), hi))
  state.prev_error = error
  return state.scale


class PidBidder(Bidder): # {{{
  """Per-advertiser PID pacing on the advertiser's daily CPC, normalized by its target.

  The controller runs once per tick an advertiser takes part in, with setpoint
  `margin` (1.0 means bid for exactly the target CPC).
  """

  name = "pid"

  def __init__(self, gains: dict[str, float], margin: float = 1.0,
               bounds: tuple[float, float] = (0.5, 1.5)) -> None:
    self.gains = dict(gains)
    self.margin = margin
    self.bounds = bounds
    self.controllers: dict[int, PidState] = {}
    self._last_slot: dict[int, int] = {}

  def _controller(self, advertiser_id: int) -> PidState:
    if advertiser_id not in self.controllers:
      self.controllers[advertiser_id] = PidState(
        kp=self.gains["kp"], ki=self.gains["ki"], kd=self.gains["kd"],
        integral_limit=self.gains.get("integral_limit", 2.0), bounds=self.bounds,
      )
    return self.controllers[advertiser_id]

  def begin_day(self, world: World, day: int, features: FeatureBuilder) -> np.ndarray:
    self.controllers = {}
    self._last_slot = {}
    return super().begin_day(world, day, features)

  def bid_ratio(self, world, state, request, advertiser, observation) -> float:
    return self._controller(advertiser.id).scale

  def observe(self, world: World, state: WorldState, request: ImpressionRequest,
              advertiser: Advertiser, outcome: BidOutcome) -> None:
    slot = int(request.tick)
    m = advertiser.id
    if slot <= self._last_slot.get(m, -1):
      return
    self._last_slot[m] = slot
    clicks = state.clicks[m].sum()
    realized = state.spend[m].sum() / max(clicks, 1) / advertiser.cpc_target
    pid_update(self._controller(m), self.margin, realized)
# }}}
# }}}


# CEM {{{
@dataclass
class CemState:
  mean: np.ndarray
  sigma: np.ndarray
  population: int = 100
  elite_fraction: float = 0.2
  sigma_floor: float = 0.01
  lower: float | np.ndarray | None = None
  upper: float | np.ndarray | None = None
  seed: int = 0

  def __post_init__(self) -> None:
    self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float)).copy()
    self.sigma = np.maximum(np.broadcast_to(np.asarray(self.sigma, dtype=float), self.mean.shape),
                            self.sigma_floor).copy()
    if not 0 < self.elite_fraction <= 1:
      raise ValueError("elite_fraction must be in (0, 1]")

  @property
  def elite_count(self) -> int:
    return max(1, int(round(self.population * self.elite_fraction)))


@dataclass
class CemResult:
  best_params: np.ndarray
  best_value: float
  history: list[float] = field(default_factory=list)


def cem_optimize(evaluate: Callable[[np.ndarray], float], state: CemState,
                 iterations: int) -> CemResult:
  """Maximize `evaluate` by iterated sampling and refitting on elites.

  Returns the best parameters ever evaluated; `history` holds the best-ever value per
  iteration. `state.mean`/`state.sigma` are refit in place.
  """
  if state.population < 2 * state.elite_count:
    raise ValueError(
      f"population {state.population} must be at least twice the elite count {state.elite_count}"
    )
  rng = np.random.default_rng(state.seed)
  best_params = state.mean.copy()
  best_value = -np.inf
  history: list[float] = []
  for iteration in range(iterations):
    samples = rng.normal(state.mean, state.sigma, size=(state.population, state.mean.size))
    if state.lower is not None or state.upper is not None:
      samples = np.clip(samples, state.lower, state.upper)
    try:
      values = np.array([float(evaluate(x)) for x in samples])
    except Exception as e:
      raise EvaluatorError(iteration, e) from e
    order = np.argsort(-values, kind="stable")
    elites = samples[order[:state.elite_count]]
    if values[order[0]] > best_value:
      best_value = float(values[order[0]])
      best_params = samples[order[0]].copy()
    state.mean = elites.mean(axis=0)
    state.sigma = np.maximum(elites.std(axis=0), state.sigma_floor)
    history.append(best_value)
    logger.debug("cem iteration %d: best %.4f", iteration, best_value)
  return CemResult(best_params=best_params, best_value=best_value, history=history)


class FixedRatioBidder(Bidder):
  """One bid ratio per channel for every advertiser."""

  name = "fixed"

  def __init__(self, ratios: Sequence[float]) -> None:
    self.ratios = np.asarray(ratios, dtype=float)

  def bid_ratio(self, world, state, request, advertiser, observation) -> float:
    return float(self.ratios[request.channel_id])


class CemBidder(Bidder): # {{{
  """Plans one bid ratio per channel each day by CEM over simulated rollouts of that day
  on a separate planning traffic seed."""

  name = "cem"

  def __init__(self, settings: dict[str, Any], seed: int,
               bounds: tuple[float, float] = (0.5, 1.5)) -> None:
    self.settings = dict(settings)
    self.seed = seed
    self.bounds = bounds
    self.ratios: np.ndarray | None = None

  def _objective(self, world: World, day: int) -> Callable[[np.ndarray], float]:
    targets = np.array([a.cpc_target for a in world.advertisers])
    penalty = self.settings["penalty"]

    def evaluate(ratios: np.ndarray) -> float:
      result = run_day(world, day, FixedRatioBidder(ratios), FeatureBuilder(world),
                       seed=self.seed + 10_000)
      clicks = result.state.clicks.sum(axis=1)
      spend = result.state.spend.sum(axis=1)
      cpc = spend / np.maximum(clicks, 1)
      violation = np.maximum(cpc / targets - 1.0, 0.0).sum()
      overrun = np.maximum(spend - result.state.budgets, 0.0).sum()
      return float(clicks.sum() - penalty * (violation + overrun))

    return evaluate

  def begin_day(self, world: World, day: int, features: FeatureBuilder) -> np.ndarray:
    lo, hi = self.bounds
    state = CemState(
      mean=np.ones(world.num_channels),
      sigma=self.settings["sigma"],
      population=self.settings["population"],
      elite_fraction=self.settings["elite_fraction"],
      sigma_floor=self.settings["sigma_floor"],
      lower=lo, upper=hi, seed=self.seed * 1000 + day,
    )
    result = cem_optimize(self._objective(world, day), state, self.settings["iterations"])
    self.ratios = result.best_params
    logger.info("cem day %d: ratios %s (objective %.2f)", day, np.round(self.ratios, 3),
                result.best_value)
    return super().begin_day(world, day, features)

  def bid_ratio(self, world, state, request, advertiser, observation) -> float:
    assert self.ratios is not None
    return float(self.ratios[request.channel_id])
# }}}
# }}}


class RandomBidder(Bidder):
  """Dirichlet budget split over active channels, uniform bid ratios within bounds."""

  name = "random"

  def __init__(self, seed: int) -> None:
    self.rng = np.random.default_rng(seed)

  def begin_day(self, world: World, day: int, features: FeatureBuilder) -> np.ndarray:
    fractions = np.zeros((world.num_advertisers, world.num_channels))
    for adv in world.advertisers:
      active = list(adv.active_channels)
      fractions[adv.id, active] = self.rng.dirichlet(np.ones(len(active)))
    return fractions

  def bid_ratio(self, world, state, request, advertiser, observation) -> float:
    lo, hi = world.channels[request.channel_id].bid_ratio_bounds
    return float(self.rng.uniform(lo, hi))
