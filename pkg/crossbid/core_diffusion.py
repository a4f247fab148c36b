from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .core_nn import (
  Mlp, MlpSpec, NonFiniteError, OptimizerConfig, check_finite, make_optimizer, soft_update, step,
)


logger = logging.getLogger(__name__)


class UndefinedCpcError(ArithmeticError):
  """Realized CPC requested for an allocation that produced no clicks."""


# Schedule {{{
class DiffusionSchedule:
  """Noise schedule constants. Index 0 is the clean sample (alpha_bar_0 = 1)."""

  def __init__(self, betas: Sequence[float]) -> None:
    betas_arr = np.asarray(betas, dtype=np.float64)
    if betas_arr.ndim != 1 or betas_arr.size == 0:
      raise ValueError("need at least one diffusion step")
    if np.any(betas_arr <= 0) or np.any(betas_arr >= 1):
      raise ValueError("betas must lie in (0, 1)")
    if np.any(np.diff(betas_arr) < 0):
      raise ValueError("betas must be non-decreasing")
    alphas = 1.0 - betas_arr
    self.betas = torch.tensor(np.concatenate([[0.0], betas_arr]))
    self.alphas = torch.tensor(np.concatenate([[1.0], alphas]))
    self.alpha_bars = torch.tensor(np.concatenate([[1.0], np.cumprod(alphas)]))

  @property
  def steps(self) -> int:
    return self.betas.numel() - 1

  @classmethod
  def linear(cls, steps: int, beta_min: float = 1e-4, beta_max: float = 0.2) -> DiffusionSchedule:
    return cls(np.linspace(beta_min, beta_max, steps))

  @classmethod
  def vp(cls, steps: int, b_min: float = 0.1, b_max: float = 10.0) -> DiffusionSchedule:
    """Variance-preserving ramp used by diffusion Q-learning for short chains."""
    t = np.arange(1, steps + 1)
    alpha = np.exp(-b_min / steps - 0.5 * (b_max - b_min) * (2 * t - 1) / steps ** 2)
    return cls(1.0 - alpha)

  @classmethod
  def from_settings(cls, settings: dict[str, Any]) -> DiffusionSchedule:
    steps = settings["diffusion_steps"]
    if settings.get("schedule", "vp") == "linear":
      return cls.linear(steps, settings["beta_min"], settings["beta_max"])
    return cls.vp(steps)

  def posterior_variance(self, i: int) -> float:
    return float(self.betas[i] * (1 - self.alpha_bars[i - 1]) / (1 - self.alpha_bars[i]))

  def check_step(self, i: int) -> None:
    if not 1 <= i <= self.steps:
      raise ValueError(f"diffusion step must be in 1..{self.steps}, got {i}")


def mix_noise(b0: torch.Tensor, alpha_bar: torch.Tensor | float, eps: torch.Tensor) -> torch.Tensor:
  alpha_bar = torch.as_tensor(alpha_bar, dtype=b0.dtype)
  return torch.sqrt(alpha_bar) * b0 + torch.sqrt(1 - alpha_bar) * eps


def forward_noise(b0: torch.Tensor, i: int, eps: torch.Tensor,
                  schedule: DiffusionSchedule) -> torch.Tensor:
  schedule.check_step(i)
  return mix_noise(b0, schedule.alpha_bars[i], eps)
# }}}


# Actions {{{
@dataclass(frozen=True, eq=False)
class AllocationAction:
  fractions: np.ndarray
  grid_step: float = 0.05

  def __post_init__(self) -> None:
    fractions = np.asarray(self.fractions, dtype=float)
    if np.any(fractions < 0) or np.any(fractions > 1):
      raise ValueError("allocation fractions must lie in [0, 1]")
    if fractions.sum() > 1 + 1e-9:
      raise ValueError(f"allocation fractions sum to {fractions.sum():.4f} > 1")
    object.__setattr__(self, "fractions", fractions)

  def amounts(self, budget: float) -> np.ndarray:
    return self.fractions * budget

  def on_grid(self) -> bool:
    units = self.fractions / self.grid_step
    return bool(np.allclose(units, np.round(units), atol=1e-9))


def discretize_and_mask(b_cont: Sequence[float] | np.ndarray, grid_step: float = 0.05,
                        allowed_total: float = 1.0,
                        active: np.ndarray | None = None) -> AllocationAction:
  """Nearest feasible grid point (L2) to a continuous allocation.

  Coordinates are clamped to [0, 1], inactive channels zeroed and rounded to the grid.
  While the total exceeds `allowed_total`, one grid unit is removed from the coordinate
  with the largest rounding overshoot (ties to the lowest index).
  """
  units_per_one = round(1.0 / grid_step)
  if units_per_one <= 0 or abs(units_per_one * grid_step - 1.0) > 1e-9:
    raise ValueError(f"grid step {grid_step} must divide 1")
  x = np.clip(np.asarray(b_cont, dtype=float), 0.0, 1.0) * units_per_one
  if active is not None:
    x = np.where(np.asarray(active, dtype=bool), x, 0.0)
  units = np.floor(x + 0.5).astype(int)
  cap = max(int(math.floor(allowed_total * units_per_one + 1e-9)), 0)
  while units.sum() > cap:
    overshoot = np.where(units > 0, units - x, -np.inf)
    units[int(np.argmax(overshoot))] -= 1
  return AllocationAction(fractions=np.round(units / units_per_one, 12), grid_step=grid_step)
# }}}


# Policies {{{
class TimeEmbedding(nn.Module):
  def __init__(self, dim: int = 16) -> None:
    super().__init__()
    self.dim = dim

  def forward(self, i: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    half = self.dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=dtype) / max(half - 1, 1))
    angles = i.to(dtype).unsqueeze(-1) * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class TopPolicy(nn.Module): # {{{
  """Conditional diffusion policy: eps_theta(b_noisy, s, i) plus its schedule."""

  def __init__(self, state_dim: int, channels: int, schedule: DiffusionSchedule,
               hidden: Sequence[int] = (256, 256), activation: str = "mish",
               time_dim: int = 16, dtype: torch.dtype = torch.float32) -> None:
    super().__init__()
    self.state_dim = state_dim
    self.channels = channels
    self.schedule = schedule
    self.time = TimeEmbedding(time_dim)
    self.eps_model = Mlp(MlpSpec.make(channels + state_dim + time_dim, hidden, channels, activation),
                         dtype=dtype)

  @property
  def dtype(self) -> torch.dtype:
    return next(self.parameters()).dtype

  def forward(self, b_noisy: torch.Tensor, s: torch.Tensor, i: torch.Tensor) -> torch.Tensor:
    if s.shape[-1] != self.state_dim:
      raise ValueError(f"state width {s.shape[-1]} does not match policy width {self.state_dim}")
    return self.eps_model(torch.cat([b_noisy, s, self.time(i, b_noisy.dtype)], dim=-1))

  def sample(self, s: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    return sample_allocation(s, self, generator)

  def behavior_loss(self, s: torch.Tensor, b: torch.Tensor,
                    generator: torch.Generator | None = None) -> torch.Tensor:
    return loss_simple(self, s, b, generator)
# }}}


class DirectPolicy(nn.Module):
  """Deterministic state-to-allocation net with a squared-error cloning loss.
  Stands in for the diffusion chain when it is ablated."""

  def __init__(self, state_dim: int, channels: int, hidden: Sequence[int] = (256, 256),
               activation: str = "relu", dtype: torch.dtype = torch.float32) -> None:
    super().__init__()
    self.state_dim = state_dim
    self.channels = channels
    self.net = Mlp(MlpSpec.make(state_dim, hidden, channels, activation, "sigmoid"), dtype=dtype)

  @property
  def dtype(self) -> torch.dtype:
    return next(self.parameters()).dtype

  def sample(self, s: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    return self.net(s)

  def behavior_loss(self, s: torch.Tensor, b: torch.Tensor,
                    generator: torch.Generator | None = None) -> torch.Tensor:
    if b.shape[0] == 0:
      raise ValueError("empty batch")
    return ((self.net(s) - b) ** 2).sum(dim=-1).mean()


def denoise_step(b_i: torch.Tensor, s: torch.Tensor, i: int, policy: TopPolicy,
                 generator: torch.Generator | None = None) -> torch.Tensor:
  """One reverse step: DDPM posterior mean from the predicted noise, plus posterior noise
  except at i = 1."""
  schedule = policy.schedule
  schedule.check_step(i)
  steps = torch.full(b_i.shape[:-1], i, dtype=torch.long)
  eps = policy(b_i, s, steps)
  if not torch.isfinite(eps).all():
    raise NonFiniteError(f"noise prediction is non-finite at step {i}", block="top.policy")
  beta = schedule.betas[i].to(b_i.dtype)
  alpha = schedule.alphas[i].to(b_i.dtype)
  alpha_bar = schedule.alpha_bars[i].to(b_i.dtype)
  mean = (b_i - beta / torch.sqrt(1 - alpha_bar) * eps) / torch.sqrt(alpha)
  if i == 1:
    return mean
  noise = torch.randn(b_i.shape, generator=generator, dtype=b_i.dtype)
  return mean + math.sqrt(schedule.posterior_variance(i)) * noise


def sample_allocation(s: torch.Tensor, policy: TopPolicy,
                      generator: torch.Generator | None = None) -> torch.Tensor:
  """Run the full reverse chain from N(0, I); returns the continuous b^0."""
  single = s.dim() == 1
  states = s.unsqueeze(0) if single else s
  if states.shape[-1] != policy.state_dim:
    raise ValueError(f"state width {states.shape[-1]} does not match policy width {policy.state_dim}")
  b = torch.randn((states.shape[0], policy.channels), generator=generator, dtype=states.dtype)
  for i in range(policy.schedule.steps, 0, -1):
    b = denoise_step(b, states, i, policy, generator)
  return b[0] if single else b
# }}}


# Losses {{{
def loss_simple(policy: TopPolicy, s: torch.Tensor, b: torch.Tensor,
                generator: torch.Generator | None = None, noise: torch.Tensor | None = None,
                steps: torch.Tensor | None = None) -> torch.Tensor:
  """Noise-prediction loss: per-sample squared error summed over channels, batch mean.
  `noise` and `steps` override the sampled ones."""
  if b.shape[0] == 0:
    raise ValueError("empty batch")
  n = b.shape[0]
  schedule = policy.schedule
  if steps is None:
    steps = torch.randint(1, schedule.steps + 1, (n,), generator=generator)
  if noise is None:
    noise = torch.randn(b.shape, generator=generator, dtype=b.dtype)
  alpha_bar = schedule.alpha_bars[steps].to(b.dtype).unsqueeze(-1)
  predicted = policy(mix_noise(b, alpha_bar, noise), s, steps)
  loss = ((noise - predicted) ** 2).sum(dim=-1).mean()
  return check_finite(loss, "top.loss_simple")


def cpc_real(amounts: Sequence[float] | np.ndarray, clicks: float) -> float:
  """Allocated spend per click over all channels."""
  if clicks <= 0:
    raise UndefinedCpcError("realized CPC is undefined without clicks")
  return float(np.sum(amounts) / clicks)


def batch_cpc_real(amounts: torch.Tensor, clicks: torch.Tensor,
                   cpc_target: torch.Tensor) -> torch.Tensor:
  """Realized CPC per row; rows without clicks get the bounded penalty 2 x target."""
  has_clicks = clicks > 0
  safe = torch.where(has_clicks, clicks, torch.ones_like(clicks))
  return torch.where(has_clicks, amounts.sum(dim=-1) / safe, 2.0 * cpc_target)


def loss_cpc(cpc_target: torch.Tensor, cpc_realized: torch.Tensor) -> torch.Tensor:
  cpc_target = torch.as_tensor(cpc_target)
  if cpc_target.numel() == 0:
    raise ValueError("empty batch")
  loss = ((cpc_target - cpc_realized) ** 2).mean()
  return check_finite(loss, "top.loss_cpc")
# }}}


# Critic and training {{{
class TopCritic(nn.Module):
  """Clipped double-Q over (state, continuous allocation), with target copies."""

  def __init__(self, state_dim: int, channels: int, hidden: Sequence[int] = (256, 256),
               activation: str = "mish", dtype: torch.dtype = torch.float32) -> None:
    super().__init__()
    spec = MlpSpec.make(state_dim + channels, hidden, 1, activation)
    self.q1 = Mlp(spec, dtype=dtype)
    self.q2 = Mlp(spec, dtype=dtype)
    self.q1_target = copy.deepcopy(self.q1).requires_grad_(False)
    self.q2_target = copy.deepcopy(self.q2).requires_grad_(False)

  def online(self) -> list[nn.Module]:
    return [self.q1, self.q2]

  def forward(self, s: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.cat([s, b], dim=-1)
    return self.q1(x).squeeze(-1), self.q2(x).squeeze(-1)

  def q_min(self, s: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    q1, q2 = self(s, b)
    return torch.minimum(q1, q2)

  def target(self, s: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    x = torch.cat([s, b], dim=-1)
    return torch.minimum(self.q1_target(x), self.q2_target(x)).squeeze(-1)

  def soft_update(self, tau: float) -> None:
    soft_update(self.q1_target, self.q1, tau)
    soft_update(self.q2_target, self.q2, tau)


@dataclass
class TopBatch:
  states: torch.Tensor
  actions: torch.Tensor
  rewards: torch.Tensor
  next_states: torch.Tensor
  done: torch.Tensor
  budget: torch.Tensor
  cpc_target: torch.Tensor

  def __len__(self) -> int:
    return self.states.shape[0]

  def index(self, idx: torch.Tensor) -> TopBatch:
    return TopBatch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


def critic_loss(critic: TopCritic, batch: TopBatch, policy: nn.Module, gamma: float,
                generator: torch.Generator | None = None) -> torch.Tensor:
  with torch.no_grad():
    next_b = policy.sample(batch.next_states, generator)
    target = batch.rewards + gamma * (1.0 - batch.done) * critic.target(batch.next_states, next_b)
  q1, q2 = critic(batch.states, batch.actions)
  return F.mse_loss(q1, target) + F.mse_loss(q2, target)


def train_critic(critic: TopCritic, optimizer: torch.optim.Optimizer, batch: TopBatch,
                 policy: nn.Module, gamma: float, tau: float = 0.005,
                 generator: torch.Generator | None = None, clip_norm: float | None = 10.0) -> float:
  """One TD step on both heads, then a soft update of the target heads."""
  if not 0 <= gamma < 1:
    raise ValueError(f"gamma must be in [0, 1), got {gamma}")
  loss = critic_loss(critic, batch, policy, gamma, generator)
  if not torch.isfinite(loss):
    raise NonFiniteError("critic loss is non-finite", block="top.critic")
  optimizer.zero_grad(set_to_none=True)
  loss.backward()
  step(optimizer, nn.ModuleList(critic.online()), clip_norm=clip_norm)
  critic.soft_update(tau)
  return float(loss.item())


def policy_loss_terms(policy: nn.Module, critic: TopCritic, batch: TopBatch,
                      generator: torch.Generator | None = None
                      ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
  """(behavior cloning loss, CPC loss, Q of the sampled allocations).

  The allocation sampled for the CPC and Q terms keeps its graph through the whole
  reverse chain. Clicks are taken from the logged day.
  """
  simple = policy.behavior_loss(batch.states, batch.actions, generator)
  b0 = policy.sample(batch.states, generator)
  realized = batch_cpc_real(b0 * batch.budget.unsqueeze(-1), batch.rewards, batch.cpc_target)
  cpc = loss_cpc(batch.cpc_target, realized)
  q = critic.q_min(batch.states, b0)
  return simple, cpc, q


def combine_policy_loss(simple: torch.Tensor, cpc: torch.Tensor, q: torch.Tensor,
                        alpha: float, cpc_weight: float = 1.0,
                        q_scale: float | None = None) -> torch.Tensor:
  """simple + cpc_weight * cpc - alpha * mean Q, with Q divided by its batch mean magnitude
  unless a fixed `q_scale` is given."""
  if q_scale is None:
    q_scale = q.abs().mean().detach().clamp_min(1e-6)
  return simple + cpc_weight * cpc - alpha * q.mean() / q_scale


def train_policy_step(policy: nn.Module, critic: TopCritic, optimizer: torch.optim.Optimizer,
                      batch: TopBatch, alpha: float, cpc_weight: float = 1.0,
                      generator: torch.Generator | None = None,
                      clip_norm: float | None = 10.0) -> dict[str, float]:
  if alpha < 0:
    raise ValueError(f"alpha must be >= 0, got {alpha}")
  simple, cpc, q = policy_loss_terms(policy, critic, batch, generator)
  loss = combine_policy_loss(simple, cpc, q, alpha, cpc_weight)
  if not torch.isfinite(loss):
    raise NonFiniteError("policy loss is non-finite", block="top.policy")
  optimizer.zero_grad(set_to_none=True)
  loss.backward()
  step(optimizer, policy, clip_norm=clip_norm)
  return {"loss": float(loss.item()), "simple": float(simple.item()),
          "cpc": float(cpc.item()), "q": float(q.mean().item())}
# }}}


class TopTrainer: # {{{
  """Owns the allocator's policy, critic and optimizers; trains on top-level datasets."""

  def __init__(self, state_dim: int, channels: int, settings: dict[str, Any],
               nn_settings: dict[str, Any], seed: int = 0) -> None:
    self.settings = dict(settings)
    self.state_dim = state_dim
    self.channels = channels
    hidden = nn_settings["policy_hidden"]
    if settings.get("use_diffusion", True):
      self.policy: nn.Module = TopPolicy(state_dim, channels, DiffusionSchedule.from_settings(settings),
                                         hidden)
    else:
      self.policy = DirectPolicy(state_dim, channels, hidden, nn_settings["activation"])
    self.critic = TopCritic(state_dim, channels, hidden)
    self.optim_config = OptimizerConfig(lr=settings["lr"], clip_norm=nn_settings["clip_norm"],
                                        betas=tuple(nn_settings["betas"]))
    self.policy_optimizer = make_optimizer(self.policy, self.optim_config)
    self.critic_optimizer = make_optimizer(nn.ModuleList(self.critic.online()), self.optim_config)
    self.generator = torch.Generator().manual_seed(seed)

  def modules(self) -> dict[str, nn.Module]:
    return {"policy": self.policy, "critic": self.critic}

  def optimizers(self) -> dict[str, torch.optim.Optimizer]:
    return {"policy": self.policy_optimizer, "critic": self.critic_optimizer}

  def fit(self, batch: TopBatch, epochs: int) -> list[dict[str, float]]:
    """Shuffled mini-batch passes; one critic and one policy step per mini-batch."""
    if len(batch) == 0:
      raise ValueError("cannot fit the top level on an empty batch")
    size = min(self.settings["batch"], len(batch))
    trace: list[dict[str, float]] = []
    for epoch in range(epochs):
      order = torch.randperm(len(batch), generator=self.generator)
      for start in range(0, len(batch), size):
        mini = batch.index(order[start:start + size])
        critic_loss_value = train_critic(self.critic, self.critic_optimizer, mini, self.policy,
                                         self.settings["gamma"], self.settings["tau"],
                                         self.generator, self.optim_config.clip_norm)
        terms = train_policy_step(self.policy, self.critic, self.policy_optimizer, mini,
                                  self.settings["alpha"], self.settings["cpc_weight"],
                                  self.generator, self.optim_config.clip_norm)
        trace.append({"epoch": epoch, "critic": critic_loss_value, **terms})
      logger.info("top epoch %d: critic %.4f policy %.4f", epoch, trace[-1]["critic"], trace[-1]["loss"])
    return trace

  @torch.no_grad()
  def allocate(self, state: np.ndarray, active: np.ndarray | None = None,
               allowed_total: float = 1.0) -> AllocationAction:
    s = torch.as_tensor(np.asarray(state), dtype=self.policy.dtype)
    b0 = self.policy.sample(s, self.generator)
    return discretize_and_mask(b0.numpy(), self.settings["grid_step"], allowed_total, active)
# }}}
