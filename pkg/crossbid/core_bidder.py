from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, fields
from typing import Any, Sequence

import numpy as np
import torch
from torch import nn

from .core_features import ObservationLayout
from .core_nn import (
  Mlp, MlpSpec, NonFiniteError, OptimizerConfig, make_optimizer, soft_update, step,
)


logger = logging.getLogger(__name__)

REWARD_MODES = ("hinge", "literal")
LOG_STD_BOUNDS = (-5.0, 2.0)


def expectile_loss(u: torch.Tensor | float, rho: float) -> torch.Tensor:
  """Elementwise asymmetric squared loss |rho - 1(u <= 0)| * u^2."""
  if not 0 < rho < 1:
    raise ValueError(f"expectile must be in (0, 1), got {rho}")
  u = u if torch.is_tensor(u) else torch.tensor(float(u))
  weight = torch.abs(rho - (u <= 0).to(u.dtype))
  return weight * u ** 2


def reward(click: int | float, cumulative_cost: float, allocated: float,
           mode: str = "hinge") -> float:
  """Per-request reward: the click minus an overspend penalty on the channel's allocation.

  hinge:   c = max(0, cost - b) / b
  literal: c = cost - b
  """
  if cumulative_cost < 0:
    raise ValueError(f"cumulative cost must be >= 0, got {cumulative_cost}")
  if mode not in REWARD_MODES:
    raise ValueError(f"reward mode must be one of {REWARD_MODES}, got '{mode}'")
  if mode == "literal":
    return float(click - (cumulative_cost - allocated))
  if allocated <= 0:
    if cumulative_cost > 0:
      raise ValueError("cost charged on a channel with no allocated budget")
    return float(click)
  penalty = max(0.0, cumulative_cost - allocated) / allocated
  return float(click - penalty)


# Value functions {{{
class CentralValue(nn.Module):
  """V over the joint observation of all channels, with a target copy."""

  def __init__(self, channels: int, obs_width: int, hidden: Sequence[int] = (256, 256),
               activation: str = "relu", dtype: torch.dtype = torch.float32) -> None:
    super().__init__()
    self.channels = channels
    self.obs_width = obs_width
    self.net = Mlp(MlpSpec.make(channels * obs_width, hidden, 1, activation), dtype=dtype)
    self.target_net = copy.deepcopy(self.net).requires_grad_(False)

  def online(self) -> nn.Module:
    return self.net

  def value(self, joint: torch.Tensor) -> torch.Tensor:
    return self.net(joint.flatten(start_dim=-2)).squeeze(-1)

  def target_value(self, joint: torch.Tensor) -> torch.Tensor:
    return self.target_net(joint.flatten(start_dim=-2)).squeeze(-1)

  def td_loss(self, batch: BottomBatch, gamma: float, rho: float) -> torch.Tensor:
    with torch.no_grad():
      target = batch.rewards.sum(dim=-1) + gamma * (1 - batch.done) * self.target_value(batch.next_obs)
    return expectile_loss(target - self.value(batch.obs), rho).mean()

  def soft_update(self, tau: float) -> None:
    soft_update(self.target_net, self.net, tau)


class LocalValues(nn.Module):
  """One V per channel over its own observation; the joint value is their sum."""

  def __init__(self, channels: int, obs_width: int, hidden: Sequence[int] = (256, 256),
               activation: str = "relu", dtype: torch.dtype = torch.float32) -> None:
    super().__init__()
    self.channels = channels
    self.obs_width = obs_width
    spec = MlpSpec.make(obs_width, hidden, 1, activation)
    self.nets = nn.ModuleList(Mlp(spec, dtype=dtype) for _ in range(channels))
    self.target_nets = copy.deepcopy(self.nets).requires_grad_(False)

  def online(self) -> nn.Module:
    return self.nets

  def values(self, joint: torch.Tensor, target: bool = False) -> torch.Tensor:
    nets = self.target_nets if target else self.nets
    return torch.stack([net(joint[..., p, :]).squeeze(-1) for p, net in enumerate(nets)], dim=-1)

  def value(self, joint: torch.Tensor) -> torch.Tensor:
    return self.values(joint).sum(dim=-1)

  def td_loss(self, batch: BottomBatch, gamma: float, rho: float) -> torch.Tensor:
    with torch.no_grad():
      target = batch.rewards + gamma * (1 - batch.done).unsqueeze(-1) * self.values(batch.next_obs, True)
    return expectile_loss(target - self.values(batch.obs), rho).sum(dim=-1).mean()

  def soft_update(self, tau: float) -> None:
    soft_update(self.target_nets, self.nets, tau)
# }}}


# Policies {{{
class StatePolicy(nn.Module):
  """Gaussian over the next local observation with fixed sigma.

  Only the layout's dynamic fields are predicted (as a residual on the current values);
  static fields pass through unchanged. The input may carry an appended context latent.
  """

  def __init__(self, layout: ObservationLayout, context_width: int = 0,
               hidden: Sequence[int] = (256, 256), sigma: float = 0.1,
               activation: str = "relu", dtype: torch.dtype = torch.float32) -> None:
    super().__init__()
    if sigma <= 0:
      raise ValueError("state policy sigma must be > 0")
    self.layout = layout
    self.context_width = context_width
    self.sigma = sigma
    self.register_buffer("dynamic_index", torch.tensor(layout.dynamic, dtype=torch.long))
    self.net = Mlp(MlpSpec.make(layout.width + context_width, hidden, len(layout.dynamic), activation),
                   dtype=dtype)

  def _input(self, o: torch.Tensor, z: torch.Tensor | None) -> torch.Tensor:
    if self.context_width:
      if z is None:
        z = torch.zeros(o.shape[:-1] + (self.context_width,), dtype=o.dtype)
      return torch.cat([o, z], dim=-1)
    return o

  def mean(self, o: torch.Tensor, z: torch.Tensor | None = None) -> torch.Tensor:
    return o.index_select(-1, self.dynamic_index) + self.net(self._input(o, z))

  def predict(self, o: torch.Tensor, z: torch.Tensor | None = None) -> torch.Tensor:
    """Predicted next observation at the distribution mean, full width."""
    out = o.clone()
    out[..., self.dynamic_index] = self.mean(o, z)
    return out

  def log_prob(self, o: torch.Tensor, o_next: torch.Tensor,
               z: torch.Tensor | None = None) -> torch.Tensor:
    target = o_next.index_select(-1, self.dynamic_index)
    n = target.shape[-1]
    sq = ((target - self.mean(o, z)) / self.sigma) ** 2
    return -0.5 * sq.sum(dim=-1) - n * math.log(self.sigma) - 0.5 * n * math.log(2 * math.pi)


class ActionPolicy(nn.Module):
  """Squashed Gaussian over the bid ratio given (o_t, o_{t+1})."""

  def __init__(self, obs_width: int, bounds: tuple[float, float], hidden: Sequence[int] = (256, 256),
               activation: str = "relu", dtype: torch.dtype = torch.float32) -> None:
    super().__init__()
    lo, hi = bounds
    if not lo < hi:
      raise ValueError(f"bounds must satisfy lo < hi, got {bounds}")
    self.bounds = (float(lo), float(hi))
    self.obs_width = obs_width
    self.net = Mlp(MlpSpec.make(2 * obs_width, hidden, 2, activation), dtype=dtype)

  def _params(self, o: torch.Tensor, o_next: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    out = self.net(torch.cat([o, o_next], dim=-1))
    return out[..., 0], out[..., 1].clamp(*LOG_STD_BOUNDS)

  def _squash(self, u: torch.Tensor) -> torch.Tensor:
    lo, hi = self.bounds
    return lo + (hi - lo) * (torch.tanh(u) + 1) / 2

  def log_prob(self, o: torch.Tensor, o_next: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    lo, hi = self.bounds
    mu, log_std = self._params(o, o_next)
    y = (2 * (a - lo) / (hi - lo) - 1).clamp(-1 + 1e-6, 1 - 1e-6)
    u = torch.atanh(y)
    gauss = -0.5 * ((u - mu) / log_std.exp()) ** 2 - log_std - 0.5 * math.log(2 * math.pi)
    return gauss - torch.log((hi - lo) / 2 * (1 - y ** 2))

  def mode(self, o: torch.Tensor, o_next: torch.Tensor) -> torch.Tensor:
    mu, _ = self._params(o, o_next)
    return self._squash(mu)
# }}}


@dataclass
class BottomBatch:
  """Joint steps. Shapes: obs/next_obs/policy_next (B, P, D), actions/rewards/live (B, P),
  done (B,), contexts (B, P, Z) or None.

  next_obs follows the padding rule on the joint index; policy_next is each channel's own
  next observation (its next request, or the end-of-day observation)."""
  obs: torch.Tensor
  actions: torch.Tensor
  rewards: torch.Tensor
  next_obs: torch.Tensor
  policy_next: torch.Tensor
  live: torch.Tensor
  done: torch.Tensor
  contexts: torch.Tensor | None = None

  def __len__(self) -> int:
    return self.obs.shape[0]

  def index(self, idx: torch.Tensor) -> BottomBatch:
    values = [getattr(self, f.name) for f in fields(self)]
    return BottomBatch(*(v[idx] if v is not None else None for v in values))


# Training steps {{{
def train_value(value: CentralValue | LocalValues, optimizer: torch.optim.Optimizer,
                batch: BottomBatch, gamma: float, rho: float, tau: float = 0.005,
                clip_norm: float | None = 10.0) -> float:
  if not 0 <= gamma < 1:
    raise ValueError(f"gamma must be in [0, 1), got {gamma}")
  loss = value.td_loss(batch, gamma, rho)
  if not torch.isfinite(loss):
    raise NonFiniteError("value loss is non-finite", block="bottom.value")
  optimizer.zero_grad(set_to_none=True)
  loss.backward()
  step(optimizer, value.online(), clip_norm=clip_norm)
  value.soft_update(tau)
  return float(loss.item())


def state_policy_loss(policies: Sequence[StatePolicy], value: CentralValue | LocalValues,
                      batch: BottomBatch, lam: float,
                      v_scale: float | None = None) -> torch.Tensor:
  """Negated masked next-state likelihood plus lambda * V of the predicted joint next state
  (V normalized by its batch mean magnitude, or by a fixed `v_scale`). Padded entries
  contribute nothing."""
  if lam < 0:
    raise ValueError(f"lambda must be >= 0, got {lam}")
  live = batch.live.to(batch.obs.dtype)
  log_probs, predicted = [], []
  for p, policy in enumerate(policies):
    z = batch.contexts[:, p] if batch.contexts is not None else None
    log_probs.append(policy.log_prob(batch.obs[:, p], batch.policy_next[:, p], z))
    predicted.append(policy.predict(batch.obs[:, p], z))
  cloning = (torch.stack(log_probs, dim=-1) * live).sum(dim=-1).mean()
  if lam == 0:
    return -cloning
  joint = torch.where(batch.live.unsqueeze(-1), torch.stack(predicted, dim=1), batch.next_obs.detach())
  v = value.value(joint)
  scale = v.abs().mean().detach().clamp_min(1e-6) if v_scale is None else v_scale
  return -(cloning + lam * v.mean() / scale)


def train_state_policy(policies: nn.ModuleList, value: CentralValue | LocalValues,
                       optimizer: torch.optim.Optimizer, batch: BottomBatch, lam: float,
                       clip_norm: float | None = 10.0) -> float:
  loss = state_policy_loss(policies, value, batch, lam)
  if not torch.isfinite(loss):
    raise NonFiniteError("state policy loss is non-finite", block="bottom.state_policy")
  optimizer.zero_grad(set_to_none=True)
  loss.backward()
  step(optimizer, policies, clip_norm=clip_norm)
  return float(loss.item())


def action_policy_loss(policies: Sequence[ActionPolicy], batch: BottomBatch) -> torch.Tensor:
  live = batch.live
  terms = []
  for p, policy in enumerate(policies):
    lo, hi = policy.bounds
    a = batch.actions[:, p]
    outside = live[:, p] & ((a < lo - 1e-9) | (a > hi + 1e-9))
    if outside.any():
      raise ValueError(f"logged bid ratio outside [{lo}, {hi}] on channel {p}")
    terms.append(policy.log_prob(batch.obs[:, p], batch.policy_next[:, p], a))
  return -(torch.stack(terms, dim=-1) * live.to(batch.obs.dtype)).sum(dim=-1).mean()


def train_action_policy(policies: nn.ModuleList, optimizer: torch.optim.Optimizer,
                        batch: BottomBatch, clip_norm: float | None = 10.0) -> float:
  loss = action_policy_loss(policies, batch)
  if not torch.isfinite(loss):
    raise NonFiniteError("action policy loss is non-finite", block="bottom.action_policy")
  optimizer.zero_grad(set_to_none=True)
  loss.backward()
  step(optimizer, policies, clip_norm=clip_norm)
  return float(loss.item())


@torch.no_grad()
def act(o: np.ndarray | torch.Tensor, state_policy: StatePolicy, action_policy: ActionPolicy,
        context: np.ndarray | torch.Tensor | None = None) -> float:
  """Bid ratio at the mode of pi_a(. | o, pi_s(o)), clamped to the channel bounds."""
  dtype = next(action_policy.parameters()).dtype
  obs = torch.as_tensor(np.asarray(o, dtype=float), dtype=dtype)
  if obs.dim() != 1 or obs.shape[0] != action_policy.obs_width:
    raise ValueError(f"observation must be a vector of width {action_policy.obs_width}")
  if not torch.isfinite(obs).all():
    raise ValueError("observation contains non-finite values")
  z = None if context is None else torch.as_tensor(np.asarray(context, dtype=float), dtype=dtype)
  predicted = state_policy.predict(obs, z)
  lo, hi = action_policy.bounds
  return float(min(max(action_policy.mode(obs, predicted).item(), lo), hi))
# }}}


class BottomTrainer: # {{{
  """Owns the value (central or local), per-channel state and action policies."""

  def __init__(self, layout: ObservationLayout, bounds: Sequence[tuple[float, float]],
               settings: dict[str, Any], nn_settings: dict[str, Any], context_width: int = 0,
               seed: int = 0) -> None:
    self.settings = dict(settings)
    self.layout = layout
    self.channels = len(bounds)
    hidden = nn_settings["policy_hidden"]
    activation = nn_settings["activation"]
    value_cls = CentralValue if settings.get("central", True) else LocalValues
    self.value = value_cls(self.channels, layout.width, hidden, activation)
    self.state_policies = nn.ModuleList(
      StatePolicy(layout, context_width, hidden, settings["state_sigma"], activation)
      for _ in range(self.channels)
    )
    self.action_policies = nn.ModuleList(
      ActionPolicy(layout.width, b, hidden, activation) for b in bounds
    )
    self.optim_config = OptimizerConfig(lr=settings["lr"], clip_norm=nn_settings["clip_norm"],
                                        betas=tuple(nn_settings["betas"]))
    self.value_optimizer = make_optimizer(self.value.online(), self.optim_config)
    self.state_optimizer = make_optimizer(self.state_policies, self.optim_config)
    self.action_optimizer = make_optimizer(self.action_policies, self.optim_config)
    self.generator = torch.Generator().manual_seed(seed)

  def modules(self) -> dict[str, nn.Module]:
    return {"value": self.value, "state_policies": self.state_policies,
            "action_policies": self.action_policies}

  def optimizers(self) -> dict[str, torch.optim.Optimizer]:
    return {"value": self.value_optimizer, "state": self.state_optimizer,
            "action": self.action_optimizer}

  def fit(self, batch: BottomBatch, epochs: int) -> list[dict[str, float]]:
    s = self.settings
    clip = self.optim_config.clip_norm
    if len(batch) == 0:
      raise ValueError("cannot fit the bottom level on an empty batch")
    size = min(s["batch"], len(batch))
    trace: list[dict[str, float]] = []
    for epoch in range(epochs):
      order = torch.randperm(len(batch), generator=self.generator)
      for start in range(0, len(batch), size):
        mini = batch.index(order[start:start + size])
        v = train_value(self.value, self.value_optimizer, mini, s["gamma"], s["expectile"], s["tau"], clip)
        sp = train_state_policy(self.state_policies, self.value, self.state_optimizer, mini, s["lambda"], clip)
        ap = train_action_policy(self.action_policies, self.action_optimizer, mini, clip)
        trace.append({"epoch": epoch, "value": v, "state_policy": sp, "action_policy": ap})
      logger.info("bottom epoch %d: value %.4f state %.4f action %.4f", epoch,
                  trace[-1]["value"], trace[-1]["state_policy"], trace[-1]["action_policy"])
    return trace

  def act(self, channel_id: int, o: np.ndarray, context: np.ndarray | None = None) -> float:
    return act(o, self.state_policies[channel_id], self.action_policies[channel_id], context)
# }}}
