from __future__ import annotations

import logging
from typing import Any, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .core_nn import Mlp, MlpSpec, NonFiniteError, check_finite, step


logger = logging.getLogger(__name__)

POLICY_ENCODERS = ("spec", "com", "both")


class KnowledgeEncoders(nn.Module): # {{{
  """Common and specific context encoders, a shared decoder and the window aggregator.

  Context rows are [o, a, r, o_next] transitions of one channel.
  """

  def __init__(self, context_width: int, latent_dim: int = 16, hidden: Sequence[int] = (128, 128),
               policy_encoder: str = "spec", activation: str = "relu",
               dtype: torch.dtype = torch.float32) -> None:
    super().__init__()
    if policy_encoder not in POLICY_ENCODERS:
      raise ValueError(f"policy_encoder must be one of {POLICY_ENCODERS}, got '{policy_encoder}'")
    self.context_width = context_width
    self.latent_dim = latent_dim
    self.policy_encoder = policy_encoder
    self.common = Mlp(MlpSpec.make(context_width, hidden, latent_dim, activation), dtype=dtype)
    self.specific = Mlp(MlpSpec.make(context_width, hidden, latent_dim, activation), dtype=dtype)
    self.decoder = Mlp(MlpSpec.make(latent_dim, tuple(reversed(hidden)), context_width, activation),
                       dtype=dtype)
    self.aggregator = nn.Linear(self.z_width, self.z_width, dtype=dtype)
    self.frozen = False

  @property
  def z_width(self) -> int:
    return 2 * self.latent_dim if self.policy_encoder == "both" else self.latent_dim

  def freeze(self) -> KnowledgeEncoders:
    self.requires_grad_(False)
    self.eval()
    self.frozen = True
    return self

  def row_latents(self, rows: torch.Tensor) -> torch.Tensor:
    """Per-row latents of the encoder(s) that feed the policies."""
    if self.policy_encoder == "spec":
      return self.specific(rows)
    if self.policy_encoder == "com":
      return self.common(rows)
    return torch.cat([self.common(rows), self.specific(rows)], dim=-1)

  def aggregate(self, latents: torch.Tensor) -> torch.Tensor:
    """Mean pooling over rows followed by a linear projection."""
    return self.aggregator(latents.mean(dim=0))
# }}}


# Losses {{{
def reconstruct(c_p: torch.Tensor, c_k: torch.Tensor, encoders: KnowledgeEncoders) -> torch.Tensor:
  """Decode the common latent of channel p's rows plus the specific latent of k's rows."""
  if c_p.shape[0] == 0 or c_k.shape[0] == 0:
    raise ValueError("context batches must have at least one row")
  if c_p.shape != c_k.shape:
    raise ValueError(f"context batches must have equal shapes, got {tuple(c_p.shape)} and {tuple(c_k.shape)}")
  if c_p.shape[-1] != encoders.context_width:
    raise ValueError(f"context width {c_p.shape[-1]} does not match encoder width {encoders.context_width}")
  return encoders.decoder(encoders.common(c_p) + encoders.specific(c_k))


def loss_orth(z_p: torch.Tensor, z_k: torch.Tensor) -> torch.Tensor:
  """Squared Frobenius norm of z_p^T z_k."""
  if z_p.shape[-1] != z_k.shape[-1]:
    raise ValueError("latent widths differ")
  return ((z_p.transpose(0, 1) @ z_k) ** 2).sum()


def loss_smse(c: torch.Tensor, c_tilde: torch.Tensor) -> torch.Tensor:
  """Scale-invariant MSE: mean squared difference minus the squared mean difference."""
  d = (c - c_tilde).reshape(-1)
  n = d.numel()
  return (d ** 2).sum() / n - d.sum() ** 2 / n ** 2


def task_infer_loss(encoders: KnowledgeEncoders, batches: dict[int, torch.Tensor],
                    pairs: Sequence[tuple[int, int]], eta: float,
                    normalize: bool = True) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
  """(L_o + eta * L_r, L_o, L_r) over the (p, k) pairs."""
  orth, recon = [], []
  for p, k in pairs:
    c_p, c_k = batches[p], batches[k]
    z_p, z_k = encoders.common(c_p), encoders.specific(c_k)
    if normalize:
      z_p, z_k = F.normalize(z_p, dim=-1), F.normalize(z_k, dim=-1)
    orth.append(loss_orth(z_p, z_k))
    recon.append(loss_smse(c_k, reconstruct(c_p, c_k, encoders)))
  l_o = torch.stack(orth).sum()
  l_r = torch.stack(recon).sum()
  return l_o + eta * l_r, l_o, l_r
# }}}


def sample_pairs(channels: Sequence[int], rng: np.random.Generator) -> list[tuple[int, int]]:
  """For every channel p one partner k != p, drawn uniformly."""
  pairs = []
  for p in channels:
    others = [k for k in channels if k != p]
    pairs.append((p, int(rng.choice(others))))
  return pairs


def train_task_infer(encoders: KnowledgeEncoders, contexts: dict[int, np.ndarray], eta: float,
                     steps: int, optimizer: torch.optim.Optimizer, rows: int = 256,
                     normalize: bool = True, seed: int = 0,
                     clip_norm: float | None = 10.0) -> list[dict[str, float]]:
  """Phase one: fit encoders and decoder on per-channel context rows.

  Args:
    contexts: channel id -> (n, context_width) rows
    rows: rows sampled per channel and step (with replacement when a channel has fewer)
  Returns:
    loss trace, one entry per step
  """
  if eta < 0:
    raise ValueError(f"eta must be >= 0, got {eta}")
  if encoders.frozen:
    raise RuntimeError("encoders are frozen")
  channels = sorted(k for k, v in contexts.items() if len(v) > 0)
  if len(channels) < 2:
    raise ValueError("task inference needs context rows from at least two channels")
  dtype = next(encoders.parameters()).dtype
  tensors = {k: torch.as_tensor(np.asarray(contexts[k]), dtype=dtype) for k in channels}
  rng = np.random.default_rng(seed)
  trace: list[dict[str, float]] = []
  for i in range(steps):
    batches = {}
    for k in channels:
      n = tensors[k].shape[0]
      idx = rng.choice(n, size=rows, replace=n < rows)
      batches[k] = tensors[k][torch.as_tensor(idx)]
    total, l_o, l_r = task_infer_loss(encoders, batches, sample_pairs(channels, rng), eta, normalize)
    if not torch.isfinite(total):
      raise NonFiniteError("task inference loss is non-finite", block="cmck")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    step(optimizer, encoders, clip_norm=clip_norm)
    trace.append({"step": i, "loss": float(total.item()), "orth": float(l_o.item()),
                  "recon": float(l_r.item())})
    if (i + 1) % 100 == 0:
      last = trace[-1]
      logger.info("cmck step %d: loss %.4f (orth %.4f, recon %.4f)", i + 1, last["loss"],
                  last["orth"], last["recon"])
  return trace


@torch.no_grad()
def context_latent(window: np.ndarray | torch.Tensor, encoders: KnowledgeEncoders) -> np.ndarray:
  """z* of a context window; zeros for an empty window."""
  if not encoders.frozen:
    raise RuntimeError("encoders must be frozen before they augment states")
  dtype = next(encoders.parameters()).dtype
  rows = torch.as_tensor(np.asarray(window, dtype=float), dtype=dtype).reshape(-1, encoders.context_width)
  if rows.shape[0] == 0:
    return np.zeros(encoders.z_width)
  return check_finite(encoders.aggregate(encoders.row_latents(rows)), "cmck.aggregate").numpy().astype(float)


def augment_state(o: np.ndarray, window: np.ndarray | torch.Tensor,
                  encoders: KnowledgeEncoders) -> np.ndarray:
  return np.concatenate([np.asarray(o, dtype=float), context_latent(window, encoders)])


def context_rows(obs: np.ndarray, actions: np.ndarray, rewards: np.ndarray,
                 next_obs: np.ndarray) -> np.ndarray:
  """Stack transitions into context rows [o, a, r, o_next]."""
  return np.concatenate([obs, actions[:, None], rewards[:, None], next_obs], axis=1)


def settings_encoders(context_width: int, settings: dict[str, Any],
                      nn_settings: dict[str, Any]) -> KnowledgeEncoders:
  return KnowledgeEncoders(context_width, settings["latent_dim"], nn_settings["encoder_hidden"],
                           settings["policy_encoder"], nn_settings["activation"])
