from __future__ import annotations

import hashlib
import logging
import math
import pickle
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np
import torch
from torch import nn


logger = logging.getLogger(__name__)

ACTIVATIONS: dict[str, Callable[[], nn.Module]] = {
  "relu": nn.ReLU,
  "tanh": nn.Tanh,
  "sigmoid": nn.Sigmoid,
  "elu": nn.ELU,
  "mish": nn.Mish,
  "identity": nn.Identity,
}
OUTPUT_ACTIVATIONS = ("identity", "sigmoid", "tanh", "softmax")

CHECKPOINT_FORMAT = "crossbid.checkpoint"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
  """A loss, output or gradient went NaN/inf. `block` names the stage or parameter."""

  def __init__(self, message: str, block: str | None = None) -> None:
    super().__init__(message)
    self.block = block


# Specs and construction {{{
@dataclass(frozen=True)
class MlpSpec:
  widths: tuple[int, ...]                 # input, hidden..., output
  activations: tuple[str, ...] | str = "relu"
  output_activation: str = "identity"

  def __post_init__(self) -> None:
    widths = tuple(int(w) for w in self.widths)
    if len(widths) < 3:
      raise ValueError("an MLP needs an input width, at least one hidden layer and an output width")
    if any(w <= 0 for w in widths):
      raise ValueError(f"layer widths must be > 0, got {widths}")
    hidden = len(widths) - 2
    acts = (self.activations,) * hidden if isinstance(self.activations, str) else tuple(self.activations)
    if len(acts) != hidden:
      raise ValueError(f"need {hidden} hidden activations, got {len(acts)}")
    for name in acts:
      if name not in ACTIVATIONS:
        raise ValueError(f"unknown activation '{name}'")
    if self.output_activation not in OUTPUT_ACTIVATIONS:
      raise ValueError(f"unknown output activation '{self.output_activation}'")
    object.__setattr__(self, "widths", widths)
    object.__setattr__(self, "activations", acts)

  @property
  def input_width(self) -> int:
    return self.widths[0]

  @property
  def output_width(self) -> int:
    return self.widths[-1]

  def to_dict(self) -> dict[str, Any]:
    return {"widths": list(self.widths), "activations": list(self.activations),
            "output_activation": self.output_activation}

  @classmethod
  def from_dict(cls, data: dict[str, Any]) -> MlpSpec:
    return cls(tuple(data["widths"]), tuple(data["activations"]), data["output_activation"])

  @classmethod
  def make(cls, input_width: int, hidden: Iterable[int], output_width: int,
           activation: str = "relu", output_activation: str = "identity") -> MlpSpec:
    return cls((input_width, *hidden, output_width), activation, output_activation)


def build_mlp(spec: MlpSpec, dtype: torch.dtype = torch.float32) -> nn.Sequential:
  """Fixed-topology MLP with fan-in scaled uniform initialization."""
  layers: list[nn.Module] = []
  pairs = list(zip(spec.widths[:-1], spec.widths[1:]))
  for i, (fan_in, fan_out) in enumerate(pairs):
    linear = nn.Linear(fan_in, fan_out, dtype=dtype)
    bound = 1.0 / math.sqrt(fan_in)
    nn.init.uniform_(linear.weight, -bound, bound)
    nn.init.uniform_(linear.bias, -bound, bound)
    layers.append(linear)
    if i < len(pairs) - 1:
      layers.append(ACTIVATIONS[spec.activations[i]]())
  if spec.output_activation == "softmax":
    layers.append(nn.Softmax(dim=-1))
  elif spec.output_activation != "identity":
    layers.append(ACTIVATIONS[spec.output_activation]())
  return nn.Sequential(*layers)


class Mlp(nn.Module):
  """An MLP that remembers its spec, so checkpoints can rebuild it."""

  def __init__(self, spec: MlpSpec, dtype: torch.dtype = torch.float32) -> None:
    super().__init__()
    self.spec = spec
    self.body = build_mlp(spec, dtype)

  def forward(self, x: torch.Tensor) -> torch.Tensor:
    return self.body(x)
# }}}


# Forward / gradients / steps {{{
def _dtype_of(net: nn.Module) -> torch.dtype:
  for p in net.parameters():
    return p.dtype
  return torch.get_default_dtype()


def forward(net: Mlp, batch: torch.Tensor | np.ndarray) -> torch.Tensor:
  x = torch.as_tensor(batch, dtype=_dtype_of(net))
  if x.shape[-1] != net.spec.input_width:
    raise ValueError(f"input width {x.shape[-1]} does not match spec width {net.spec.input_width}")
  return net(x)


def check_finite(value: torch.Tensor, block: str) -> torch.Tensor:
  if not torch.isfinite(value).all():
    raise NonFiniteError(f"non-finite values in {block}", block=block)
  return value


def grad(net: nn.Module, loss_fn: Callable[[nn.Module, Any], torch.Tensor],
         batch: Any) -> dict[str, torch.Tensor]:
  """Reverse-mode gradients of loss_fn(net, batch) per named parameter."""
  net.zero_grad(set_to_none=True)
  loss = loss_fn(net, batch)
  if not torch.isfinite(loss.detach()).all():
    for name, p in net.named_parameters():
      check_finite(p.detach(), name)
    raise NonFiniteError("non-finite loss with finite parameters", block="loss")
  if loss.requires_grad:
    loss.backward()
  gradients = {}
  for name, p in net.named_parameters():
    g = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
    check_finite(g, name)
    gradients[name] = g
  return gradients


@dataclass(frozen=True)
class OptimizerConfig:
  lr: float
  clip_norm: float | None = 10.0
  betas: tuple[float, float] = (0.9, 0.999)
  eps: float = 1e-8

  def __post_init__(self) -> None:
    if self.lr < 0:
      raise ValueError(f"learning rate must be >= 0, got {self.lr}")
    if self.clip_norm is not None and self.clip_norm <= 0:
      raise ValueError("clip_norm must be > 0 when set")
    b1, b2 = self.betas
    if not (0 <= b1 < 1 and 0 <= b2 < 1):
      raise ValueError(f"moment coefficients must be in [0, 1), got {self.betas}")


def make_optimizer(net: nn.Module, config: OptimizerConfig) -> torch.optim.Adam:
  return torch.optim.Adam(net.parameters(), lr=config.lr, betas=config.betas, eps=config.eps)


def step(optimizer: torch.optim.Optimizer, net: nn.Module,
         gradient: dict[str, torch.Tensor] | None = None,
         clip_norm: float | None = 10.0) -> nn.Module:
  """Apply one clipped descent step. Uses `gradient` when given, otherwise the .grad fields
  left by a backward pass."""
  if gradient is not None:
    for name, p in net.named_parameters():
      g = gradient[name]
      if g.shape != p.shape:
        raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
      p.grad = g.detach().clone()
  for name, p in net.named_parameters():
    if p.grad is not None:
      check_finite(p.grad, name)
  if clip_norm is not None:
    nn.utils.clip_grad_norm_([p for p in net.parameters() if p.grad is not None], clip_norm)
  optimizer.step()
  return net


def soft_update(target: nn.Module, online: nn.Module, tau: float) -> nn.Module:
  if not 0 <= tau <= 1:
    raise ValueError(f"tau must be in [0, 1], got {tau}")
  with torch.no_grad():
    targets, onlines = list(target.parameters()), list(online.parameters())
    if len(targets) != len(onlines):
      raise ValueError("target and online networks differ in structure")
    for t, o in zip(targets, onlines):
      if t.shape != o.shape:
        raise ValueError(f"shape mismatch {tuple(t.shape)} vs {tuple(o.shape)}")
      t.mul_(1 - tau).add_(o, alpha=tau)
  return target
# }}}


def gradient_check(closure: Callable[[], torch.Tensor], params: Iterable[torch.Tensor],
                   eps: float = 1e-4, max_coords: int = 64, seed: int = 0) -> float:
  """Relative error between autograd and central finite differences.

  `closure` must be deterministic (re-seed any sampling inside it). Coordinates are
  sampled when the parameters have more than `max_coords` entries. Run in float64.

  Returns:
    ||numeric - analytic|| / max(||numeric||, ||analytic||)
  """
  params = [p for p in params if p.requires_grad]
  for p in params:
    p.grad = None
  closure().backward()
  analytic = [torch.zeros_like(p) if p.grad is None else p.grad.detach().clone() for p in params]

  coords = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
  if len(coords) > max_coords:
    picks = np.random.default_rng(seed).choice(len(coords), size=max_coords, replace=False)
    coords = [coords[k] for k in sorted(picks)]

  numeric, exact = [], []
  with torch.no_grad():
    for i, j in coords:
      flat = params[i].view(-1)
      original = flat[j].item()
      flat[j] = original + eps
      plus = closure().item()
      flat[j] = original - eps
      minus = closure().item()
      flat[j] = original
      numeric.append((plus - minus) / (2 * eps))
      exact.append(analytic[i].view(-1)[j].item())
  numeric_v, exact_v = np.array(numeric), np.array(exact)
  scale = max(np.linalg.norm(numeric_v), np.linalg.norm(exact_v))
  if scale < 1e-12:
    return 0.0
  return float(np.linalg.norm(numeric_v - exact_v) / scale)


# Checkpoints {{{
def save_checkpoint(path: Path | str, modules: dict[str, nn.Module],
                    optimizers: dict[str, torch.optim.Optimizer] | None = None,
                    meta: dict[str, Any] | None = None) -> str:
  """Write a versioned bundle and return its SHA-256.

  Layout: {"format", "version", "specs": {name: MlpSpec dicts}, "state_dicts",
  "optimizers", "meta"}.
  """
  path = Path(path)
  path.parent.mkdir(parents=True, exist_ok=True)
  specs = {}
  for name, module in modules.items():
    specs[name] = {sub: m.spec.to_dict() for sub, m in module.named_modules() if isinstance(m, Mlp)}
  bundle = {
    "format": CHECKPOINT_FORMAT,
    "version": CHECKPOINT_VERSION,
    "specs": specs,
    "state_dicts": {name: module.state_dict() for name, module in modules.items()},
    "optimizers": {name: opt.state_dict() for name, opt in (optimizers or {}).items()},
    "meta": meta or {},
  }
  torch.save(bundle, path)
  return file_sha256(path)


def load_checkpoint(path: Path | str, modules: dict[str, nn.Module],
                    optimizers: dict[str, torch.optim.Optimizer] | None = None) -> dict[str, Any]:
  """Load state into already-built modules. Returns the bundle's meta."""
  path = Path(path)
  if not path.exists():
    raise FileNotFoundError(f"checkpoint not found: {path}")
  try:
    bundle = torch.load(path, map_location="cpu", weights_only=True)
  except Exception as e:
    raise RuntimeError(f"unreadable checkpoint {path}: {e}") from e
  if bundle.get("format") != CHECKPOINT_FORMAT or bundle.get("version") != CHECKPOINT_VERSION:
    raise RuntimeError(
      f"checkpoint {path} has format {bundle.get('format')!r} v{bundle.get('version')}, "
      f"expected {CHECKPOINT_FORMAT!r} v{CHECKPOINT_VERSION}"
    )
  for name, module in modules.items():
    if name not in bundle["state_dicts"]:
      raise RuntimeError(f"checkpoint {path} has no module '{name}'")
    module.load_state_dict(bundle["state_dicts"][name])
  for name, opt in (optimizers or {}).items():
    if name in bundle["optimizers"]:
      opt.load_state_dict(bundle["optimizers"][name])
  return bundle["meta"]


def read_checkpoint_meta(path: Path | str) -> dict[str, Any] | None:
  """The meta of a checkpoint, or None when the file is missing or unreadable."""
  try:
    bundle = torch.load(path, map_location="cpu", weights_only=True)
  except (OSError, RuntimeError, EOFError, ValueError, pickle.UnpicklingError):
    return None
  if not isinstance(bundle, dict) or bundle.get("version") != CHECKPOINT_VERSION:
    return None
  return bundle.get("meta")


def file_sha256(path: Path | str) -> str:
  digest = hashlib.sha256()
  with open(path, "rb") as f:
    for chunk in iter(lambda: f.read(1 << 20), b""):
      digest.update(chunk)
  return digest.hexdigest()
# }}}


def as_tensor(value: Any, dtype: torch.dtype = torch.float32) -> torch.Tensor:
  return torch.tensor(np.array(value), dtype=dtype)
