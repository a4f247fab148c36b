import copy
import hashlib
import json
import logging
from pathlib import Path
from typing import Any


logger = logging.getLogger(__name__)

CONFIG_DIR = Path.home() / ".crossbid"


class Config: # {{{
  """Manages configuration for crossbid, stored in ~/.crossbid/config.json.

  Keys are addressed with dotted names ("top.alpha"). A user file only needs the keys it
  overrides; everything else falls back to DEFAULTS. Built without a path, a Config lives
  in memory and never touches the disk.
  """

  DEFAULTS: dict[str, Any] = {
    "world": {
      "seed": 7,
      "advertisers": 20,
      "channels": ["feed", "search", "brand", "recommendation"],
      "channel_share": [0.35, 0.30, 0.10, 0.25],
      "base_ctr": [0.06, 0.10, 0.04, 0.05],
      "base_cvr": [0.20, 0.30, 0.35, 0.15],
      "floor_price": [0.15, 0.35, 0.25, 0.10],
      "requests_per_day": 2000,
      "ticks_per_day": 24,
      "episode_days": 7,
      "feature_dim": 4,
      "max_candidates": 4,
      "reserve": 0.1,
      "bid_ratio_bounds": [0.5, 1.5],
      "billing": "click",
      "feedback_seed": 11,
    },
    "logs": {
      "days": 35,
      "train_days": 28,
      "mixture": {"expert": 0.4, "medium": 0.4, "random": 0.2},
      "expert_roi": 1.0,
      "format": "npz",
      "starve_channel": None,
      "starve_ratio": 0.02,
    },
    "nn": {
      "policy_hidden": [256, 256],
      "encoder_hidden": [128, 128],
      "activation": "relu",
      "betas": [0.9, 0.999],
      "clip_norm": 10.0,
    },
    "top": {
      "alpha": 1.0,
      "cpc_weight": 1.0,
      "diffusion_steps": 5,
      "schedule": "vp",
      "beta_min": 1e-4,
      "beta_max": 0.2,
      "grid_step": 0.05,
      "batch": 7084,
      "lr": 1e-5,
      "gamma": 0.99,
      "epochs": 25,
      "tau": 0.005,
      "use_diffusion": True,
    },
    "bottom": {
      "expectile": 0.7,
      "lambda": 1.0,
      "batch": 1024,
      "lr": 1e-5,
      "gamma": 0.99,
      "epochs": 8,
      "tau": 0.005,
      "reward_mode": "hinge",
      "state_sigma": 0.1,
      "central": True,
    },
    "cmck": {
      "enabled": True,
      "eta": 1.0,
      "latent_dim": 16,
      "window": 64,
      "batch": 2048,
      "lr": 2e-4,
      "steps": 400,
      "policy_encoder": "spec",
      "normalize_latents": True,
    },
    "baselines": {
      "pid": {"kp": 0.4, "ki": 0.05, "kd": 0.1, "integral_limit": 2.0},
      "cem": {"population": 20, "elite_fraction": 0.2, "iterations": 5,
              "sigma": 0.3, "sigma_floor": 0.01, "penalty": 50.0},
    },
    "eval": {
      "days": 7,
      "warmup_days": 7,
      "seeds": [0, 1, 2, 3, 4],
    },
    "finetune": {
      "epochs_fraction": 0.2,
    },
  }

  # Sections whose values define the simulated market; their hash ties datasets,
  # checkpoints and reports to one world.
  WORLD_SECTIONS = ("world",)

  def __init__(self, path: Path | str | None = None,
               overrides: dict[str, Any] | None = None) -> None:
    self._config_file = Path(path).expanduser() if path is not None else None
    self._data: dict[str, Any] = copy.deepcopy(self.DEFAULTS)
    if self._config_file is not None:
      self._load()
    if overrides:
      self.update(overrides)

  @classmethod
  def default_path(cls) -> Path:
    return CONFIG_DIR / "config.json"

  # Persistence {{{
  def _load(self) -> None:
    """Load config from file, falling back to defaults if missing or corrupted."""
    assert self._config_file is not None
    if self._config_file.exists():
      try:
        with open(self._config_file, 'r') as f:
          user = json.load(f)
        self._data = _deep_merge(self._data, user)
        return
      except (json.JSONDecodeError, ValueError) as e:
        logger.warning("Ignoring unreadable config %s: %s", self._config_file, e)
    self._save()

  def _save(self) -> None:
    """Save config to file."""
    if self._config_file is None:
      return
    self._config_file.parent.mkdir(parents=True, exist_ok=True)
    with open(self._config_file, 'w') as f:
      json.dump(self._data, f, indent=2)
  # }}}

  # Getters / Setters {{{
  def get(self, key: str) -> Any:
    node: Any = self._data
    for part in key.split("."):
      if not isinstance(node, dict) or part not in node:
        raise KeyError(f"Unknown config key '{key}'")
      node = node[part]
    return copy.deepcopy(node)

  def set(self, key: str, value: Any, persist: bool = False) -> None:
    self.get(key)
    *parents, leaf = key.split(".")
    node = self._data
    for part in parents:
      node = node[part]
    node[leaf] = value
    if persist:
      self._save()

  def update(self, overrides: dict[str, Any]) -> None:
    """Apply dotted-key overrides, e.g. {"top.cpc_weight": 0.0}."""
    for key, value in overrides.items():
      self.set(key, value)

  def section(self, name: str) -> dict[str, Any]:
    return self.get(name)

  def snapshot(self) -> dict[str, Any]:
    return copy.deepcopy(self._data)

  @classmethod
  def from_snapshot(cls, data: dict[str, Any]) -> "Config":
    """In-memory config rebuilt from snapshot(), e.g. the one a run manifest stores."""
    config = cls()
    config._data = _deep_merge(config._data, data)
    return config

  def derive(self, overrides: dict[str, Any]) -> "Config":
    """Return an in-memory copy with overrides applied."""
    other = Config()
    other._data = self.snapshot()
    other.update(overrides)
    return other

  def hash(self, sections: tuple[str, ...] | None = None) -> str:
    """SHA-256 of the canonical JSON of the given sections (all when None)."""
    names = sections if sections is not None else tuple(sorted(self._data))
    payload = {name: self._data[name] for name in names}
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()

  def world_hash(self) -> str:
    return self.hash(self.WORLD_SECTIONS)
  # }}}
# }}}


def _deep_merge(base: dict, user: dict, prefix: str = "") -> dict:
  merged = copy.deepcopy(base)
  for key, value in user.items():
    dotted = f"{prefix}{key}"
    if key not in merged:
      raise KeyError(f"Unknown config key '{dotted}'")
    if isinstance(merged[key], dict) and isinstance(value, dict) and not dotted.endswith("mixture"):
      merged[key] = _deep_merge(merged[key], value, prefix=f"{dotted}.")
    else:
      merged[key] = value
  return merged
