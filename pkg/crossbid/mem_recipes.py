import json
import logging
from pathlib import Path
from typing import Any

from .mem_config import CONFIG_DIR, Config


logger = logging.getLogger(__name__)

RECIPES_FILE = CONFIG_DIR / "recipes.json"

# Named override sets. Ablations switch off one component of the full model.
BUILTIN_RECIPES: dict[str, dict[str, Any]] = {
  "no-cpc": {"top.cpc_weight": 0.0},
  "no-diffusion": {"top.use_diffusion": False},
  "no-cmck": {"cmck.enabled": False},
  "no-central": {"bottom.central": False},
  "starved": {"logs.starve_channel": 0, "logs.starve_ratio": 0.02},
  "literal-reward": {"bottom.reward_mode": "literal"},
  "cmck-com": {"cmck.policy_encoder": "com"},
  "cmck-both": {"cmck.policy_encoder": "both"},
  "desk": {
    "world.advertisers": 6,
    "world.requests_per_day": 300,
    "logs.days": 14,
    "logs.train_days": 7,
    "nn.policy_hidden": [32, 32],
    "nn.encoder_hidden": [32, 32],
    "top.batch": 64,
    "top.epochs": 2,
    "top.lr": 1e-3,
    "bottom.batch": 128,
    "bottom.epochs": 1,
    "bottom.lr": 1e-3,
    "cmck.steps": 20,
    "cmck.window": 16,
    "eval.days": 2,
    "eval.warmup_days": 1,
    "eval.seeds": [0, 1],
  },
}


# Load / Save {{{
def load_recipes(path: Path | None = None) -> dict[str, dict[str, Any]]:
  """User recipes from file. Returns empty dict on missing/corrupted file."""
  path = path or RECIPES_FILE
  if not path.exists():
    return {}
  try:
    with open(path, 'r') as f:
      data = json.load(f)
    return data.get("recipes", {})
  except (json.JSONDecodeError, ValueError, KeyError, AttributeError):
    logger.warning("Ignoring unreadable recipe file %s", path)
    return {}


def save_recipes(recipes: dict[str, dict[str, Any]], path: Path | None = None) -> None:
  path = path or RECIPES_FILE
  path.parent.mkdir(parents=True, exist_ok=True)
  with open(path, 'w') as f:
    json.dump({"recipes": recipes}, f, indent=2)


def save_recipe(name: str, overrides: dict[str, Any], path: Path | None = None) -> None:
  """Save or overwrite a single user recipe. Keys are validated against the defaults."""
  if name in BUILTIN_RECIPES:
    raise ValueError(f"'{name}' is a built-in recipe")
  Config().derive(overrides)
  recipes = load_recipes(path)
  recipes[name] = overrides
  save_recipes(recipes, path)


def delete_recipe(name: str, path: Path | None = None) -> None:
  """Delete a user recipe by name. No-op if it doesn't exist."""
  recipes = load_recipes(path)
  recipes.pop(name, None)
  save_recipes(recipes, path)
# }}}


def all_recipes(path: Path | None = None) -> dict[str, dict[str, Any]]:
  return {**BUILTIN_RECIPES, **load_recipes(path)}


def apply_recipes(config: Config, names: list[str], path: Path | None = None) -> Config:
  """Copy of `config` with the named recipes applied left to right."""
  known = all_recipes(path)
  for name in names:
    if name not in known:
      raise KeyError(f"Unknown recipe '{name}' (known: {', '.join(sorted(known))})")
    config = config.derive(known[name])
  return config
