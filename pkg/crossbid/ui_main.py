import argparse
import json
import logging
import sys
from pathlib import Path

from .core_behavior import (
  EventLog, build_bottom_dataset, build_top_dataset, downsample_channel, run_behavior_policy,
)
from .core_eval import POLICIES, evaluate_policy
from .core_export import emit_report, load_reports, save_reports, summary_table
from .core_pipeline import finetune_cycle, train_pipeline
from .core_world import World
from .mem_config import Config
from .mem_logs import dataset_path, save_dataset
from .mem_manifest import latest_manifest, load_manifest
from .mem_recipes import all_recipes, apply_recipes, delete_recipe, save_recipe
from .ui_error import describe_error


logger = logging.getLogger("crossbid")


# Commands {{{
def cmd_gen_logs(args: argparse.Namespace, config: Config) -> int:
  """Simulate behavior logs and write raw events plus train/eval datasets."""
  days = args.days or config.get("logs.days")
  train_days = config.get("logs.train_days")
  out = Path(args.out)
  world = World.from_config(config)
  log = run_behavior_policy(world, config.get("logs.mixture"), args.seed, days,
                            config.get("baselines.pid"), expert_roi=config.get("logs.expert_roi"))
  log.save(out / "raw")
  fmt = config.get("logs.format")
  top = build_top_dataset(log, world)
  bottom = build_bottom_dataset(log, world, config.get("bottom.reward_mode"))
  splits = {
    "top_train": top.select(top["day"] <= train_days),
    "top_eval": top.select(top["day"] > train_days),
    "bottom_train": bottom.select(bottom["day"] <= train_days),
    "bottom_eval": bottom.select(bottom["day"] > train_days),
  }
  starve = config.get("logs.starve_channel")
  if starve is not None:
    splits["bottom_train"] = downsample_channel(splits["bottom_train"], starve,
                                                config.get("logs.starve_ratio"), args.seed)
  for name, ds in splits.items():
    path = save_dataset(ds, dataset_path(out, name, fmt))
    print(f"{name:<13} {len(ds):>8} rows  {path}")
  return 0


def cmd_train(args: argparse.Namespace, config: Config) -> int:
  manifest = train_pipeline(config, args.data, args.out, args.seed)
  print(f"trained {manifest.run_id} {manifest.tag}: " +
        ", ".join(f"{k} {v}s" for k, v in manifest.wall_clock.items()))
  return 0


def _manifest(run: str | None):
  if run is None:
    return None, None
  path = latest_manifest(run)
  if path is None:
    raise FileNotFoundError(f"no manifest in {run}")
  return load_manifest(path), Path(run)


def cmd_evaluate(args: argparse.Namespace, config: Config) -> int:
  manifest, run_dir = _manifest(args.run)
  reports = []
  for policy in args.policy:
    reports += evaluate_policy(config, policy, args.seeds, args.days, manifest, run_dir)
  save_reports(reports, args.out)
  print(summary_table(reports).to_string(index=False, float_format=lambda v: f"{v:.4g}"))
  return 0


def cmd_report(args: argparse.Namespace, config: Config) -> int:
  reports = [r for path in args.reports for r in load_reports(path)]
  written = emit_report(reports, args.out, args.baseline, args.plots)
  print(written["text"].read_text(), end="")
  return 0


def cmd_finetune(args: argparse.Namespace, config: Config) -> int:
  manifest, run_dir = _manifest(args.run)
  world = World.from_config(Config.from_snapshot(manifest.config))
  new_log = EventLog.load(args.logs) if args.logs else None
  result = finetune_cycle(manifest, run_dir, new_log, world)
  print(f"{manifest.tag} -> {result.tag}")
  return 0


def cmd_recipes(args: argparse.Namespace, config: Config) -> int:
  if args.action == "list":
    for name, overrides in sorted(all_recipes().items()):
      print(f"{name:<16} {json.dumps(overrides)}")
  elif args.action == "save":
    save_recipe(args.name, json.loads(args.overrides))
  elif args.action == "delete":
    delete_recipe(args.name)
  return 0
# }}}


# Parser {{{
def build_parser() -> argparse.ArgumentParser:
  common = argparse.ArgumentParser(add_help=False)
  common.add_argument("--config", default=argparse.SUPPRESS, help="config file (default ~/.crossbid/config.json)")
  common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
  common.add_argument("--recipe", action="append", default=argparse.SUPPRESS,
                      help="named override set; repeatable")
  common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

  parser = argparse.ArgumentParser(prog="crossbid", parents=[common],
                                   description="Offline hierarchical multi-channel bidding")
  sub = parser.add_subparsers(dest="command", required=True)

  p = sub.add_parser("gen-logs", parents=[common], help="simulate behavior logs")
  p.add_argument("--days", type=int)
  p.add_argument("--out", required=True)
  p.set_defaults(func=cmd_gen_logs)

  p = sub.add_parser("train", parents=[common], help="train CMCK, bottom and top levels")
  p.add_argument("--data", required=True)
  p.add_argument("--out", required=True)
  p.set_defaults(func=cmd_train)

  p = sub.add_parser("evaluate", parents=[common], help="score policies on held-out days")
  p.add_argument("--policy", nargs="+", choices=POLICIES, default=["hmmcb"])
  p.add_argument("--run", help="trained run directory (needed for hmmcb)")
  p.add_argument("--seeds", type=int, nargs="+")
  p.add_argument("--days", type=int)
  p.add_argument("--out", default="reports.jsonl")
  p.set_defaults(func=cmd_evaluate)

  p = sub.add_parser("report", parents=[common], help="CSV, summary tables and plots")
  p.add_argument("reports", nargs="+")
  p.add_argument("--out", required=True)
  p.add_argument("--baseline", choices=POLICIES)
  p.add_argument("--plots", action="store_true")
  p.set_defaults(func=cmd_report)

  p = sub.add_parser("finetune", parents=[common], help="one fine-tuning cycle on new logs")
  p.add_argument("--run", required=True)
  p.add_argument("--logs", help="raw event log directory written by gen-logs")
  p.set_defaults(func=cmd_finetune)

  p = sub.add_parser("recipes", parents=[common], help="list, save or delete recipes")
  p.add_argument("action", choices=("list", "save", "delete"))
  p.add_argument("name", nargs="?")
  p.add_argument("overrides", nargs="?", default="{}", help="JSON object of dotted keys")
  p.set_defaults(func=cmd_recipes)
  return parser
# }}}


def main(argv: list[str] | None = None) -> int:
  parser = build_parser()
  args = parser.parse_args(argv)
  verbose = getattr(args, "verbose", False)
  args.seed = getattr(args, "seed", 0)
  logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                      format="%(asctime)s %(levelname)s %(name)s: %(message)s")
  logger.debug("command %s", args.command)
  try:
    if args.command == "recipes" and args.action != "list" and not args.name:
      parser.error("recipes save/delete need a name")
    config = Config(getattr(args, "config", None) or Config.default_path())
    config = apply_recipes(config, getattr(args, "recipe", []))
    return args.func(args, config)
  except Exception as e:
    print(describe_error(e).render(verbose), file=sys.stderr)
    return 1


if __name__ == '__main__':
  sys.exit(main())
