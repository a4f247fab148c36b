from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Sequence

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from scipy import stats

from .core_eval import METRICS, MetricsReport, normalized_improvement


logger = logging.getLogger(__name__)

# Versioned CSV contract of per-run report rows.
REPORT_SCHEMA = 1
REPORT_COLUMNS = [
  "policy", "version", "seed", "config_hash", "days", "impressions", "clicks", "conversions",
  "cost", "revenue", "cpc", "roi", "violation_rate",
]
SUMMARY_METRICS = ("impressions", "clicks", "cpc", "roi", "violation_rate")


def _sorted(reports: Sequence[MetricsReport]) -> list[MetricsReport]:
  return sorted(reports, key=lambda r: (r.policy, r.version, r.seed))


def report_frame(reports: Sequence[MetricsReport]) -> pd.DataFrame:
  rows = [{c: getattr(r, c) for c in REPORT_COLUMNS} for r in _sorted(reports)]
  return pd.DataFrame(rows, columns=REPORT_COLUMNS)


# CSV Export {{{
def export_csv(reports: Sequence[MetricsReport], filepath: Path | str) -> int:
  """Export per-run metrics to a CSV file.
  Args:
    reports: one entry per (policy, seed); written sorted by (policy, version, seed)
    filepath: path to write the CSV to
  Returns:
    number of rows written (an empty run set writes the header only)
  """
  frame = report_frame(reports)
  frame.to_csv(filepath, index=False)
  return len(frame)


def export_channels_csv(reports: Sequence[MetricsReport], filepath: Path | str) -> int:
  rows = []
  for r in _sorted(reports):
    for c in r.channels:
      rows.append({"policy": r.policy, "version": r.version, "seed": r.seed, **c.__dict__})
  frame = pd.DataFrame(rows, columns=["policy", "version", "seed", "channel", "impressions",
                                      "clicks", "cost", "revenue", "cpc", "roi"])
  frame.to_csv(filepath, index=False)
  return len(frame)
# }}}


# Tables {{{
def summary_table(reports: Sequence[MetricsReport]) -> pd.DataFrame:
  """Per policy: mean and standard error over seeds of each summary metric."""
  frame = report_frame(reports)
  if frame.empty:
    return pd.DataFrame(columns=["policy", "seeds"] + [f"{m}_{s}" for m in SUMMARY_METRICS
                                                      for s in ("mean", "sem")])
  frame["label"] = frame["policy"] + np.where(frame["version"] != "", "@" + frame["version"], "")
  rows = []
  for label, group in frame.groupby("label", sort=True):
    row = {"policy": label, "seeds": len(group)}
    for m in SUMMARY_METRICS:
      values = pd.to_numeric(group[m], errors="coerce").dropna().to_numpy(dtype=float)
      row[f"{m}_mean"] = float(values.mean()) if len(values) else np.nan
      row[f"{m}_sem"] = float(stats.sem(values)) if len(values) > 1 else np.nan
    rows.append(row)
  return pd.DataFrame(rows)


def delta_table(reports: Sequence[MetricsReport], baseline: str) -> pd.DataFrame:
  """Mean percentage change of each policy against `baseline`, paired by seed."""
  base = {r.seed: r for r in reports if r.policy == baseline}
  if not base:
    raise ValueError(f"no reports for baseline policy '{baseline}'")
  rows = []
  for r in _sorted(reports):
    if r.policy == baseline or r.seed not in base:
      continue
    rows.append({"policy": r.policy, "version": r.version, "seed": r.seed,
                 **normalized_improvement(r, base[r.seed])})
  frame = pd.DataFrame(rows, columns=["policy", "version", "seed", *METRICS])
  if frame.empty:
    return frame
  return frame.groupby(["policy", "version"], sort=True)[list(METRICS)].mean().reset_index()
# }}}


# Persistence {{{
def save_reports(reports: Sequence[MetricsReport], path: Path | str) -> Path:
  """Append reports as JSON lines."""
  path = Path(path)
  path.parent.mkdir(parents=True, exist_ok=True)
  with open(path, 'a') as f:
    for r in reports:
      f.write(json.dumps(r.to_dict()) + "\n")
  return path


def load_reports(path: Path | str) -> list[MetricsReport]:
  path = Path(path)
  reports = []
  with open(path, 'r') as f:
    for n, line in enumerate(f, start=1):
      if line.strip():
        try:
          reports.append(MetricsReport.from_dict(json.loads(line)))
        except (json.JSONDecodeError, TypeError) as e:
          raise ValueError(f"{path}:{n}: malformed report record") from e
  return reports
# }}}


def plot_summary(summary: pd.DataFrame, filepath: Path | str) -> Path:
  """Bar charts of mean clicks, CPC and ROI per policy with standard-error bars."""
  filepath = Path(filepath)
  panels = ("clicks", "cpc", "roi")
  fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 3.5))
  for ax, metric in zip(axes, panels):
    x = np.arange(len(summary))
    ax.bar(x, summary[f"{metric}_mean"], yerr=summary[f"{metric}_sem"].fillna(0.0), capsize=3)
    ax.set_xticks(x)
    ax.set_xticklabels(summary["policy"], rotation=30, ha="right")
    ax.set_title(metric.upper())
  fig.tight_layout()
  fig.savefig(filepath, dpi=120)
  plt.close(fig)
  return filepath


def emit_report(reports: Sequence[MetricsReport], out_dir: Path | str,
                baseline: str | None = None, plots: bool = False) -> dict[str, Path]:
  """Write report.csv, channels.csv, summary.csv/.txt and, when asked, deltas.csv and
  summary.png into out_dir."""
  out_dir = Path(out_dir)
  try:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {"report": out_dir / "report.csv", "channels": out_dir / "channels.csv",
               "summary": out_dir / "summary.csv", "text": out_dir / "summary.txt"}
    export_csv(reports, written["report"])
    export_channels_csv(reports, written["channels"])
    summary = summary_table(reports)
    summary.to_csv(written["summary"], index=False)
    lines = [f"# crossbid report (schema {REPORT_SCHEMA}), {len(reports)} runs",
             summary.to_string(index=False, float_format=lambda v: f"{v:.4g}")]
    if baseline is not None:
      deltas = delta_table(reports, baseline)
      written["deltas"] = out_dir / "deltas.csv"
      deltas.to_csv(written["deltas"], index=False)
      lines += ["", f"# change vs {baseline} (%)",
                deltas.to_string(index=False, float_format=lambda v: f"{v:+.2f}")]
    written["text"].write_text("\n".join(lines) + "\n")
    if plots and not summary.empty:
      written["plot"] = plot_summary(summary, out_dir / "summary.png")
  except OSError as e:
    raise RuntimeError(f"cannot write report to {out_dir}: {e}") from e
  logger.info("report written to %s", out_dir)
  return written
