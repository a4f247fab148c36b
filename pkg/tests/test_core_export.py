import numpy as np
import pandas as pd
import pytest

from crossbid.core_eval import ChannelMetrics, MetricsReport, safe_ratio
from crossbid.core_export import (
  REPORT_COLUMNS, delta_table, emit_report, export_channels_csv, export_csv, load_reports,
  save_reports, summary_table,
)


def _report(policy, seed, clicks, cost=200.0, revenue=400.0, version=""):
  channels = [ChannelMetrics(0, 600, clicks // 2, cost / 2, revenue / 2,
                             safe_ratio(cost / 2, clicks // 2), safe_ratio(revenue / 2, cost / 2)),
              ChannelMetrics(1, 400, clicks - clicks // 2, cost / 2, revenue / 2,
                             safe_ratio(cost / 2, clicks - clicks // 2), safe_ratio(revenue / 2, cost / 2))]
  return MetricsReport(policy=policy, seed=seed, config_hash="h", days=7, impressions=1000,
                       clicks=clicks, conversions=clicks // 5, cost=cost, revenue=revenue,
                       cpc=safe_ratio(cost, clicks), roi=safe_ratio(revenue, cost),
                       violation_rate=0.25, channels=channels, version=version)


REPORTS = [
  _report("pid", 1, 20),
  _report("hmmcb", 0, 120, version="v0"),
  _report("pid", 0, 10),
  _report("hmmcb", 1, 110, version="v0"),
]


def test_export_empty_writes_header_only(tmp_path):
  path = tmp_path / "report.csv"
  assert export_csv([], path) == 0
  assert path.read_text().strip() == ",".join(REPORT_COLUMNS)


def test_export_rows_sorted(tmp_path):
  path = tmp_path / "report.csv"
  assert export_csv(REPORTS, path) == 4
  frame = pd.read_csv(path, keep_default_na=False)
  assert list(frame["policy"]) == ["hmmcb", "hmmcb", "pid", "pid"]
  assert list(frame["seed"]) == [0, 1, 0, 1]
  assert list(frame.columns) == REPORT_COLUMNS


def test_export_channels(tmp_path):
  path = tmp_path / "channels.csv"
  assert export_channels_csv(REPORTS, path) == 8
  frame = pd.read_csv(path)
  assert frame.groupby(["policy", "seed"])["clicks"].sum().loc[("pid", 1)] == 20


def test_summary_table():
  summary = summary_table(REPORTS).set_index("policy")
  assert list(summary.index) == ["hmmcb@v0", "pid"]
  assert summary.loc["pid", "seeds"] == 2
  assert summary.loc["pid", "clicks_mean"] == pytest.approx(15.0)
  assert summary.loc["pid", "clicks_sem"] == pytest.approx(5.0)
  assert summary_table([]).empty


def test_single_seed_has_no_standard_error():
  summary = summary_table([_report("pid", 0, 10)])
  assert np.isnan(summary.loc[0, "clicks_sem"])


def test_delta_table():
  deltas = delta_table(REPORTS, "pid")
  assert len(deltas) == 1
  row = deltas.iloc[0]
  assert row["policy"] == "hmmcb"
  # paired by seed: +1100% on seed 0, +450% on seed 1
  assert row["clicks"] == pytest.approx((1100.0 + 450.0) / 2)
  assert row["cost"] == pytest.approx(0.0)
  with pytest.raises(ValueError):
    delta_table(REPORTS, "cem")


def test_save_and_load_reports(tmp_path):
  path = tmp_path / "runs" / "reports.jsonl"
  save_reports(REPORTS[:2], path)
  save_reports(REPORTS[2:], path)
  assert load_reports(path) == REPORTS


def test_load_reports_names_bad_line(tmp_path):
  path = tmp_path / "reports.jsonl"
  save_reports(REPORTS[:1], path)
  with open(path, 'a') as f:
    f.write("{broken\n")
  with pytest.raises(ValueError, match=":2:"):
    load_reports(path)


def test_emit_report(tmp_path):
  written = emit_report(REPORTS, tmp_path / "out", baseline="pid", plots=True)
  for key in ("report", "channels", "summary", "text", "deltas", "plot"):
    assert written[key].exists()
  text = written["text"].read_text()
  assert "4 runs" in text
  assert "change vs pid" in text


def test_emit_report_without_runs(tmp_path):
  written = emit_report([], tmp_path / "out", plots=True)
  assert "plot" not in written
  assert written["report"].read_text().strip() == ",".join(REPORT_COLUMNS)


def test_emit_report_unwritable(tmp_path):
  blocker = tmp_path / "file"
  blocker.write_text("")
  with pytest.raises(RuntimeError, match="cannot write report"):
    emit_report(REPORTS, blocker / "out")
