"""
Test cases for output writers and summaries.
"""

import json

import numpy as np
import pandas as pd

from neuro_vesicles.density import ConsistencyReport
from neuro_vesicles.reports import METRICS_COLUMNS, ReportGenerator, trajectory_summary
from neuro_vesicles.rl import PolicyParams, RlRun
from neuro_vesicles.simulation import StepReport


def create_trajectory():
    return [
        StepReport(0, 1.0, 1.0, 2, 2, 0, 0, [2, 0, 0]),
        StepReport(1, 0.8, 0.7, 1, 0, 1, 1, [0, 1, 0]),
    ]


class TestReportGenerator:
    """Test cases for the ReportGenerator class."""

    def test_metrics_frame(self):
        """Test metrics rows keep column order and join per-node counts."""
        frame = ReportGenerator.metrics_frame(create_trajectory())

        assert list(frame.columns) == METRICS_COLUMNS
        assert frame["per_node_counts"].tolist() == ["2;0;0", "0;1;0"]

    def test_metrics_file_uses_unix_newlines(self, tmp_path):
        """Test the written metrics file has no carriage returns."""
        path = ReportGenerator.write_metrics(create_trajectory(), tmp_path / "nested" / "metrics.csv")
        data = (tmp_path / "nested" / "metrics.csv").read_bytes()

        assert path.endswith("metrics.csv")
        assert b"\r" not in data
        assert data.count(b"\n") == 3

    def test_counts_frame(self):
        """Test long-format counts cover every (step, node)."""
        frame = ReportGenerator.counts_frame(create_trajectory())

        assert len(frame) == 6
        assert frame.loc[(frame["step"] == 1) & (frame["node"] == 1), "count"].item() == 1

    def test_consistency_json(self, tmp_path):
        """Test the consistency report is sorted, indented JSON."""
        report = ConsistencyReport(
            max_deviation=1.25,
            argmax=(3, 1, 0),
            horizon=5,
            n_runs=100,
            deviations=np.zeros((5, 3, 1)),
            density=np.zeros((5, 3, 1)),
            particle_mean=np.zeros((5, 3, 1)),
        )
        ReportGenerator.write_consistency(report, tmp_path / "consistency_report.json")
        data = json.loads((tmp_path / "consistency_report.json").read_text())

        assert data["argmax"] == {"step": 3, "node": 1, "type": 0}
        assert data["max_deviation"] == 1.25
        assert list(data) == sorted(data)

    def test_returns(self, tmp_path):
        """Test returns pair each episode with its baseline."""
        policy = PolicyParams.initialize(2, 2, 1, 1, seed=0)
        ReportGenerator.write_returns(RlRun([-1.0, -0.5], [0.0, -0.01], policy), tmp_path / "returns.csv")
        frame = pd.read_csv(tmp_path / "returns.csv")

        assert frame.to_dict("list") == {"episode": [0, 1], "return": [-1.0, -0.5], "baseline": [0.0, -0.01]}

    def test_summary_table(self):
        """Test the summary grid and its empty fallback."""
        table = ReportGenerator.generate_summary_table([("steps", 2)])

        assert "Metric" in table
        assert "steps" in table
        assert ReportGenerator.generate_summary_table([]) == "Nothing to summarize."


class TestTrajectorySummary:
    """Test cases for particle-run headline statistics."""

    def test_totals(self):
        """Test totals and peaks over the trajectory."""
        summary = dict(trajectory_summary(create_trajectory()))

        assert summary["total emissions"] == 2
        assert summary["total docks"] == 1
        assert summary["final vesicles"] == 1
        assert summary["peak vesicles"] == 2
        assert summary["final loss (post)"] == "0.7"

    def test_empty(self):
        """Test an empty run reports zero steps."""
        assert trajectory_summary([]) == [("steps", 0)]
