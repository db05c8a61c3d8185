"""
Output writers for simulation runs.

Every table is built as a pandas DataFrame with a fixed column order and
written with `to_csv`; outputs contain no timestamps so that identical
(config, seed) pairs give identical bytes.
"""

import json
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import pandas as pd
from tabulate import tabulate

from .density import ConsistencyReport, DensityRun
from .rl import RlRun
from .simulation import EventLog, StepReport
from .snn import SnnRun

METRICS_COLUMNS = ["step", "loss_pre", "loss_post", "n_vesicles", "emissions", "docks", "removals", "per_node_counts"]
DENSITY_COLUMNS = ["step", "node", "type", "rho", "content_norm"]
COUNT_COLUMNS = ["step", "node", "count"]
SPIKE_COLUMNS = ["time", "neuron"]
WEIGHT_COLUMNS = ["time", "pre", "post", "weight"]
AUDIT_COLUMNS = ["time", "pre", "post", "delta_w", "vesicle_present"]
RETURN_COLUMNS = ["episode", "return", "baseline"]

PathLike = Union[str, Path]


def _write_frame(frame: pd.DataFrame, file_path: PathLike) -> str:
    path = Path(file_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    return str(path)


class ReportGenerator:
    """
    Writes run outputs in the documented schema.
    """

    @staticmethod
    def metrics_frame(trajectory: Sequence[StepReport]) -> pd.DataFrame:
        """One row per step; `per_node_counts` is a `;`-joined list."""
        return pd.DataFrame([report.as_row() for report in trajectory], columns=METRICS_COLUMNS)

    @staticmethod
    def write_metrics(trajectory: Sequence[StepReport], file_path: PathLike) -> str:
        return _write_frame(ReportGenerator.metrics_frame(trajectory), file_path)

    @staticmethod
    def write_events(log: EventLog, file_path: PathLike) -> str:
        """Event log as newline-delimited JSON."""
        path = Path(file_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(log.to_ndjson(), encoding="utf-8")
        return str(path)

    @staticmethod
    def counts_frame(trajectory: Sequence[StepReport]) -> pd.DataFrame:
        """Long-format vesicle counts per (step, node) for external plotting."""
        rows = [
            {"step": report.step, "node": node, "count": count}
            for report in trajectory
            for node, count in enumerate(report.per_node_counts)
        ]
        return pd.DataFrame(rows, columns=COUNT_COLUMNS)

    @staticmethod
    def write_counts(trajectory: Sequence[StepReport], file_path: PathLike) -> str:
        return _write_frame(ReportGenerator.counts_frame(trajectory), file_path)

    @staticmethod
    def write_density(run: DensityRun, file_path: PathLike) -> str:
        return _write_frame(pd.DataFrame(run.rows, columns=DENSITY_COLUMNS), file_path)

    @staticmethod
    def write_consistency(report: ConsistencyReport, file_path: PathLike) -> str:
        """Consistency report as indented JSON with sorted keys."""
        path = Path(file_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return str(path)

    @staticmethod
    def write_snn(run: SnnRun, output_dir: PathLike) -> Dict[str, str]:
        """Spike raster, weight trajectories and the plasticity audit."""
        out = Path(output_dir)
        return {
            "spikes": _write_frame(pd.DataFrame(run.spikes, columns=SPIKE_COLUMNS), out / "spikes.csv"),
            "weights": _write_frame(pd.DataFrame(run.weights, columns=WEIGHT_COLUMNS), out / "weights.csv"),
            "audit": _write_frame(pd.DataFrame(run.audit, columns=AUDIT_COLUMNS), out / "plasticity_audit.csv"),
        }

    @staticmethod
    def write_returns(run: RlRun, file_path: PathLike) -> str:
        rows = [
            {"episode": episode, "return": ret, "baseline": base}
            for episode, (ret, base) in enumerate(zip(run.returns, run.baselines))
        ]
        return _write_frame(pd.DataFrame(rows, columns=RETURN_COLUMNS), file_path)

    @staticmethod
    def generate_summary_table(rows: List[Tuple[str, object]]) -> str:
        """Two-column grid of run statistics for the console."""
        if not rows:
            return "Nothing to summarize."
        return tabulate(rows, headers=["Metric", "Value"], tablefmt="grid")


def trajectory_summary(trajectory: Sequence[StepReport]) -> List[Tuple[str, object]]:
    """Headline statistics of a particle run."""
    if not trajectory:
        return [("steps", 0)]
    frame = ReportGenerator.metrics_frame(trajectory)
    return [
        ("steps", len(frame)),
        ("final loss (pre)", f"{frame['loss_pre'].iloc[-1]:.6g}"),
        ("final loss (post)", f"{frame['loss_post'].iloc[-1]:.6g}"),
        ("total emissions", int(frame["emissions"].sum())),
        ("total docks", int(frame["docks"].sum())),
        ("total removals", int(frame["removals"].sum())),
        ("final vesicles", int(frame["n_vesicles"].iloc[-1])),
        ("peak vesicles", int(frame["n_vesicles"].max())),
    ]
