"""
Command-line interface for Neuro-Vesicle experiments.

Runs one mode (particle, density, consistency, snn or rl) for one or more
seeds and writes the run outputs to the output directory.
"""

import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import click
from dotenv import load_dotenv
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.progress import Progress, SpinnerColumn, TextColumn

from . import __version__
from .density import consistency_check, run_density
from .models import ExperimentConfig, RunMode
from .parser import ConfigParseError, ConfigParser
from .reports import ReportGenerator, trajectory_summary
from .rl import run_rl
from .simulation import SimulationAbort, run
from .snn import run_snn

console = Console()
logger = logging.getLogger("neuro_vesicles")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_MISSING_CONFIG = 3
EXIT_NUMERICAL_ABORT = 4
EXIT_INVALID_CONFIG = 5

SummaryRows = List[Tuple[str, object]]


def _configure_logging(verbose: bool) -> None:
    package_logger = logging.getLogger("neuro_vesicles")
    package_logger.handlers.clear()
    handler = RichHandler(console=Console(stderr=True), show_path=False, rich_tracebacks=False)
    handler.setFormatter(logging.Formatter("%(message)s"))
    package_logger.addHandler(handler)
    package_logger.setLevel(logging.DEBUG if verbose else logging.INFO)


def execute_run(
    config: ExperimentConfig,
    mode: RunMode,
    seed: int,
    steps: int,
    output_dir: Path,
    emit_plots: bool,
) -> SummaryRows:
    """
    Run one mode for one seed and write its outputs.

    Returns:
        Summary rows for the console table

    Raises:
        SimulationAbort: On non-finite state (particle and rl modes)
    """
    output_dir.mkdir(parents=True, exist_ok=True)
    resolved = config.model_copy(deep=True)
    resolved.run.seed = seed
    resolved.run.steps = steps
    resolved.run.mode = mode
    resolved.run.output_dir = str(output_dir)
    resolved.run.emit_plots = emit_plots
    ConfigParser.save_to_file(resolved, output_dir / "resolved_config.yaml")

    if mode == RunMode.PARTICLE:
        result = run(resolved, seed, steps)
        ReportGenerator.write_metrics(result.trajectory, output_dir / "metrics.csv")
        ReportGenerator.write_events(result.log, output_dir / "events.log")
        if emit_plots:
            ReportGenerator.write_counts(result.trajectory, output_dir / "counts.csv")
        return trajectory_summary(result.trajectory) + [("final digest", result.final_digest[:16])]

    if mode == RunMode.DENSITY:
        density_run = run_density(resolved, seed, steps)
        ReportGenerator.write_density(density_run, output_dir / "density.csv")
        mass = density_run.total_mass[-1] if density_run.total_mass else []
        return [
            ("steps", steps),
            ("final mass per type", ", ".join(f"{value:.6g}" for value in mass)),
            ("clamp events", density_run.clamp_events),
        ]

    if mode == RunMode.CONSISTENCY:
        report = consistency_check(resolved, seed=seed)
        ReportGenerator.write_consistency(report, output_dir / "consistency_report.json")
        return [
            ("horizon", report.horizon),
            ("particle runs", report.n_runs),
            ("max deviation (SE)", f"{report.max_deviation:.4f}"),
            ("argmax (step, node, type)", report.argmax),
        ]

    if mode == RunMode.SNN:
        snn_run = run_snn(resolved, seed, steps)
        ReportGenerator.write_snn(snn_run, output_dir)
        return [
            ("steps", steps),
            ("spikes", len(snn_run.spikes)),
            ("kernel evaluations", snn_run.kernel_evaluations),
            ("plasticity events", sum(1 for row in snn_run.audit if row[3] != 0)),
        ]

    rl_run = run_rl(resolved, seed)
    ReportGenerator.write_returns(rl_run, output_dir / "returns.csv")
    return [
        ("episodes", len(rl_run.returns)),
        ("first return", f"{rl_run.returns[0]:.6g}" if rl_run.returns else "-"),
        ("last return", f"{rl_run.returns[-1]:.6g}" if rl_run.returns else "-"),
    ]


def _sweep_worker(args: Tuple[ExperimentConfig, RunMode, int, int, Path, bool]) -> Tuple[int, int, str]:
    """Run one seed of a sweep in a worker process; returns (seed, exit code, message)."""
    config, mode, seed, steps, output_dir, emit_plots = args
    try:
        execute_run(config, mode, seed, steps, output_dir, emit_plots)
        return seed, EXIT_OK, ""
    except SimulationAbort as e:
        return seed, EXIT_NUMERICAL_ABORT, str(e)
    except Exception as e:  # noqa: BLE001
        return seed, EXIT_FAILURE, str(e)


def _sweep_workers() -> int:
    try:
        return max(1, int(os.environ.get("NV_THREADS", "1")))
    except ValueError:
        logger.warning("Ignoring non-integer NV_THREADS=%r", os.environ.get("NV_THREADS"))
        return 1


@click.command(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(version=__version__, prog_name="neuro-vesicles")
@click.option("--config", "config_path", required=True, type=click.Path(path_type=Path), help="Experiment YAML file")
@click.option(
    "--mode",
    type=click.Choice([mode.value for mode in RunMode], case_sensitive=False),
    default=None,
    help="Simulation mode (defaults to run.mode)",
)
@click.option("--seed", "seeds", type=click.IntRange(min=0), multiple=True, help="Run seed; repeat for a sweep")
@click.option("--steps", type=click.IntRange(min=0), default=None, help="Number of steps (defaults to run.steps)")
@click.option("--out", "out_dir", type=click.Path(path_type=Path), default=None, help="Output directory")
@click.option("--emit-plots", is_flag=True, default=False, help="Also write per-step plot tables")
@click.option("--verbose", "-v", is_flag=True, help="Debug logging")
def main(
    config_path: Path,
    mode: Optional[str],
    seeds: Sequence[int],
    steps: Optional[int],
    out_dir: Optional[Path],
    emit_plots: bool,
    verbose: bool,
):
    """
    Neuro-Vesicle simulation engine.

    Runs the selected mode from an experiment configuration and writes
    deterministic outputs for every seed.
    """
    load_dotenv()
    _configure_logging(verbose)

    try:
        config = ConfigParser.load_from_file(config_path)
    except FileNotFoundError as e:
        console.print(f"[X] [bold red]Missing configuration:[/bold red] {e}")
        sys.exit(EXIT_MISSING_CONFIG)
    except ConfigParseError as e:
        console.print(f"[X] [bold red]Invalid configuration:[/bold red] {e}")
        sys.exit(EXIT_INVALID_CONFIG)

    run_mode = RunMode(mode.lower()) if mode else config.run.mode
    run_steps = steps if steps is not None else config.run.steps
    output_root = out_dir if out_dir is not None else Path(config.run.output_dir)
    plots = emit_plots or config.run.emit_plots
    seed_list = list(seeds) if seeds else [config.run.seed]
    logger.info("Mode %s, steps %d, seeds %s", run_mode.value, run_steps, seed_list)

    if len(seed_list) == 1:
        seed = seed_list[0]
        try:
            with Progress(
                SpinnerColumn(),
                TextColumn("[progress.description]{task.description}"),
                console=console,
                transient=True,
            ) as progress:
                progress.add_task(f"Running {run_mode.value} (seed {seed})...", total=None)
                rows = execute_run(config, run_mode, seed, run_steps, output_root, plots)
        except SimulationAbort as e:
            logger.error("Numerical abort at step %d", e.step)
            console.print(f"[X] [bold red]Simulation aborted:[/bold red] {e}")
            sys.exit(EXIT_NUMERICAL_ABORT)
        except Exception as e:
            console.print(f"[X] [bold red]Run failed:[/bold red] {e}")
            sys.exit(EXIT_FAILURE)
        console.print(Panel(f"Outputs written to {output_root}", title=f"neuro-vesicles {run_mode.value}"))
        console.print(ReportGenerator.generate_summary_table(rows))
        sys.exit(EXIT_OK)

    jobs = [(config, run_mode, seed, run_steps, output_root / f"seed_{seed}", plots) for seed in seed_list]
    workers = min(_sweep_workers(), len(jobs))
    logger.info("Sweep over %d seeds with %d worker(s)", len(jobs), workers)
    if workers == 1:
        outcomes = [_sweep_worker(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_sweep_worker, jobs))

    failures = [(seed, code, message) for seed, code, message in outcomes if code != EXIT_OK]
    rows: SummaryRows = [(f"seed {seed}", "ok" if code == EXIT_OK else f"exit {code}") for seed, code, _ in outcomes]
    console.print(ReportGenerator.generate_summary_table(rows))
    for seed, _, message in failures:
        console.print(f"[X] [bold red]Seed {seed} failed:[/bold red] {message}")
    sys.exit(max((code for _, code, _ in failures), default=EXIT_OK))


def entrypoint(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run the CLI and return its exit code instead of exiting.

    Args:
        argv: Arguments without the program name (sys.argv[1:] when None)
    """
    try:
        main.main(args=list(argv) if argv is not None else None, prog_name="neuro-vesicles", standalone_mode=True)
    except SystemExit as e:
        if e.code is None:
            return EXIT_OK
        return e.code if isinstance(e.code, int) else EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    main()
