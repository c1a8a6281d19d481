"""Experiment orchestration: configuration, the run matrix, plots, comparisons and the CLI."""
from .compare import ReportMismatchError, compare_files, compare_reports, fmt_delta, reports_from_csv
from .config import ExperimentConfig, desk_config
from .plots import ReportSchemaError, emit_plots
from .runner import Cell, ExperimentRunner, enumerate_cells, mean_over_repeats, read_merged


def run_experiment(config, out_dir, cells=None) -> bool:
    """Run ``config`` into ``out_dir``; ``True`` when every cell succeeded."""
    return ExperimentRunner(config, out_dir).run(cells)


__all__ = [
    "Cell", "ExperimentConfig", "ExperimentRunner", "ReportMismatchError", "ReportSchemaError",
    "compare_files", "compare_reports", "desk_config", "emit_plots", "enumerate_cells",
    "fmt_delta", "mean_over_repeats", "read_merged", "reports_from_csv", "run_experiment",
]
