from .config import ConfigError, ExperimentConfig, expand_grid, load_document, parse_overrides
from .report import ReportError, compare, compare_dir, emit_plot_data
from .runner import load_records, run, run_seed

__all__ = ["ConfigError", "ExperimentConfig", "ReportError", "compare", "compare_dir",
           "emit_plot_data", "expand_grid", "load_document", "load_records", "parse_overrides",
           "run", "run_seed"]
