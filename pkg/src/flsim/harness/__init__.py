from flsim.harness.config import SweepSpec, load_config_text, parse_config, render_default_config
from flsim.harness.sweep import HEADER, ResultRow, read_results, run_sweep, write_results

__all__ = ["HEADER", "ResultRow", "SweepSpec", "load_config_text", "parse_config", "read_results",
           "render_default_config", "run_sweep", "write_results"]
