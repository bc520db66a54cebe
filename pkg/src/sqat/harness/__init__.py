from .config import ExperimentConfig, load_config, parse_config
from .runner import run_attack, run_report, run_sweep, run_train, verify_targeted

__all__ = ["ExperimentConfig", "load_config", "parse_config", "run_attack", "run_report",
           "run_sweep", "run_train", "verify_targeted"]
