"""Metrics, experiment configuration and orchestration, and the command line."""

from .config import ConfigError, ExperimentConfig, format_config, load_config, parse_config, stage_seed
from .experiment import StageError, evaluate_model, featurize_corpus, predict_file, run_experiment
from .metrics import EvalReport, MetricError, accuracy, confusion, macro_f1, top_k_accuracy

__all__ = [name for name in dir() if not name.startswith("_")]
