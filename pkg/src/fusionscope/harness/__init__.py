"""Classification metrics, report emission, experiment configuration and the command-line interface."""
from .classification import ClassificationReport, aggregate_folds, classification_metrics, roc_curve
from .config import ConfigError, ExperimentConfig, load_config
from .report import ReportFormat, emit_report

__all__ = ["ClassificationReport", "aggregate_folds", "classification_metrics", "roc_curve",
           "ConfigError", "ExperimentConfig", "load_config", "ReportFormat", "emit_report"]
