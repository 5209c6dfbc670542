"""Experiment layer: datasets, training, sweeps, artifacts and the ``lrlc`` CLI."""

from .config import DataConfig, ExperimentConfig, SweepConfig, TrainingConfig, load_config, validate_config
from .datasets import DatasetSplit, TranslateSpec, load_cifar10, load_mnist, translate_dataset
from .optimize import AdamState, Schedule, TrainRun, adam_step, cross_entropy, evaluate, schedule_rate, train
from .sweep import Cell, CellResult, SweepResult, export_heatmaps, lower, report_costs, run_experiment

__all__ = [
    "AdamState",
    "Cell",
    "CellResult",
    "DataConfig",
    "DatasetSplit",
    "ExperimentConfig",
    "Schedule",
    "SweepConfig",
    "SweepResult",
    "TrainRun",
    "TrainingConfig",
    "TranslateSpec",
    "adam_step",
    "cross_entropy",
    "evaluate",
    "export_heatmaps",
    "load_cifar10",
    "load_config",
    "load_mnist",
    "lower",
    "report_costs",
    "run_experiment",
    "schedule_rate",
    "train",
    "translate_dataset",
    "validate_config",
]
