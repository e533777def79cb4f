"""Datasets, the Adam optimizer, the training loop and checkpoints."""
from .config import SCHEMA, ExperimentConfig
from .data import (Dataset, ToyMixtureSpec, export_directory, ingest_directory, make_piecewise,
                   make_toy2d, piecewise_sparsity_level)
from .optim import OptimizerState, adam_step, clip_by_global_norm
from .trainer import (METRIC_FIELDS, Trainer, build_dataset, build_measurement, build_sparsity,
                      read_metrics, train, write_metrics)

__all__ = [
    "METRIC_FIELDS",
    "SCHEMA",
    "Dataset",
    "ExperimentConfig",
    "OptimizerState",
    "ToyMixtureSpec",
    "Trainer",
    "adam_step",
    "build_dataset",
    "build_measurement",
    "build_sparsity",
    "clip_by_global_norm",
    "export_directory",
    "ingest_directory",
    "make_piecewise",
    "make_toy2d",
    "piecewise_sparsity_level",
    "read_metrics",
    "train",
    "write_metrics",
]
