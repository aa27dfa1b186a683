"""Dual-branch source-free domain adaptation for EEG decoding."""
from __future__ import annotations

from .branch import Branch, Phase, ProbBatch, Role, View, encode, linear_view, predicted_label
from .data import CohortDataset, ShiftSpec, generate_cohort, load_dataset, save_dataset
from .engine import AdaptationConfig, RunReport, adapt_target, pretrain_source
from .prototypes import PrototypeBank, init_from_classifier, prototype_view

__version__ = "0.1.0"

__all__ = [
    "AdaptationConfig", "Branch", "CohortDataset", "Phase", "ProbBatch", "PrototypeBank", "Role",
    "RunReport", "ShiftSpec", "View", "adapt_target", "encode", "generate_cohort",
    "init_from_classifier", "linear_view", "load_dataset", "predicted_label", "pretrain_source",
    "prototype_view", "save_dataset",
]
