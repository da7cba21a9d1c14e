"""Deterministic cross-silo federated learning benchmark.

Synthetic federations with controllable style and content heterogeneity,
data-side harmonization and model-side personalization methods over a common
round interface, and a batch harness that compares them under one budget.
"""

__version__ = "0.1.0"

from .engine import (
    BASELINE_KINDS,
    DivergenceError,
    ExperimentConfig,
    ResultTable,
    ToySpec,
    TrainingConfig,
    cell_federation,
    method_config,
    run_experiment,
    run_tradeoff_suite,
)
from .harmonize import HarmonizeKind
from .model import ModelSpec, ParamSet, init_params
from .strategies import StrategyKind
from .synthdata import FederationSpec, ShiftProfile, make_federation

__all__ = [
    "__version__",
    "BASELINE_KINDS",
    "DivergenceError",
    "ExperimentConfig",
    "FederationSpec",
    "HarmonizeKind",
    "ModelSpec",
    "ParamSet",
    "ResultTable",
    "ShiftProfile",
    "StrategyKind",
    "ToySpec",
    "TrainingConfig",
    "cell_federation",
    "init_params",
    "make_federation",
    "method_config",
    "run_experiment",
    "run_tradeoff_suite",
]
