"""Hierarchical VAEs with tuned Hamiltonian Monte Carlo for incomplete mixed-type tables."""

from __future__ import annotations

from .data import MixedDataset, Standardizer, load_csv, parse_typespec, synth_mixed
from .errors import (
    ConfigurationError,
    ContractError,
    DataFormatError,
    DivergenceError,
    DomainError,
    HHVAEMError,
    ShapeError,
)
from .estimator import HHVAEM
from .harness import RunConfig, TrainedModel, eval_metrics, run_train
from .likelihoods import FeatureType

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "ContractError",
    "DataFormatError",
    "DivergenceError",
    "DomainError",
    "FeatureType",
    "HHVAEM",
    "HHVAEMError",
    "MixedDataset",
    "RunConfig",
    "ShapeError",
    "Standardizer",
    "TrainedModel",
    "eval_metrics",
    "load_csv",
    "parse_typespec",
    "run_train",
    "synth_mixed",
]
