"""
mrfei - self-supervised reconstruction for MR fingerprinting.

Simulates FISP dictionaries, fits temporal subspaces, synthesises undersampled
phantom data and trains reconstruction networks with a nonlinear equivariant
imaging loss (data consistency through a learned Bloch surrogate plus
rotation/flip equivariance).
"""

__version__ = "0.1.0"
__author__ = "mrfei developers"

from mrfei.acquisition import AcquisitionOperator
from mrfei.config import ConfigError, ExperimentConfig, load_config
from mrfei.experiment import ExperimentError, ExperimentRunner, alpha_sweep, run_experiment
from mrfei.matching import dictionary_match
from mrfei.metrics import MetricReport, evaluate_qmaps
from mrfei.sequence import Dictionary, build_dictionary
from mrfei.subspace import TemporalBasis, fit_basis
from mrfei.surrogate import BlochSurrogate, train_surrogate
from mrfei.training import TrainConfig, Trainer, TrainMode, reconstruct, train

__all__ = [
    "__version__",
    "AcquisitionOperator",
    "BlochSurrogate",
    "ConfigError",
    "Dictionary",
    "ExperimentConfig",
    "ExperimentError",
    "ExperimentRunner",
    "MetricReport",
    "TemporalBasis",
    "TrainConfig",
    "TrainMode",
    "Trainer",
    "alpha_sweep",
    "build_dictionary",
    "dictionary_match",
    "evaluate_qmaps",
    "fit_basis",
    "load_config",
    "reconstruct",
    "run_experiment",
    "train",
    "train_surrogate",
]
