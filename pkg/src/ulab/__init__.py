"""Class unlearning with tilted reweighting, plus membership-inference evaluation."""

from .errors import (ConfigError, DegenerateGeometryError, DegenerateMassError, DivergenceError,
                     FormatError, InvalidInputError, OutOfHullError, ShapeError, UlabError,
                     UsageError)
from .nn import ClassifierModel, ProbVector, TrainConfig, fit, init_model, load_model, save_model
from .datasets import LabeledDataset, SplitDataset, split_forget
from .trw import SimilarityProfile, reweight, similarity_scores, solve_beta, tilt
from .unlearn import UnlearnConfig, UnlearnResult, unlearn
from .attacks import AttackReport, ThresholdClassifier, basic_mia, mia_nn_report, ulira_simplified
from .harness import ExperimentConfig, MetricsRow, run_experiment

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DegenerateGeometryError", "DegenerateMassError", "DivergenceError",
    "FormatError", "InvalidInputError", "OutOfHullError", "ShapeError", "UlabError",
    "UsageError", "ClassifierModel", "ProbVector", "TrainConfig", "fit", "init_model",
    "load_model", "save_model", "LabeledDataset", "SplitDataset", "split_forget",
    "SimilarityProfile", "reweight", "similarity_scores", "solve_beta", "tilt",
    "UnlearnConfig", "UnlearnResult", "unlearn", "AttackReport", "ThresholdClassifier",
    "basic_mia", "mia_nn_report", "ulira_simplified", "ExperimentConfig", "MetricsRow",
    "run_experiment",
]
