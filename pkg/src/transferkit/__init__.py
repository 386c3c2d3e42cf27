"""Automated transfer learning for directory-based image classification."""

from .backbones import get_backbone, list_backbones, register_backbone, resolve_blocks
from .config import ExperimentConfig, apply_defaults, snapshot, validate
from .data import compute_class_weights, discover_splits, infer_task
from .errors import TransferKitError
from .evaluation import ResultsBundle
from .experiment import TransferExperiment
from .inference import export_all, load_model, load_results, model_feature_extract, model_predict
from .trainer import LearningRateScheduler

__all__ = [
    "ExperimentConfig",
    "LearningRateScheduler",
    "ResultsBundle",
    "TransferExperiment",
    "TransferKitError",
    "apply_defaults",
    "compute_class_weights",
    "discover_splits",
    "export_all",
    "get_backbone",
    "infer_task",
    "list_backbones",
    "load_model",
    "load_results",
    "model_feature_extract",
    "model_predict",
    "register_backbone",
    "resolve_blocks",
    "snapshot",
    "validate",
]

__version__ = "0.1.0"
