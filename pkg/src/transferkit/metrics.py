"""Label decoding, confusion matrices and the metric registry."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import TaskSpec
from .errors import EvaluationError, TrainingError

BINARY_THRESHOLD = 0.5


def argmax_labels(prob_rows, task: TaskSpec) -> np.ndarray:
    """Class ids from model outputs.

    Binary outputs are scalars per row (id 1 iff p >= 0.5); multiclass rows
    pick the lowest index among tied maxima.
    """
    probs = np.asarray(prob_rows, dtype=np.float64)
    if task.mode == "binary":
        if probs.ndim == 2 and probs.shape[1] == 1:
            probs = probs[:, 0]
        if probs.ndim != 1:
            raise EvaluationError(f"binary outputs must be one scalar per row, got shape {probs.shape}")
        return (probs >= BINARY_THRESHOLD).astype(np.int64)
    if probs.ndim != 2 or probs.shape[1] != task.num_classes:
        raise EvaluationError(f"expected rows of width {task.num_classes}, got shape {probs.shape}")
    return np.argmax(probs, axis=1).astype(np.int64)


def confusion(y_true, y_pred, k: int) -> np.ndarray:
    """K x K counts; rows are true classes, columns predicted classes."""
    y_true = np.asarray(y_true, dtype=np.int64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.int64).ravel()
    if y_true.shape != y_pred.shape:
        raise EvaluationError(f"length mismatch: {y_true.size} true labels vs {y_pred.size} predictions")
    for name, ids in (("y_true", y_true), ("y_pred", y_pred)):
        if ids.size and (ids.min() < 0 or ids.max() >= k):
            raise EvaluationError(f"{name} contains ids outside 0..{k - 1}")
    return np.bincount(y_true * k + y_pred, minlength=k * k).reshape(k, k)


def _safe_div(num: float, den: float) -> float:
    return float(num / den) if den else 0.0


def _accuracy(cm: np.ndarray, task: TaskSpec) -> float:
    return _safe_div(np.trace(cm), cm.sum())


def _recall(cm: np.ndarray, task: TaskSpec) -> float:
    if task.mode == "binary":
        return _safe_div(cm[1, 1], cm[1].sum())
    return float(np.mean([_safe_div(cm[i, i], cm[i].sum()) for i in range(len(cm))]))


def _precision(cm: np.ndarray, task: TaskSpec) -> float:
    if task.mode == "binary":
        return _safe_div(cm[1, 1], cm[:, 1].sum())
    return float(np.mean([_safe_div(cm[i, i], cm[:, i].sum()) for i in range(len(cm))]))


def _from_confusion(fn):
    def metric(y_true, probs, task):
        return fn(confusion(y_true, argmax_labels(probs, task), task.num_classes), task)

    return metric


# name -> fn(y_true ids, probability rows, task) -> float
_METRICS: dict[str, Callable] = {
    "accuracy": _from_confusion(_accuracy),
    "recall": _from_confusion(_recall),
    "precision": _from_confusion(_precision),
}


def register_metric(name: str, fn: Callable) -> None:
    """Add a metric ``fn(y_true_ids, prob_rows, task) -> float`` to the registry."""
    if "loss" == name or name.startswith("val_"):
        raise ValueError(f"metric name {name!r} is reserved")
    _METRICS[name] = fn


def unregister_metric(name: str) -> None:
    _METRICS.pop(name, None)


def available_metrics() -> list[str]:
    return sorted(_METRICS)


@dataclass(frozen=True)
class Metric:
    name: str
    task: TaskSpec
    fn: Callable

    def __call__(self, y_true, probs) -> float:
        return float(self.fn(np.asarray(y_true), np.asarray(probs), self.task))


def normalize_metric(name: str, task: TaskSpec) -> Metric:
    """Bind ``name`` to ``task``: binary metrics at threshold 0.5, multiclass macro-averaged."""
    fn = _METRICS.get(name)
    if fn is None:
        raise TrainingError(f"unknown metric {name!r}; available: {', '.join(available_metrics())}")
    return Metric(name, task, fn)


def monitor_mode(name: str) -> str:
    """'min' for anything named like a loss, 'max' otherwise."""
    return "min" if "loss" in name else "max"
