"""Test-time evaluation, plots and the results bundle."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .config import ExperimentConfig, snapshot
from .data import DatasetBundle, TaskSpec
from .errors import EvaluationError
from .metrics import argmax_labels, confusion, normalize_metric
from .model import BuiltModel
from .trainer import CheckpointStore, TrainingHistory, evaluate_split

logger = logging.getLogger(__name__)

PLOT_DPI = 100
EVAL_SPLITS = ("val", "test", "external_test")


@dataclass
class EvaluationReport:
    metrics: dict[str, dict[str, float]]
    confusion: dict[str, np.ndarray]
    class_index: dict[str, int]
    weights: str = "best"

    @property
    def splits(self) -> list[str]:
        return list(self.metrics)

    def to_dict(self) -> dict:
        return {
            "metrics": {s: dict(m) for s, m in self.metrics.items()},
            "confusion": {s: cm.tolist() for s, cm in self.confusion.items()},
            "class_index": dict(self.class_index),
            "weights": self.weights,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EvaluationReport":
        return cls(
            metrics={s: dict(m) for s, m in doc["metrics"].items()},
            confusion={s: np.asarray(cm, dtype=np.int64) for s, cm in doc["confusion"].items()},
            class_index=dict(doc["class_index"]),
            weights=doc.get("weights", "best"),
        )


def evaluate(
    model: BuiltModel,
    data: DatasetBundle,
    metric_names: Sequence[str] = ("accuracy",),
    splits: Sequence[str] = EVAL_SPLITS,
) -> EvaluationReport:
    """Metrics and confusion matrices for every available split with the current weights."""
    task = model.task
    metrics = [normalize_metric(n, task) for n in metric_names]
    out_metrics, out_cm = {}, {}
    for split in splits:
        if split not in data.index:
            continue
        values, probs = evaluate_split(model, data, split, metrics)
        cm = confusion(data.labels(split), argmax_labels(probs, task), task.num_classes)
        values["accuracy"] = float(np.trace(cm) / cm.sum())
        out_metrics[split], out_cm[split] = values, cm
    return EvaluationReport(out_metrics, out_cm, dict(task.class_index), weights="current")


def auto_evaluate(
    model: BuiltModel,
    store: CheckpointStore,
    data: DatasetBundle,
    task: TaskSpec | None = None,
    auto_mode: bool = True,
    metric_names: Sequence[str] = ("accuracy",),
) -> EvaluationReport:
    """Evaluate val, test and (when present) external test.

    With ``auto_mode`` the best checkpoint is loaded first; otherwise the
    current weights are used.

    Raises:
        EvaluationError: ``auto_mode`` without a recorded checkpoint, or no test split.
    """
    if "test" not in data.index:
        raise EvaluationError("no test split to evaluate")
    if auto_mode:
        if store is None or store.best_state is None:
            raise EvaluationError("auto_mode needs a best-weights checkpoint but none was recorded")
        store.load_best(model)
    report = evaluate(model, data, metric_names)
    report.weights = "best" if auto_mode else "current"
    return report


# --- plots ----------------------------------------------------------------


def _save(fig: Figure, path: Path) -> Path:
    FigureCanvasAgg(fig)
    try:
        fig.savefig(path, dpi=PLOT_DPI)
    except OSError as exc:
        raise EvaluationError(f"cannot write plot {path}: {exc}") from exc
    return path


def _prepare_dir(out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise EvaluationError(f"cannot create plot directory {out}: {exc}") from exc
    return out


def base_metrics(history: TrainingHistory) -> list[str]:
    return [n for n in history.metric_names if not n.startswith("val_")]


def render_curves(history: TrainingHistory, out_dir) -> list[Path]:
    """One ``curve_<metric>.png`` per metric with train and validation series.

    Warm-phase epochs come first and are shaded.
    """
    if not len(history):
        raise EvaluationError("cannot plot an empty training history")
    out = _prepare_dir(out_dir)
    epochs = np.arange(1, len(history) + 1)
    n_warm = len(history.phase("warm"))
    paths = []
    for name in base_metrics(history):
        fig = Figure(figsize=(6, 4))
        ax = fig.add_subplot()
        ax.plot(epochs, history.series(name), marker="o", label=f"train {name}")
        if f"val_{name}" in history.metric_names:
            ax.plot(epochs, history.series(f"val_{name}"), marker="o", label=f"val {name}")
        if n_warm:
            ax.axvspan(0.5, n_warm + 0.5, color="0.9", label="warm pretraining")
            ax.axvline(n_warm + 0.5, color="0.5", linestyle="--")
        ax.set_xlabel("epoch")
        ax.set_ylabel(name)
        ax.set_title(f"{name} per epoch")
        ax.legend()
        fig.tight_layout()
        paths.append(_save(fig, out / f"curve_{name}.png"))
    return paths


def metric_extrema(history: TrainingHistory) -> dict[str, dict[str, Any]]:
    """Per validation metric: min/max value and the 0-based global epoch where each occurs."""
    out = {}
    for name in history.metric_names:
        if not name.startswith("val_"):
            continue
        series = np.asarray(history.series(name))
        lo, hi = int(np.argmin(series)), int(np.argmax(series))
        out[name] = {"min": float(series[lo]), "min_epoch": lo, "max": float(series[hi]), "max_epoch": hi}
    return out


def render_minmax(history: TrainingHistory, out_dir) -> Path:
    """``minmax.png``: each validation series with its minimum and maximum marked."""
    if not len(history):
        raise EvaluationError("cannot plot an empty training history")
    out = _prepare_dir(out_dir)
    extrema = metric_extrema(history)
    fig = Figure(figsize=(6, 3 * max(1, len(extrema))))
    epochs = np.arange(1, len(history) + 1)
    for i, (name, ext) in enumerate(extrema.items(), start=1):
        ax = fig.add_subplot(len(extrema), 1, i)
        ax.plot(epochs, history.series(name), color="0.4")
        ax.scatter([ext["min_epoch"] + 1], [ext["min"]], color="tab:blue", zorder=3, label="min")
        ax.scatter([ext["max_epoch"] + 1], [ext["max"]], color="tab:red", zorder=3, label="max")
        ax.annotate(f"min {ext['min']:.4f} @ {ext['min_epoch'] + 1}", (ext["min_epoch"] + 1, ext["min"]))
        ax.annotate(f"max {ext['max']:.4f} @ {ext['max_epoch'] + 1}", (ext["max_epoch"] + 1, ext["max"]))
        ax.set_ylabel(name)
        ax.legend(loc="best")
    fig.tight_layout()
    return _save(fig, out / "minmax.png")


def render_confusion(report: EvaluationReport, out_dir, splits: Sequence[str] | None = None) -> list[Path]:
    """``confusion_<split>.png`` heat maps with counts in each cell."""
    out = _prepare_dir(out_dir)
    names = sorted(report.class_index, key=report.class_index.__getitem__)
    paths = []
    for split in splits or [s for s in report.confusion if s != "val"]:
        cm = report.confusion[split]
        fig = Figure(figsize=(1.2 * len(names) + 3, 1.2 * len(names) + 2))
        ax = fig.add_subplot()
        im = ax.imshow(cm, cmap="Blues")
        fig.colorbar(im, ax=ax)
        ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
        ax.set_yticks(range(len(names)), names)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        ax.set_title(f"{split} (accuracy {report.metrics[split]['accuracy']:.3f})")
        threshold = cm.max() / 2 if cm.size else 0
        for (i, j), v in np.ndenumerate(cm):
            ax.text(j, i, str(v), ha="center", va="center", color="white" if v > threshold else "black")
        fig.tight_layout()
        paths.append(_save(fig, out / f"confusion_{split}.png"))
    return paths


# --- results --------------------------------------------------------------


@dataclass
class ResultsBundle:
    config: dict
    history: TrainingHistory
    report: EvaluationReport
    best: dict
    artifact_paths: dict[str, list[str]] = field(default_factory=dict)
    extrema: dict = field(default_factory=dict)
    seed: int | None = None

    @property
    def class_index(self) -> dict[str, int]:
        return self.report.class_index

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "class_index": dict(self.class_index),
            "best": dict(self.best),
            "history": self.history.to_dict(),
            "evaluation": self.report.to_dict(),
            "extrema": self.extrema,
            "artifacts": {k: list(v) for k, v in self.artifact_paths.items()},
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ResultsBundle":
        return cls(
            config=doc["config"],
            history=TrainingHistory.from_dict(doc["history"]),
            report=EvaluationReport.from_dict(doc["evaluation"]),
            best=dict(doc["best"]),
            artifact_paths={k: list(v) for k, v in doc.get("artifacts", {}).items()},
            extrema=doc.get("extrema", {}),
            seed=doc.get("seed"),
        )

    def metric_values(self) -> dict[str, float]:
        """Flat ``split/metric`` map of every evaluated number plus the best record."""
        flat = {f"{s}/{k}": v for s, m in self.report.metrics.items() for k, v in m.items()}
        flat["best/value"] = self.best["value"]
        return flat


def build_results(
    config: ExperimentConfig | dict,
    histories: TrainingHistory | Sequence[TrainingHistory],
    report: EvaluationReport,
    store: CheckpointStore,
    artifact_paths: dict[str, Sequence] | None = None,
    seed: int | None = None,
) -> ResultsBundle:
    """Assemble the run's results; every artifact path must exist.

    Raises:
        EvaluationError: a referenced artifact is missing or no best epoch was recorded.
    """
    if isinstance(histories, TrainingHistory):
        history = histories
    else:
        history = TrainingHistory([r for h in histories for r in h.records])
    if store.best_epoch is None:
        raise EvaluationError("checkpoint store recorded no best epoch")
    paths = {k: [str(p) for p in v] for k, v in (artifact_paths or {}).items()}
    for kind, items in paths.items():
        for p in items:
            if not Path(p).exists():
                raise EvaluationError(f"{kind} artifact {p} does not exist")
    snap = snapshot(config) if isinstance(config, ExperimentConfig) else dict(config)
    best = {"metric": store.metric, "mode": store.mode, "epoch": store.best_epoch, "value": store.best_value}
    return ResultsBundle(snap, history, report, best, paths, metric_extrema(history), seed)
