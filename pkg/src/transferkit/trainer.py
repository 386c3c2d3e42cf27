"""Optimizers, warm pretraining of the head, main training, checkpoints and early stopping."""

from __future__ import annotations

import inspect
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import ExperimentConfig
from .data import DatasetBundle, TaskSpec, compute_class_weights
from .errors import TrainingError
from .metrics import Metric, monitor_mode, normalize_metric
from .model import BuiltModel

logger = logging.getLogger(__name__)

OPTIMIZERS = {
    "Adam": torch.optim.Adam,
    "AdamW": torch.optim.AdamW,
    "Adamax": torch.optim.Adamax,
    "Nadam": torch.optim.NAdam,
    "SGD": torch.optim.SGD,
    "RMSprop": torch.optim.RMSprop,
    "Adagrad": torch.optim.Adagrad,
    "Adadelta": torch.optim.Adadelta,
}

# Keras-style argument names translated to torch equivalents
_ALIASES = {"epsilon": "eps"}
_CLIPPING = ("clipnorm", "clipvalue", "global_clipnorm")


@dataclass
class OptimizerFactory:
    """Configured optimizer type; :meth:`create` yields fresh state for a parameter set."""

    name: str
    learning_rate: float
    kwargs: dict = field(default_factory=dict)
    clipnorm: float | None = None
    clipvalue: float | None = None
    global_clipnorm: float | None = None

    def create(self, params: Iterable[torch.nn.Parameter]) -> torch.optim.Optimizer:
        return OPTIMIZERS[self.name](list(params), lr=self.learning_rate, **self.kwargs)

    def clip(self, params: Sequence[torch.nn.Parameter]) -> None:
        with_grad = [p for p in params if p.grad is not None]
        if self.clipvalue is not None:
            torch.nn.utils.clip_grad_value_(with_grad, self.clipvalue)
        if self.clipnorm is not None:
            for p in with_grad:
                torch.nn.utils.clip_grad_norm_([p], self.clipnorm)
        if self.global_clipnorm is not None:
            torch.nn.utils.clip_grad_norm_(with_grad, self.global_clipnorm)


def build_optimizer(name: str, learning_rate: float, extra: dict | None = None) -> OptimizerFactory:
    """Resolve an optimizer by name and check every extra parameter against it.

    ``clipnorm`` clips each parameter's gradient norm, ``global_clipnorm`` the
    joint norm and ``clipvalue`` each element. Keras spellings ``beta_1``,
    ``beta_2``, ``epsilon`` and ``rho`` are accepted.

    Raises:
        TrainingError: unknown optimizer or unsupported extra parameter.
    """
    if name not in OPTIMIZERS:
        raise TrainingError(f"unknown optimizer {name!r}; available: {', '.join(sorted(OPTIMIZERS))}")
    if not learning_rate > 0:
        raise TrainingError(f"learning rate must be positive, got {learning_rate}")
    accepted = set(inspect.signature(OPTIMIZERS[name]).parameters) - {"params", "lr"}
    factory = OptimizerFactory(name, float(learning_rate))
    betas = {}
    for key, value in (extra or {}).items():
        if key in _CLIPPING:
            setattr(factory, key, float(value))
        elif key in ("beta_1", "beta_2") and "betas" in accepted:
            betas[key] = float(value)
        elif key == "rho" and ("alpha" in accepted or "rho" in accepted):
            factory.kwargs["alpha" if "alpha" in accepted else "rho"] = value
        elif _ALIASES.get(key) in accepted:
            factory.kwargs[_ALIASES[key]] = value
        elif key in accepted:
            factory.kwargs[key] = value
        else:
            raise TrainingError(f"optimizer {name} does not support parameter {key!r}")
    if betas:
        factory.kwargs["betas"] = (betas.get("beta_1", 0.9), betas.get("beta_2", 0.999))
    try:
        factory.create([torch.nn.Parameter(torch.zeros(1))])
    except (TypeError, ValueError) as exc:
        raise TrainingError(f"invalid parameters for optimizer {name}: {exc}") from exc
    return factory


def compute_patience(fraction: float, epochs: int) -> int:
    """Non-improving epochs tolerated; ``fraction == 0`` disables early stopping (returns ``epochs``)."""
    if fraction <= 0:
        return epochs
    return max(1, math.floor(fraction * epochs + 0.5))


@dataclass
class EpochRecord:
    phase: str
    epoch: int
    metrics: dict[str, float]
    seconds: float

    def to_dict(self) -> dict:
        return {"phase": self.phase, "epoch": self.epoch, "metrics": dict(self.metrics), "seconds": self.seconds}


@dataclass
class TrainingHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __add__(self, other: "TrainingHistory") -> "TrainingHistory":
        return TrainingHistory(self.records + other.records)

    def phase(self, name: str) -> "TrainingHistory":
        return TrainingHistory([r for r in self.records if r.phase == name])

    def series(self, metric: str, phase: str | None = None) -> list[float]:
        return [r.metrics[metric] for r in self.records if phase is None or r.phase == phase]

    @property
    def metric_names(self) -> list[str]:
        names: list[str] = []
        for r in self.records:
            names.extend(k for k in r.metrics if k not in names)
        return names

    def to_dict(self) -> list[dict]:
        return [r.to_dict() for r in self.records]

    @classmethod
    def from_dict(cls, rows: list[dict]) -> "TrainingHistory":
        return cls([EpochRecord(r["phase"], r["epoch"], dict(r["metrics"]), r["seconds"]) for r in rows])


class CheckpointStore:
    """Tracks the best value of one monitored metric and the matching weights.

    Weights are always kept in memory; with ``save_files`` they are also
    written as ``weights_best_<metric>_<epoch>.pt`` (only the current best
    file is kept).
    """

    def __init__(self, directory: str | os.PathLike, metric: str = "val_loss", save_files: bool = True):
        self.directory = Path(directory)
        self.metric = metric
        self.mode = monitor_mode(metric)
        self.save_files = save_files
        self.best_value: float | None = None
        self.best_epoch: int | None = None
        self.best_state: dict | None = None
        self.path: Path | None = None
        if save_files:
            try:
                self.directory.mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise TrainingError(f"checkpoint directory {self.directory} is not writable: {exc}") from exc
            if not os.access(self.directory, os.W_OK):
                raise TrainingError(f"checkpoint directory {self.directory} is not writable")

    def improves(self, value: float) -> bool:
        if self.best_value is None:
            return not math.isnan(value)
        return value < self.best_value if self.mode == "min" else value > self.best_value

    def update(self, epoch: int, value: float, model: BuiltModel) -> bool:
        """Record ``value``; on strict improvement snapshot the weights and return True."""
        if not self.improves(value):
            return False
        self.best_value, self.best_epoch = float(value), epoch
        self.best_state = model.state_dict()
        if self.save_files:
            path = self.directory / f"weights_best_{self.metric}_{epoch}.pt"
            try:
                torch.save(self.best_state, path)
            except OSError as exc:
                raise TrainingError(f"cannot write checkpoint {path}: {exc}") from exc
            if self.path is not None and self.path != path and self.path.exists():
                self.path.unlink()
            self.path = path
        return True

    def load_best(self, model: BuiltModel) -> None:
        if self.best_state is None:
            raise TrainingError("no checkpoint recorded yet")
        model.load_state_dict(self.best_state)


class EarlyStopping:
    def __init__(self, patience: int, mode: str):
        self.patience = patience
        self.mode = mode
        self.best: float | None = None
        self.wait = 0

    def step(self, value: float) -> bool:
        """Feed one epoch's value; True means stop now."""
        if self.best is None or (value < self.best if self.mode == "min" else value > self.best):
            self.best, self.wait = value, 0
            return False
        self.wait += 1
        return self.wait >= self.patience


class LearningRateScheduler:
    """Callback setting the learning rate from ``schedule(epoch, lr)`` before each epoch."""

    def __init__(self, schedule):
        self.schedule = schedule
        self.optimizer = None

    def on_train_begin(self, optimizer):
        self.optimizer = optimizer

    def on_epoch_begin(self, epoch, logs=None):
        for group in self.optimizer.param_groups:
            group["lr"] = float(self.schedule(epoch, group["lr"]))

    def on_epoch_end(self, epoch, logs):
        pass


def _notify(callbacks, hook: str, *args) -> None:
    for cb in callbacks:
        method = getattr(cb, hook, None)
        if method is not None:
            method(*args)
        elif hook == "on_epoch_end" and callable(cb):
            cb(*args)


def per_sample_loss(logits: torch.Tensor, targets: torch.Tensor, task: TaskSpec) -> torch.Tensor:
    if task.mode == "binary":
        return F.binary_cross_entropy_with_logits(logits[:, 0], targets, reduction="none")
    return -(targets * F.log_softmax(logits, dim=1)).sum(dim=1)


def _target_ids(targets: torch.Tensor, task: TaskSpec) -> torch.Tensor:
    return targets.long() if task.mode == "binary" else targets.argmax(dim=1)


def _probabilities(logits: torch.Tensor, task: TaskSpec) -> torch.Tensor:
    return torch.sigmoid(logits) if task.mode == "binary" else torch.softmax(logits, dim=1)


def class_weight_vector(data: DatasetBundle) -> torch.Tensor:
    weights = compute_class_weights(data.train_counts)
    return torch.tensor([weights[name] for name in data.task.class_names], dtype=torch.float32)


def evaluate_split(
    model: BuiltModel, data: DatasetBundle, split: str, metrics: Sequence[Metric]
) -> tuple[dict[str, float], np.ndarray]:
    """Loss and metrics on an unshuffled, unaugmented split; also returns the probability rows."""
    model.network.eval()
    losses, probs = [], []
    with torch.no_grad():
        for images, targets in data.batches(split, augment=False, shuffle=False):
            logits = model.network.logits(images)
            losses.append(per_sample_loss(logits, targets, model.task))
            probs.append(_probabilities(logits, model.task))
        penalty = float(model.network.l2_penalty())
    prob_rows = torch.cat(probs).numpy()
    y_true = data.labels(split)
    values = {"loss": float(torch.cat(losses).mean()) + penalty}
    for metric in metrics:
        values[metric.name] = metric(y_true, prob_rows)
    return values, prob_rows


def run_epoch(
    model: BuiltModel,
    data: DatasetBundle,
    optimizer: torch.optim.Optimizer,
    factory: OptimizerFactory,
    metrics: Sequence[Metric],
    class_weights: torch.Tensor | None,
    data_epoch: int,
) -> dict[str, float]:
    """One pass over train followed by validation; returns the merged record."""
    task = model.task
    params = model.trainable_parameters()
    model.train_mode()
    total, seen = 0.0, 0
    ids, probs = [], []
    for images, targets in data.batches("train", epoch=data_epoch):
        optimizer.zero_grad()
        logits = model.network.logits(images)
        sample_loss = per_sample_loss(logits, targets, task)
        target_ids = _target_ids(targets, task)
        if class_weights is not None:
            sample_loss = sample_loss * class_weights[target_ids]
        loss = sample_loss.mean() + model.network.l2_penalty()
        loss.backward()
        factory.clip(params)
        optimizer.step()
        total += loss.item() * len(images)
        seen += len(images)
        ids.append(target_ids)
        probs.append(_probabilities(logits.detach(), task))
    y_true = torch.cat(ids).numpy()
    prob_rows = torch.cat(probs).numpy()
    record = {"loss": total / seen}
    for metric in metrics:
        record[metric.name] = metric(y_true, prob_rows)
    val, _ = evaluate_split(model, data, "val", metrics)
    record.update({f"val_{k}": v for k, v in val.items()})
    return record


def record_names(metric_names: Sequence[str]) -> list[str]:
    base = ["loss", *metric_names]
    return base + [f"val_{n}" for n in base]


def warm_pretrain(
    model: BuiltModel,
    data: DatasetBundle,
    epochs: int,
    optimizer: OptimizerFactory,
    task: TaskSpec | None = None,
    metric_names: Sequence[str] = ("accuracy",),
    class_weights: bool = False,
) -> TrainingHistory:
    """Train only the head with the whole backbone frozen, then restore the configured mask."""
    history = TrainingHistory()
    if epochs <= 0:
        return history
    task = task or model.task
    metrics = [normalize_metric(n, task) for n in metric_names]
    weights = class_weight_vector(data) if class_weights else None
    configured = dict(model.mask)
    backbone = set(model.backbone_layers)
    model.set_mask({name: name not in backbone for name in configured})
    try:
        opt = optimizer.create(model.trainable_parameters())
        for epoch in range(epochs):
            start = time.perf_counter()
            record = run_epoch(model, data, opt, optimizer, metrics, weights, data_epoch=epoch)
            history.records.append(EpochRecord("warm", epoch, record, time.perf_counter() - start))
            logger.info("warm epoch %d: %s", epoch, _fmt(record))
    finally:
        model.set_mask(configured)
    return history


def train(
    model: BuiltModel,
    data: DatasetBundle,
    config: ExperimentConfig,
    callbacks: Sequence[Any] = (),
    store: CheckpointStore | None = None,
    optimizer: OptimizerFactory | None = None,
    epoch_offset: int = 0,
) -> TrainingHistory:
    """Main training phase with class weights, callbacks, checkpointing and early stopping.

    ``epoch_offset`` shifts the data-shuffling epoch so a preceding warm phase
    does not replay the same batch orders.

    Raises:
        TrainingError: the monitored metric is not produced by this run, or a
            configured metric is unknown.
    """
    cfg = config.training
    task = model.task
    metrics = [normalize_metric(n, task) for n in cfg.metrics]
    if store is None:
        store = CheckpointStore(config.saving.save_weights_folder, config.saving.save_best_weights, save_files=False)
    names = record_names(cfg.metrics)
    if store.metric not in names:
        raise TrainingError(f"monitored metric {store.metric!r} is not produced by this run; available: {names}")
    factory = optimizer or build_optimizer(cfg.optimizer_name, cfg.learning_rate, cfg.add_optimizer_params)
    opt = factory.create(model.trainable_parameters())
    weights = class_weight_vector(data) if cfg.class_weights else None
    stopper = None
    if cfg.early_stop > 0:
        stopper = EarlyStopping(compute_patience(cfg.early_stop, cfg.epochs), store.mode)

    history = TrainingHistory()
    _notify(callbacks, "on_train_begin", opt)
    for epoch in range(cfg.epochs):
        _notify(callbacks, "on_epoch_begin", epoch, {})
        start = time.perf_counter()
        record = run_epoch(model, data, opt, factory, metrics, weights, data_epoch=epoch_offset + epoch)
        history.records.append(EpochRecord("main", epoch, record, time.perf_counter() - start))
        logger.info("epoch %d: %s", epoch, _fmt(record))
        _notify(callbacks, "on_epoch_end", epoch, dict(record))
        value = record[store.metric]
        store.update(epoch, value, model)
        if stopper is not None and stopper.step(value):
            logger.info("early stopping after epoch %d (patience %d)", epoch, stopper.patience)
            break
    return history


def _fmt(record: dict) -> str:
    return ", ".join(f"{k}={v:.4f}" for k, v in record.items())
