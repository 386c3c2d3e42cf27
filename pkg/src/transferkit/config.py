"""Six-section experiment configuration: defaults, merging, validation, snapshots.

Sections mirror the keyword arguments of :class:`transferkit.TransferExperiment`::

    paths / model / training / evaluation / saving / misc

Every key lives in exactly one section. Hook-valued keys (``training.callback``
and ``training.custom_augmentation``) can only be supplied through the Python
API; config files record them by count.
"""

from __future__ import annotations

import copy
import math
import os
from dataclasses import dataclass, field, fields, replace
from numbers import Real
from pathlib import Path
from typing import Any, Callable, Mapping

import yaml

from .errors import ConfigError

SECTIONS = ("paths", "model", "training", "evaluation", "saving", "misc")

BRIDGES = ("Flatten", "GlobalAveragePooling")
REGULARIZATION_MODES = ("None", "Dropout", "L2", "Dropout+L2")
AUGMENTATION_MODES = ("none", "basic", "custom")
ACTIVATIONS = ("elu", "relu", "selu", "gelu", "tanh", "sigmoid", "swish", "leaky_relu", "linear")
INITIALIZERS = (
    "he_normal",
    "he_uniform",
    "glorot_normal",
    "glorot_uniform",
    "lecun_normal",
    "lecun_uniform",
)

# Keys whose values are Python callables; kept out of files and snapshots.
HOOK_KEYS = {"training": ("custom_augmentation", "callback")}
# Snapshot-only metadata standing in for the hook keys above; ignored on input.
HOOK_METADATA_KEYS = {
    "training": (
        "custom_augmentation_count",
        "custom_augmentation_names",
        "callback_count",
        "callback_names",
    )
}


@dataclass(frozen=True)
class PathsConfig:
    train_val_data: str | None = None
    test_data_folder: str | None = None
    external_test_data_folder: str | None = None


@dataclass(frozen=True)
class ModelConfig:
    image_size: tuple[int, int] | None = None
    transfer_arch: str = "VGG16"
    pre_trained: str = "imagenet"
    before_dense: str = "Flatten"
    dense_layers: tuple[int, ...] = (144, 89, 55)
    dense_activations: str = "elu"
    initializer: str = "he_normal"
    batch_norm: bool = False
    regularization: str = "Dropout"
    l2_strength: float = 0.001
    dropout_rate: float = 0.3
    unfreeze_block: tuple[str, ...] = ()
    freeze_up_to: str | None = None


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 2e-5
    optimizer_name: str = "Adam"
    add_optimizer_params: dict = field(default_factory=dict)
    class_weights: bool = True
    metrics: tuple[str, ...] = ("accuracy",)
    augmentation: str = "basic"
    custom_augmentation: tuple[Callable, ...] = ()
    callback: tuple[Any, ...] = ()
    early_stop: float = 0.0
    warm_pretrain_dense: bool = True
    warm_pretrain_epochs: int = 5


@dataclass(frozen=True)
class EvaluationConfig:
    auto_mode: bool = True


@dataclass(frozen=True)
class SavingConfig:
    save_weights: bool = True
    save_weights_folder: str = "weights"
    save_best_weights: str = "val_loss"


@dataclass(frozen=True)
class MiscConfig:
    show_summary: bool = True
    plot_curves: bool = True
    show_min_max_plot: bool = True
    plot_conf: bool = True


_SECTION_TYPES = {
    "paths": PathsConfig,
    "model": ModelConfig,
    "training": TrainingConfig,
    "evaluation": EvaluationConfig,
    "saving": SavingConfig,
    "misc": MiscConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    saving: SavingConfig = field(default_factory=SavingConfig)
    misc: MiscConfig = field(default_factory=MiscConfig)

    def to_dict(self) -> dict[str, dict[str, Any]]:
        """Nested plain map including hook values (not JSON-safe, see :func:`snapshot`)."""
        return {
            name: {f.name: getattr(getattr(self, name), f.name) for f in fields(_SECTION_TYPES[name])}
            for name in SECTIONS
        }


@dataclass(frozen=True)
class Violation:
    section: str
    key: str
    message: str

    def __str__(self) -> str:
        return f"{self.section}.{self.key}: {self.message}"


def section_keys(section: str) -> tuple[str, ...]:
    return tuple(f.name for f in fields(_SECTION_TYPES[section]))


def _normalize(value: Any) -> Any:
    # lists become tuples so configs compare by value; dicts are copied
    if isinstance(value, list):
        return tuple(_normalize(v) for v in value)
    if isinstance(value, tuple):
        return tuple(_normalize(v) for v in value)
    if isinstance(value, dict):
        return {k: _normalize(v) for k, v in value.items()}
    if isinstance(value, os.PathLike):
        return os.fspath(value)
    return value


def apply_defaults(partial_config: Mapping[str, Any] | ExperimentConfig | None = None) -> ExperimentConfig:
    """Fill every unspecified key with its default.

    Args:
        partial_config: Nested ``{section: {key: value}}`` map, or an existing
            config (the call is then idempotent). The input is never mutated.

    Raises:
        ConfigError: a section or key is not part of the schema.
    """
    if partial_config is None:
        partial_config = {}
    if isinstance(partial_config, ExperimentConfig):
        partial_config = partial_config.to_dict()
    if not isinstance(partial_config, Mapping):
        raise ConfigError(f"configuration must be a mapping of sections, got {type(partial_config).__name__}")

    built = {}
    for section, values in partial_config.items():
        if section not in _SECTION_TYPES:
            raise ConfigError(
                f"unknown configuration section {section!r}; expected one of {', '.join(SECTIONS)}",
                section=section,
            )
        if values is None:
            continue
        if not isinstance(values, Mapping):
            raise ConfigError(f"section {section!r} must be a mapping", section=section)
        allowed = set(section_keys(section))
        metadata = set(HOOK_METADATA_KEYS.get(section, ()))
        kwargs = {}
        for key, value in values.items():
            if key in metadata:
                continue
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in section {section!r}", section=section, key=key)
            kwargs[key] = copy.copy(value) if isinstance(value, dict) else _normalize(value)
        built[section] = _SECTION_TYPES[section](**kwargs)
    return ExperimentConfig(**built)


def set_dotted(partial_config: dict, dotted_key: str, value: Any) -> dict:
    """Return a copy of ``partial_config`` with ``section.key`` set to ``value``."""
    section, sep, key = dotted_key.partition(".")
    if not sep or not key or "." in key:
        raise ConfigError(f"override key must look like section.key, got {dotted_key!r}")
    if section not in _SECTION_TYPES:
        raise ConfigError(f"unknown configuration section {section!r}", section=section)
    if key not in section_keys(section):
        raise ConfigError(f"unknown key {key!r} in section {section!r}", section=section, key=key)
    if key in HOOK_KEYS.get(section, ()):
        raise ConfigError(f"{dotted_key} holds Python callables and cannot be set from text", section, key)
    out = copy.deepcopy(partial_config)
    out.setdefault(section, {})[key] = value
    return out


def load_config_file(path: str | os.PathLike) -> dict:
    """Read a YAML or JSON config document with the six top-level sections."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must contain a mapping of sections")
    for section, values in doc.items():
        for key in HOOK_KEYS.get(section, ()):
            if isinstance(values, dict) and key in values:
                raise ConfigError(
                    f"{section}.{key} holds Python callables and is only available through the API",
                    section=section,
                    key=key,
                )
    apply_defaults(doc)  # reject unknown sections/keys early
    return doc


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_real(value) -> bool:
    return isinstance(value, Real) and not isinstance(value, bool) and math.isfinite(float(value))


def _nonempty_path(value) -> bool:
    return isinstance(value, (str, os.PathLike)) and str(value) != ""


def validate(config: ExperimentConfig) -> list[Violation]:
    """Collect every violation in ``config``; an empty list means valid."""
    out: list[Violation] = []

    def bad(section, key, message):
        out.append(Violation(section, key, message))

    p = config.paths
    if not _nonempty_path(p.train_val_data):
        bad("paths", "train_val_data", "a train/val data directory is required")
    if not _nonempty_path(p.test_data_folder):
        bad("paths", "test_data_folder", "a test data directory is required")
    if p.external_test_data_folder is not None and not _nonempty_path(p.external_test_data_folder):
        bad("paths", "external_test_data_folder", "must be a directory path or None")

    m = config.model
    if m.image_size is not None:
        if not (
            isinstance(m.image_size, tuple)
            and len(m.image_size) == 2
            and all(_is_int(v) and v > 0 for v in m.image_size)
        ):
            bad("model", "image_size", "must be (height, width) with positive integers, or None")
    if not isinstance(m.transfer_arch, str) or not m.transfer_arch:
        bad("model", "transfer_arch", "must be a backbone name")
    if not isinstance(m.pre_trained, str) or not m.pre_trained:
        bad("model", "pre_trained", "must be a weight source name or 'none'")
    if m.before_dense not in BRIDGES:
        bad("model", "before_dense", f"must be one of {BRIDGES}")
    if not isinstance(m.dense_layers, tuple) or not all(_is_int(w) and w >= 1 for w in m.dense_layers):
        bad("model", "dense_layers", "must be a list of positive integers")
    if m.dense_activations not in ACTIVATIONS:
        bad("model", "dense_activations", f"must be one of {ACTIVATIONS}")
    if m.initializer not in INITIALIZERS:
        bad("model", "initializer", f"must be one of {INITIALIZERS}")
    if not isinstance(m.batch_norm, bool):
        bad("model", "batch_norm", "must be a boolean")
    if m.regularization not in REGULARIZATION_MODES:
        bad("model", "regularization", f"must be one of {REGULARIZATION_MODES}")
    if not _is_real(m.l2_strength) or m.l2_strength < 0:
        bad("model", "l2_strength", "must be a real number >= 0")
    if not _is_real(m.dropout_rate) or not 0 <= m.dropout_rate < 1:
        bad("model", "dropout_rate", "must lie in the range [0, 1)")
    if not isinstance(m.unfreeze_block, tuple) or not all(isinstance(b, str) for b in m.unfreeze_block):
        bad("model", "unfreeze_block", "must be a list of block names")
    if m.freeze_up_to is not None and not isinstance(m.freeze_up_to, str):
        bad("model", "freeze_up_to", "must be a layer name or None")

    t = config.training
    if not _is_int(t.epochs) or t.epochs < 1:
        bad("training", "epochs", "must be an integer >= 1")
    if not _is_int(t.batch_size) or t.batch_size < 1:
        bad("training", "batch_size", "must be an integer >= 1")
    if not _is_real(t.learning_rate) or t.learning_rate <= 0:
        bad("training", "learning_rate", "must be a real number > 0")
    if not isinstance(t.optimizer_name, str) or not t.optimizer_name:
        bad("training", "optimizer_name", "must be an optimizer name")
    if not isinstance(t.add_optimizer_params, dict) or not all(isinstance(k, str) for k in t.add_optimizer_params):
        bad("training", "add_optimizer_params", "must be a mapping of parameter names to values")
    if not isinstance(t.class_weights, bool):
        bad("training", "class_weights", "must be a boolean")
    if not isinstance(t.metrics, tuple) or not all(isinstance(name, str) for name in t.metrics):
        bad("training", "metrics", "must be a list of metric names")
    if t.augmentation not in AUGMENTATION_MODES:
        bad("training", "augmentation", f"must be one of {AUGMENTATION_MODES}")
    if not isinstance(t.custom_augmentation, tuple) or not all(callable(h) for h in t.custom_augmentation):
        bad("training", "custom_augmentation", "must be a list of callables")
    elif t.augmentation == "custom" and not t.custom_augmentation:
        bad("training", "custom_augmentation", "augmentation='custom' requires at least one transform")
    if not isinstance(t.callback, tuple):
        bad("training", "callback", "must be a list of callbacks")
    elif not all(callable(cb) or hasattr(cb, "on_epoch_end") for cb in t.callback):
        bad("training", "callback", "each callback must be callable or define on_epoch_end")
    if not _is_real(t.early_stop) or not 0 <= t.early_stop <= 1:
        bad("training", "early_stop", "must be a fraction in [0, 1]")
    if not isinstance(t.warm_pretrain_dense, bool):
        bad("training", "warm_pretrain_dense", "must be a boolean")
    if not _is_int(t.warm_pretrain_epochs) or t.warm_pretrain_epochs < 0:
        bad("training", "warm_pretrain_epochs", "must be an integer >= 0")

    if not isinstance(config.evaluation.auto_mode, bool):
        bad("evaluation", "auto_mode", "must be a boolean")

    s = config.saving
    if not isinstance(s.save_weights, bool):
        bad("saving", "save_weights", "must be a boolean")
    if not _nonempty_path(s.save_weights_folder):
        bad("saving", "save_weights_folder", "must be a directory path")
    if not isinstance(s.save_best_weights, str) or not s.save_best_weights:
        bad("saving", "save_best_weights", "must be a monitored metric name")

    for f in fields(MiscConfig):
        if not isinstance(getattr(config.misc, f.name), bool):
            bad("misc", f.name, "must be a boolean")
    return out


def ensure_valid(config: ExperimentConfig) -> ExperimentConfig:
    violations = validate(config)
    if violations:
        first = violations[0]
        details = "; ".join(str(v) for v in violations)
        raise ConfigError(f"invalid configuration: {details}", section=first.section, key=first.key)
    return config


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, Path):
        return str(value)
    return value


def _hook_name(hook) -> str:
    return getattr(hook, "__name__", None) or type(hook).__name__


def snapshot(config: ExperimentConfig) -> dict[str, dict[str, Any]]:
    """JSON-safe copy of ``config``; hooks are recorded by count and name only."""
    out = {}
    for section, values in config.to_dict().items():
        hooks = HOOK_KEYS.get(section, ())
        plain = {k: _plain(v) for k, v in values.items() if k not in hooks}
        for key in hooks:
            plain[f"{key}_count"] = len(values[key])
            plain[f"{key}_names"] = [_hook_name(h) for h in values[key]]
        out[section] = plain
    return out


def with_hooks(config: ExperimentConfig, **training_hooks) -> ExperimentConfig:
    """Return ``config`` with hook-valued training keys replaced."""
    return replace(config, training=replace(config.training, **{k: tuple(v) for k, v in training_hooks.items()}))
