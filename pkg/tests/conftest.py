from __future__ import annotations

import copy

import numpy as np
import pytest
import torch

from transferkit.backbones import get_backbone
from transferkit.config import apply_defaults
from transferkit.data import (
    build_bundle,
    discover_splits,
    infer_task,
    resolve_augmentation,
)
from transferkit.experiment import TransferExperiment
from transferkit.model import HeadSpec, assemble, build_head
from transferkit.synthetic import make_dataset

QUIET_MISC = {"show_summary": False, "plot_curves": False, "show_min_max_plot": False, "plot_conf": False}


@pytest.fixture(scope="session")
def dataset(tmp_path_factory):
    """3 classes, 20/5/5 images per class, plus a 4-per-class external split."""
    root = tmp_path_factory.mktemp("synthetic")
    return {k: str(v) for k, v in make_dataset(root, counts=(20, 5, 5), external=4, seed=3).items()}


@pytest.fixture(scope="session")
def binary_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic_binary")
    return {k: str(v) for k, v in make_dataset(root, classes=("blue", "red"), counts=(12, 4, 4), seed=5).items()}


def tiny_config(paths: dict, weights_dir, **sections) -> dict:
    """Partial config for a fast TinyNet run; ``sections`` are merged per section."""
    base = {
        "paths": dict(paths),
        "model": {
            "transfer_arch": "TinyNet",
            "pre_trained": "none",
            "dense_layers": [16],
            "regularization": "None",
            "unfreeze_block": ["cblock1", "cblock2"],
        },
        "training": {
            "epochs": 5,
            "batch_size": 8,
            "learning_rate": 1e-3,
            "augmentation": "none",
            "warm_pretrain_dense": False,
        },
        "saving": {"save_weights_folder": str(weights_dir)},
        "misc": dict(QUIET_MISC),
    }
    out = copy.deepcopy(base)
    for section, values in sections.items():
        out.setdefault(section, {}).update(values)
    return out


@pytest.fixture
def make_bundle(dataset):
    def factory(batch_size=8, seed=0, augmentation="none", hooks=(), paths=None):
        p = paths or dataset
        layout = discover_splits(p["train_val_data"], p["test_data_folder"], p.get("external_test_data_folder"))
        task = infer_task(layout)
        handle = get_backbone("TinyNet", "none")
        plan = resolve_augmentation(augmentation, hooks)
        return build_bundle(layout, task, handle.input_size, handle.preprocess, plan, batch_size, seed)

    return factory


@pytest.fixture
def tiny_model():
    def factory(task, dense=(8,), bridge="Flatten", seed=0, **head_kwargs):
        torch.manual_seed(seed)
        handle = get_backbone("TinyNet", "none")
        head = build_head(task, HeadSpec(dense_layers=tuple(dense), bridge=bridge, **head_kwargs))
        return assemble(handle, head, bridge)

    return factory


@pytest.fixture(scope="session")
def trained_run(dataset, tmp_path_factory):
    """One finished TinyNet experiment shared by read-only tests."""
    weights = tmp_path_factory.mktemp("weights")
    cfg = tiny_config(
        dataset,
        weights,
        misc={"show_summary": False, "plot_curves": True, "show_min_max_plot": True, "plot_conf": True},
        training={"metrics": ["accuracy", "recall", "precision"], "warm_pretrain_dense": True, "warm_pretrain_epochs": 1},
    )
    experiment = TransferExperiment(config=apply_defaults(cfg), seed=11)
    model, results = experiment.run()
    return experiment, model, results


def random_probs(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    x = rng.random((n, k))
    return x / x.sum(axis=1, keepdims=True)


class ScriptedMetric:
    """Deterministic stub metric replaying ``series`` on the validation split.

    Each distinct set of validation predictions consumes the next value; seeing
    the same predictions again returns the value recorded for them, so a
    reloaded checkpoint re-evaluates to what it scored during training.
    """

    def __init__(self, series, val_size):
        self.series = list(series)
        self.val_size = val_size
        self.seen = {}

    def __call__(self, y_true, probs, task):
        if len(y_true) != self.val_size:
            return 0.0
        key = np.ascontiguousarray(probs).tobytes()
        if key not in self.seen:
            self.seen[key] = self.series[len(self.seen)]
        return self.seen[key]


@pytest.fixture
def scripted_metric():
    from transferkit.metrics import register_metric, unregister_metric

    names = []

    def factory(name, series, val_size):
        metric = ScriptedMetric(series, val_size)
        register_metric(name, metric)
        names.append(name)
        return metric

    yield factory
    for name in names:
        unregister_metric(name)
