"""One-call transfer-learning experiment: build, train, evaluate, report."""

from __future__ import annotations

import logging
import os
import random
from pathlib import Path

import numpy as np
import torch

from .backbones import get_backbone
from .config import ExperimentConfig, apply_defaults, ensure_valid
from .data import build_bundle, discover_splits, infer_task, resolve_augmentation
from .evaluation import ResultsBundle, auto_evaluate, build_results, render_confusion, render_curves, render_minmax
from .inference import FeatureSplit, export_all, model_feature_extract, model_predict
from .model import BuiltModel, HeadSpec, apply_freeze_policy, assemble, build_head, summary
from .trainer import CheckpointStore, build_optimizer, train, warm_pretrain

logger = logging.getLogger(__name__)

PLOTS_SUBDIR = "plots"


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


class TransferExperiment:
    """Transfer-learning image classifier driven by directory paths and a layered config.

    Example::

        experiment = TransferExperiment(
            paths={"train_val_data": "data/train_val", "test_data_folder": "data/test"},
            model={"transfer_arch": "VGG16", "dense_layers": [144, 89, 55], "unfreeze_block": ["cblock5"]},
            training={"epochs": 15, "learning_rate": 1e-4},
        )
        model, results = experiment.run()

    Each keyword takes one config section; unspecified keys use defaults.
    """

    def __init__(
        self,
        paths=None,
        model=None,
        training=None,
        evaluation=None,
        saving=None,
        misc=None,
        seed: int = 0,
        config: ExperimentConfig | None = None,
    ):
        if config is None:
            sections = {
                "paths": paths,
                "model": model,
                "training": training,
                "evaluation": evaluation,
                "saving": saving,
                "misc": misc,
            }
            config = apply_defaults({k: v for k, v in sections.items() if v is not None})
        self.config = ensure_valid(config)
        self.seed = int(seed)
        self.model: BuiltModel | None = None
        self.bundle = None
        self.layout = None
        self.task = None
        self.store: CheckpointStore | None = None
        self.results: ResultsBundle | None = None
        self._export_rng = random.Random(f"{self.seed}-{os.urandom(8).hex()}")

    def prepare_data(self, backbone=None):
        """Discover the splits, infer the task and build the batch iterators."""
        cfg = self.config
        self.layout = discover_splits(
            cfg.paths.train_val_data, cfg.paths.test_data_folder, cfg.paths.external_test_data_folder
        )
        self.task = infer_task(self.layout)
        if backbone is None:
            backbone = get_backbone(cfg.model.transfer_arch, "none")
        image_size = tuple(cfg.model.image_size or backbone.input_size)
        plan = resolve_augmentation(cfg.training.augmentation, cfg.training.custom_augmentation)
        self.bundle = build_bundle(
            self.layout, self.task, image_size, backbone.preprocess, plan, cfg.training.batch_size, self.seed
        )
        return self.bundle

    def prepare(self) -> BuiltModel:
        """Data iterators plus the assembled model with its freeze policy applied."""
        cfg = self.config
        seed_everything(self.seed)
        backbone = get_backbone(cfg.model.transfer_arch, cfg.model.pre_trained)
        self.prepare_data(backbone)
        head = build_head(self.task, HeadSpec.from_config(cfg.model))
        model = assemble(backbone, head, cfg.model.before_dense, self.bundle.image_size)
        self.model = apply_freeze_policy(model, cfg.model.unfreeze_block, cfg.model.freeze_up_to)
        if cfg.misc.show_summary:
            print(summary(self.model))
        return self.model

    def run(self) -> tuple[BuiltModel, ResultsBundle]:
        """Train, evaluate and render plots; returns ``(model, results)``."""
        cfg = self.config
        model = self.prepare()
        t = cfg.training
        factory = build_optimizer(t.optimizer_name, t.learning_rate, t.add_optimizer_params)
        out_dir = Path(cfg.saving.save_weights_folder)
        self.store = CheckpointStore(out_dir, cfg.saving.save_best_weights, save_files=cfg.saving.save_weights)

        warm_epochs = t.warm_pretrain_epochs if t.warm_pretrain_dense else 0
        warm = warm_pretrain(model, self.bundle, warm_epochs, factory, self.task, t.metrics, t.class_weights)
        main = train(model, self.bundle, cfg, t.callback, self.store, factory, epoch_offset=warm_epochs)
        report = auto_evaluate(model, self.store, self.bundle, self.task, cfg.evaluation.auto_mode, t.metrics)

        history = warm + main
        plots_dir = out_dir / PLOTS_SUBDIR
        plots = []
        if cfg.misc.plot_curves:
            plots += render_curves(history, plots_dir)
        if cfg.misc.show_min_max_plot:
            plots.append(render_minmax(history, plots_dir))
        if cfg.misc.plot_conf:
            plots += render_confusion(report, plots_dir)
        artifacts = {}
        if self.store.path is not None:
            artifacts["weights"] = [self.store.path]
        if plots:
            artifacts["plots"] = plots
        self.results = build_results(cfg, history, report, self.store, artifacts, seed=self.seed)
        for split, values in report.metrics.items():
            logger.info("%s: %s", split, values)
        return model, self.results

    def _require_model(self) -> BuiltModel:
        if self.model is None:
            raise RuntimeError("call run() before using the trained model")
        return self.model

    def model_predict(self, folder, sort_by: str = "none", include_image: bool = False):
        return model_predict(self._require_model(), folder, sort_by=sort_by, include_image=include_image)

    def model_feature_extract(self, layer_index: int | None = None, layer_name: str | None = None) -> FeatureSplit:
        return model_feature_extract(self._require_model(), self.bundle, layer_index, layer_name)

    def export_all(
        self, results: ResultsBundle | None = None, base_path="results", export_model: bool = True, additive: bool = True
    ) -> Path:
        results = results or self.results
        if results is None:
            raise RuntimeError("call run() before exporting")
        weights = self.store.best_state if self.store is not None else None
        return export_all(
            results,
            base_path,
            export_model=export_model,
            additive=additive,
            model=self._require_model() if export_model else None,
            weights=weights,
            rng=self._export_rng,
        )
