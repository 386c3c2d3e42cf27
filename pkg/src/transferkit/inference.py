"""Folder prediction, layer feature extraction and run export/reload."""

from __future__ import annotations

import csv
import json
import logging
import os
import random
import shutil
import string
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import apply_defaults
from .data import DataError, DatasetBundle, infer_task, is_image_file, load_image
from .errors import ExportError, TransferKitError
from .evaluation import ResultsBundle
from .model import BuiltModel, build_from_config

logger = logging.getLogger(__name__)

SORT_KEYS = ("variance", "confidence", "none")
NORMALIZATION_TOLERANCE = 1e-3
RESULTS_FILE = "results.json"
MANIFEST_FILE = "manifest.json"
MODEL_FILE = "model.pt"
PLOTS_DIR = "plots"
FIXED_RUN_DIR = "latest"
MAX_NAME_ATTEMPTS = 32


def prediction_variance(probs) -> float:
    """Population variance of a probability vector across its labels."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    if p.size == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > NORMALIZATION_TOLERANCE:
        raise ValueError(f"expected a normalised probability vector, got {p.tolist()}")
    return float(np.mean((p - p.mean()) ** 2))


@dataclass
class PredictionRecord:
    path: Path
    predicted_label: str
    confidence: float
    variance: float
    probabilities: np.ndarray
    image: np.ndarray | None = None


def _probability_vector(row: np.ndarray, mode: str) -> np.ndarray:
    if mode == "binary":
        p = float(row[0])
        return np.array([1.0 - p, p])
    return np.asarray(row, dtype=np.float64)


def model_predict(
    model: BuiltModel,
    folder: str | os.PathLike,
    sort_by: str = "none",
    include_image: bool = False,
    batch_size: int = 32,
) -> list[PredictionRecord]:
    """Predict every image under ``folder`` (searched recursively).

    Images go through the same resize and preprocessing as training, without
    augmentation. ``sort_by="variance"`` or ``"confidence"`` orders ascending,
    so the least decisive predictions come first; ``"none"`` keeps path order.
    Undecodable files are skipped with a warning.
    """
    if sort_by not in SORT_KEYS:
        raise ValueError(f"sort_by must be one of {SORT_KEYS}, got {sort_by!r}")
    folder = Path(folder)
    if not folder.is_dir():
        raise DataError(f"prediction folder {folder} does not exist")
    paths = sorted((p for p in folder.rglob("*") if is_image_file(p)), key=lambda p: str(p))
    images, kept = [], []
    for path in paths:
        try:
            images.append(load_image(path, model.image_size))
            kept.append(path)
        except DataError as exc:
            warnings.warn(f"skipping {path}: {exc}", stacklevel=2)
    if not kept:
        raise DataError(f"no decodable images in {folder}")

    names = model.task.class_names
    records = []
    for start in range(0, len(kept), batch_size):
        chunk = np.stack(images[start : start + batch_size]).astype(np.float32)
        probs = model.predict_proba(model.backbone.preprocess(torch.from_numpy(chunk))).numpy()
        for offset, row in enumerate(probs):
            i = start + offset
            vec = _probability_vector(row, model.task.mode)
            label_id = int(row[0] >= 0.5) if model.task.mode == "binary" else int(np.argmax(vec))
            records.append(
                PredictionRecord(
                    path=kept[i],
                    predicted_label=names[label_id],
                    confidence=float(vec.max()),
                    variance=prediction_variance(vec),
                    probabilities=vec,
                    image=images[i] if include_image else None,
                )
            )
    if sort_by != "none":
        records.sort(key=lambda r: getattr(r, sort_by))
    return records


def write_predictions_csv(records: Sequence[PredictionRecord], out) -> None:
    """CSV with columns path, predicted_label, confidence, variance; ``out`` is a path or text stream."""
    own = not hasattr(out, "write")
    fh = open(out, "w", newline="", encoding="utf-8") if own else out
    try:
        writer = csv.writer(fh)
        writer.writerow(["path", "predicted_label", "confidence", "variance"])
        for r in records:
            writer.writerow([str(r.path), r.predicted_label, repr(r.confidence), repr(r.variance)])
    finally:
        if own:
            fh.close()


@dataclass
class FeatureSplit:
    layer: str
    features: dict[str, np.ndarray] = field(default_factory=dict)
    labels: dict[str, np.ndarray] = field(default_factory=dict)

    def as_tuple(self) -> tuple:
        """``(X_train, y_train, X_val, y_val, X_test, y_test, X_ext, y_ext)``; absent splits are None."""
        out = []
        for split in ("train", "val", "test", "external_test"):
            out += [self.features.get(split), self.labels.get(split)]
        return tuple(out)


def resolve_layer(model: BuiltModel, layer_index: int | None = None, layer_name: str | None = None) -> str:
    if (layer_index is None) == (layer_name is None):
        raise ValueError("give exactly one of layer_index or layer_name")
    names = model.layer_names
    if layer_name is not None:
        if layer_name not in names:
            raise ValueError(f"unknown layer {layer_name!r}; layers: {', '.join(names)}")
        return layer_name
    try:
        return names[layer_index]
    except IndexError:
        raise ValueError(f"layer_index {layer_index} out of range for {len(names)} layers") from None


def model_feature_extract(
    model: BuiltModel,
    bundle: DatasetBundle,
    layer_index: int | None = None,
    layer_name: str | None = None,
) -> FeatureSplit:
    """Activations of one layer for every split, rows in the split's index order.

    Feature maps are flattened per sample in (height, width, channel) order.
    """
    name = resolve_layer(model, layer_index, layer_name)
    captured = []

    def hook(module, inputs, output):
        out = output.detach()
        if out.ndim == 4:
            out = out.permute(0, 2, 3, 1)
        captured.append(out.reshape(out.shape[0], -1).clone())

    handle = model.layer(name).register_forward_hook(hook)
    result = FeatureSplit(layer=name)
    try:
        model.network.eval()
        with torch.no_grad():
            for split in bundle.splits:
                captured.clear()
                for images, _ in bundle.batches(split, augment=False, shuffle=False):
                    model.network(images)
                result.features[split] = torch.cat(captured).numpy()
                result.labels[split] = bundle.labels(split)
    finally:
        handle.remove()
    return result


# --- export ---------------------------------------------------------------


def random_run_id(rng: random.Random) -> str:
    alphabet = string.ascii_lowercase + string.digits
    return "run-" + "".join(rng.choice(alphabet) for _ in range(8))


def _make_run_dir(base: Path, additive: bool, rng: random.Random | None) -> Path:
    try:
        base.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ExportError(f"cannot create export base {base}: {exc}") from exc
    if not additive:
        target = base / FIXED_RUN_DIR
        if target.exists():
            shutil.rmtree(target)
        target.mkdir()
        return target
    rng = rng or random.Random(os.urandom(16))
    for _ in range(MAX_NAME_ATTEMPTS):
        target = base / random_run_id(rng)
        try:
            target.mkdir()
            return target
        except FileExistsError:
            continue
        except OSError as exc:
            raise ExportError(f"cannot create export directory {target}: {exc}") from exc
    raise ExportError(f"could not find a free run directory name under {base}")


def export_all(
    results: ResultsBundle,
    base_path: str | os.PathLike,
    export_model: bool = True,
    additive: bool = True,
    model: BuiltModel | None = None,
    weights: dict | None = None,
    rng: random.Random | None = None,
) -> Path:
    """Write results, best weights, plots and optionally the model to a run directory.

    ``additive=True`` creates ``<base>/run-<8 random chars>`` per call;
    otherwise ``<base>/latest`` is replaced. ``weights`` is the best state
    dict; when omitted the weights file recorded in ``results`` is copied.
    """
    if export_model and model is None:
        raise ExportError("export_model=True needs the trained model")
    run_dir = _make_run_dir(Path(base_path), additive, rng)
    try:
        artifacts: dict[str, list[str]] = {}
        best = results.best
        weights_name = f"weights_best_{best['metric']}_{best['epoch']}.pt"
        if weights is not None:
            torch.save(weights, run_dir / weights_name)
            artifacts["weights"] = [weights_name]
        elif results.artifact_paths.get("weights"):
            src = Path(results.artifact_paths["weights"][0])
            shutil.copy2(src, run_dir / src.name)
            artifacts["weights"] = [src.name]
        plots = results.artifact_paths.get("plots", [])
        if plots:
            (run_dir / PLOTS_DIR).mkdir()
            artifacts["plots"] = []
            for src in map(Path, plots):
                shutil.copy2(src, run_dir / PLOTS_DIR / src.name)
                artifacts["plots"].append(f"{PLOTS_DIR}/{src.name}")
        if export_model:
            torch.save(
                {
                    "format": 1,
                    "config": results.config,
                    "class_index": dict(model.task.class_index),
                    "image_size": list(model.image_size),
                    "state_dict": model.state_dict(),
                },
                run_dir / MODEL_FILE,
            )
            artifacts["model"] = [MODEL_FILE]
        doc = results.to_dict()
        doc["artifacts"] = artifacts
        doc["run_id"] = run_dir.name
        (run_dir / RESULTS_FILE).write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
        files = sorted(p for p in run_dir.rglob("*") if p.is_file() and p.name != MANIFEST_FILE)
        manifest = {
            "run_id": run_dir.name,
            "files": [{"path": p.relative_to(run_dir).as_posix(), "bytes": p.stat().st_size} for p in files],
        }
        (run_dir / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    except OSError as exc:
        raise ExportError(f"export to {run_dir} failed: {exc}") from exc
    logger.info("exported run to %s", run_dir)
    return run_dir


def load_results(run_dir: str | os.PathLike) -> ResultsBundle:
    """Read ``results.json`` back; artifact paths are made absolute."""
    run_dir = Path(run_dir)
    path = run_dir / RESULTS_FILE
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ExportError(f"cannot read {path}: {exc}") from exc
    bundle = ResultsBundle.from_dict(doc)
    bundle.artifact_paths = {k: [str(run_dir / p) for p in v] for k, v in bundle.artifact_paths.items()}
    return bundle


def load_manifest(run_dir: str | os.PathLike) -> dict:
    path = Path(run_dir) / MANIFEST_FILE
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ExportError(f"cannot read {path}: {exc}") from exc


def load_model(run_dir: str | os.PathLike) -> BuiltModel:
    """Rebuild the trained network from an exported run.

    Uses ``model.pt`` when present, otherwise the best-weights file.
    """
    run_dir = Path(run_dir)
    results = load_results(run_dir)
    cfg = apply_defaults(results.config)
    task = infer_task(list(results.class_index))
    model_file = run_dir / MODEL_FILE
    try:
        if model_file.exists():
            state = torch.load(model_file, map_location="cpu", weights_only=True)["state_dict"]
        elif results.artifact_paths.get("weights"):
            state = torch.load(results.artifact_paths["weights"][0], map_location="cpu", weights_only=True)
        else:
            raise ExportError(f"{run_dir} holds neither {MODEL_FILE} nor a weights file")
        model = build_from_config(cfg, task, pretrained="none")
        model.load_state_dict(state)
    except ExportError:
        raise
    except (OSError, RuntimeError, KeyError, TransferKitError) as exc:
        raise ExportError(f"cannot load model from {run_dir}: {exc}") from exc
    return model


def reexport(
    run_dir: str | os.PathLike, base_path: str | os.PathLike, additive: bool = True, rng: random.Random | None = None
) -> Path:
    """Copy an exported run (results, weights, plots, model) into a new run directory."""
    src = Path(run_dir)
    results = load_results(src)
    model = load_model(src) if (src / MODEL_FILE).exists() else None
    return export_all(results, base_path, export_model=model is not None, additive=additive, model=model, rng=rng)
