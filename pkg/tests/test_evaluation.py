import itertools
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_config
from transferkit.config import apply_defaults
from transferkit.data import infer_task
from transferkit.errors import EvaluationError
from transferkit.evaluation import (
    EvaluationReport,
    ResultsBundle,
    auto_evaluate,
    build_results,
    evaluate,
    metric_extrema,
    render_confusion,
    render_curves,
    render_minmax,
)
from transferkit.experiment import TransferExperiment
from transferkit.metrics import argmax_labels, confusion, normalize_metric
from transferkit.trainer import CheckpointStore, EpochRecord, TrainingHistory

PNG_MAGIC = b"\x89PNG"


def tally(y_true, y_pred, k):
    cm = [[0] * k for _ in range(k)]
    for t, p in zip(y_true, y_pred):
        cm[t][p] += 1
    return np.array(cm)


def test_confusion_examples():
    assert confusion([0, 0, 1, 1], [0, 1, 1, 1], 2).tolist() == [[1, 1], [0, 2]]
    assert confusion([], [], 3).tolist() == [[0] * 3] * 3
    with pytest.raises(EvaluationError):
        confusion([0, 3], [0, 1], 3)
    with pytest.raises(EvaluationError):
        confusion([0, 1], [0], 2)


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_confusion_matches_tally(data):
    k = data.draw(st.sampled_from([2, 3, 5]))
    n = data.draw(st.integers(1, 60))
    y_true = data.draw(st.lists(st.integers(0, k - 1), min_size=n, max_size=n))
    y_pred = data.draw(st.lists(st.integers(0, k - 1), min_size=n, max_size=n))
    cm = confusion(y_true, y_pred, k)
    assert np.array_equal(cm, tally(y_true, y_pred, k))
    assert cm.sum() == n
    task = infer_task([f"c{i}" for i in range(k)])
    probs = np.eye(k)[y_pred] if k > 2 else np.array(y_pred, dtype=float)
    accuracy = normalize_metric("accuracy", task)(y_true, probs)
    assert abs(np.trace(cm) / cm.sum() - accuracy) <= 1e-9
    assert abs(accuracy - np.mean(np.array(y_true) == np.array(y_pred))) <= 1e-9


def scan_argmax(row):
    best = 0
    for j in range(1, len(row)):
        if row[j] > row[best]:
            best = j
    return best


@settings(max_examples=200, deadline=None)
@given(st.lists(st.lists(st.sampled_from([0.0, 0.25, 0.5]), min_size=4, max_size=4), min_size=1, max_size=20))
def test_argmax_ties_lowest_index(rows):
    task = infer_task(list("abcd"))
    assert argmax_labels(rows, task).tolist() == [scan_argmax(r) for r in rows]


def test_argmax_all_ties_exhaustive():
    task = infer_task(list("abc"))
    for row in itertools.product([0.0, 0.5, 1.0], repeat=3):
        assert argmax_labels([row], task)[0] == scan_argmax(row)


def test_binary_threshold():
    task = infer_task(["n", "p"])
    assert argmax_labels([[0.49], [0.5], [0.9]], task).tolist() == [0, 1, 1]
    with pytest.raises(EvaluationError):
        argmax_labels(np.ones((2, 2)), task)


def test_macro_recall_and_precision_oracle():
    task = infer_task(list("abc"))
    y_true = [0, 0, 0, 1, 1, 2]
    y_pred = [0, 1, 1, 1, 1, 0]
    probs = np.eye(3)[y_pred]
    # per-class recall 1/3, 1, 0 ; precision 1/2, 1/2, 0 (no predictions of class 2)
    assert normalize_metric("recall", task)(y_true, probs) == pytest.approx((1 / 3 + 1 + 0) / 3)
    assert normalize_metric("precision", task)(y_true, probs) == pytest.approx((1 / 2 + 1 / 2 + 0) / 3)


def test_binary_recall_precision():
    task = infer_task(["n", "p"])
    y_true = [1, 1, 1, 0, 0]
    probs = [0.9, 0.2, 0.7, 0.6, 0.1]
    assert normalize_metric("recall", task)(y_true, probs) == pytest.approx(2 / 3)
    assert normalize_metric("precision", task)(y_true, probs) == pytest.approx(2 / 3)


def history_of(values, warm=0):
    records = []
    for i, v in enumerate(values):
        phase = "warm" if i < warm else "main"
        records.append(EpochRecord(phase, i if i < warm else i - warm, {"loss": v, "val_loss": v + 0.1}, 0.0))
    return TrainingHistory(records)


def test_metric_extrema():
    ext = metric_extrema(history_of([0.5, 0.2, 0.9, 0.2], warm=1))
    assert ext == {"val_loss": {"min": 0.30000000000000004, "min_epoch": 1, "max": 1.0, "max_epoch": 2}}


def test_plots_written(tmp_path):
    history = history_of([0.9, 0.5, 0.4], warm=1)
    curves = render_curves(history, tmp_path)
    assert [p.name for p in curves] == ["curve_loss.png"]
    minmax = render_minmax(history, tmp_path)
    report = EvaluationReport(
        {"val": {"accuracy": 1.0}, "test": {"accuracy": 0.5}},
        {"val": np.eye(2, dtype=int), "test": np.array([[1, 1], [0, 0]])},
        {"a": 0, "b": 1},
    )
    conf = render_confusion(report, tmp_path)
    assert [p.name for p in conf] == ["confusion_test.png"]
    for path in [*curves, minmax, *conf]:
        assert path.read_bytes()[:4] == PNG_MAGIC
    with pytest.raises(EvaluationError):
        render_curves(TrainingHistory(), tmp_path)


def test_trained_run_report(trained_run, dataset):
    experiment, model, results = trained_run
    report = results.report
    assert report.splits == ["val", "test", "external_test"]
    assert report.weights == "best"
    for split, cm in report.confusion.items():
        assert cm.sum() == len(experiment.bundle.labels(split))
        assert report.metrics[split]["accuracy"] == pytest.approx(np.trace(cm) / cm.sum(), abs=1e-12)
        assert set(report.metrics[split]) == {"loss", "accuracy", "recall", "precision"}
    assert report.class_index == {"blue": 0, "green": 1, "red": 2}


def test_trained_run_artifacts(trained_run):
    _, _, results = trained_run
    plots = {Path(p).name for p in results.artifact_paths["plots"]}
    assert plots == {
        "curve_loss.png",
        "curve_accuracy.png",
        "curve_recall.png",
        "curve_precision.png",
        "minmax.png",
        "confusion_test.png",
        "confusion_external_test.png",
    }
    assert len(results.artifact_paths["weights"]) == 1
    for group in results.artifact_paths.values():
        assert all(Path(p).exists() for p in group)
    assert [r.phase for r in results.history.records] == ["warm"] + ["main"] * 5


def test_results_round_trip(trained_run):
    _, _, results = trained_run
    doc = json.loads(json.dumps(results.to_dict()))
    again = ResultsBundle.from_dict(doc)
    assert again.metric_values() == results.metric_values()
    assert again.to_dict() == doc
    assert doc["config"]["training"]["warm_pretrain_epochs"] == 1
    assert doc["best"]["metric"] == "val_loss" and doc["best"]["mode"] == "min"


def test_best_matches_history(trained_run):
    _, _, results = trained_run
    main = results.history.phase("main").series("val_loss")
    assert results.best["epoch"] == int(np.argmin(main))
    assert results.best["value"] == min(main)


def test_flags_off_only_weights(dataset, tmp_path):
    cfg = apply_defaults(tiny_config(dataset, tmp_path / "w", training={"epochs": 1}))
    _, results = TransferExperiment(config=cfg, seed=2).run()
    assert list(results.artifact_paths) == ["weights"]
    assert not (tmp_path / "w" / "plots").exists()


def test_no_saved_weights(dataset, tmp_path):
    cfg = apply_defaults(
        tiny_config(dataset, tmp_path / "w", training={"epochs": 1}, saving={"save_weights": False})
    )
    _, results = TransferExperiment(config=cfg, seed=2).run()
    assert results.artifact_paths == {}
    assert results.best["epoch"] == 0


def test_auto_mode_uses_best_weights(make_bundle, tiny_model, tmp_path):
    bundle = make_bundle()
    model = tiny_model(bundle.task)
    store = CheckpointStore(tmp_path, save_files=False)
    store.update(0, 1.0, model)
    best_report = evaluate(model, bundle)
    for p in model.network.parameters():
        p.data.add_(0.5)
    current = auto_evaluate(model, store, bundle, auto_mode=False)
    assert current.weights == "current"
    auto = auto_evaluate(model, store, bundle, auto_mode=True)
    assert auto.weights == "best"
    for split in best_report.metrics:
        assert auto.metrics[split] == best_report.metrics[split]
        assert np.array_equal(auto.confusion[split], best_report.confusion[split])


def test_auto_mode_without_checkpoint(make_bundle, tiny_model, tmp_path):
    bundle = make_bundle()
    with pytest.raises(EvaluationError):
        auto_evaluate(tiny_model(bundle.task), CheckpointStore(tmp_path, save_files=False), bundle)


def test_external_split_absent(make_bundle, tiny_model, dataset):
    paths = {k: v for k, v in dataset.items() if k != "external_test_data_folder"}
    bundle = make_bundle(paths=paths)
    assert evaluate(tiny_model(bundle.task), bundle).splits == ["val", "test"]


def test_build_results_checks_artifacts(make_bundle, tiny_model, tmp_path):
    bundle = make_bundle()
    model = tiny_model(bundle.task)
    store = CheckpointStore(tmp_path, save_files=False)
    report = evaluate(model, bundle)
    with pytest.raises(EvaluationError):
        build_results({}, history_of([1.0]), report, store)
    store.update(0, 1.0, model)
    with pytest.raises(EvaluationError, match="missing.png"):
        build_results({}, history_of([1.0]), report, store, {"plots": [tmp_path / "missing.png"]})
    ok = build_results({}, [history_of([1.0]), history_of([0.5])], report, store)
    assert len(ok.history) == 2
