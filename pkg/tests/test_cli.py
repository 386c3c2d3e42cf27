import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from conftest import tiny_config
from transferkit.cli import main


@pytest.fixture
def config_file(dataset, tmp_path):
    cfg = tiny_config(dataset, tmp_path / "weights", training={"epochs": 2})
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture
def run_dir(config_file, tmp_path, capsys):
    assert main(["run", "--config", str(config_file), "--out", str(tmp_path / "runs"), "--seed", "3"]) == 0
    return Path(capsys.readouterr().out.strip().splitlines()[-1])


def test_run_prints_run_dir(run_dir, tmp_path):
    assert run_dir.parent == tmp_path / "runs"
    assert run_dir.name.startswith("run-")
    assert (run_dir / "results.json").exists() and (run_dir / "model.pt").exists()


def test_override_beats_config_file(config_file, tmp_path, capsys):
    argv = ["run", "--config", str(config_file), "--set", "training.epochs=1", "--out", str(tmp_path / "o")]
    assert main(argv) == 0
    run = Path(capsys.readouterr().out.strip().splitlines()[-1])
    doc = json.loads((run / "results.json").read_text())
    assert doc["config"]["training"]["epochs"] == 1
    assert len(doc["history"]) == 1


def test_predict_to_stdout_and_file(run_dir, dataset, tmp_path, capsys):
    assert main(["predict", "--run-dir", str(run_dir), "--folder", dataset["test_data_folder"], "--sort-by", "variance"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "path,predicted_label,confidence,variance"
    assert len(lines) == 16
    variances = [float(line.rsplit(",", 1)[1]) for line in lines[1:]]
    assert variances == sorted(variances)
    out = tmp_path / "pred.csv"
    assert main(["predict", "--run-dir", str(run_dir), "--folder", dataset["test_data_folder"], "--out", str(out)]) == 0
    assert out.read_text().splitlines()[0] == lines[0]


def test_extract_writes_npz(run_dir, tmp_path, capsys):
    out = tmp_path / "feats"
    assert main(["extract", "--run-dir", str(run_dir), "--layer-name", "dense_1", "--out", str(out)]) == 0
    files = sorted(p.name for p in out.iterdir())
    assert files == [f"features_{s}.npz" for s in ("external_test", "test", "train", "val")]
    with np.load(out / "features_val.npz") as data:
        assert data["X"].shape == (15, 16)
        assert [Path(p).parent.name for p in data["paths"]] == [["blue", "green", "red"][i] for i in data["y"]]


def test_extract_by_index_defaults_into_run_dir(run_dir, capsys):
    assert main(["extract", "--run-dir", str(run_dir), "--layer-index", "-3"]) == 0
    assert (run_dir / "features" / "features_train.npz").exists()


def test_export_command(run_dir, tmp_path, capsys):
    assert main(["export", "--run-dir", str(run_dir), "--out", str(tmp_path / "copy")]) == 0
    copy = Path(capsys.readouterr().out.strip())
    assert copy.parent == tmp_path / "copy" and copy.name.startswith("run-")
    assert main(["export", "--run-dir", str(run_dir), "--out", str(tmp_path / "copy"), "--fixed"]) == 0
    assert (tmp_path / "copy" / "latest" / "results.json").exists()


def test_missing_required_argument(capsys):
    assert main(["predict", "--folder", "x"]) == 2
    assert "--run-dir" in capsys.readouterr().err


def test_unknown_config_key_fails_cleanly(tmp_path, capsys):
    assert main(["run", "--set", "training.epochz=3", "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and "epochz" in err[0]


def test_invalid_config_reports_violation(dataset, tmp_path, capsys):
    argv = ["run", "--set", f"paths.train_val_data={dataset['train_val_data']}", "--set", "model.dropout_rate=2"]
    assert main(argv + ["--out", str(tmp_path)]) == 1
    assert "dropout_rate" in capsys.readouterr().err


def test_missing_run_dir(tmp_path, capsys):
    assert main(["predict", "--run-dir", str(tmp_path / "nope"), "--folder", str(tmp_path)]) == 1
    assert capsys.readouterr().err.startswith("transferkit predict: error:")


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "transferkit", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "run" in proc.stdout and "predict" in proc.stdout
    bad = subprocess.run([sys.executable, "-m", "transferkit", "bogus"], capture_output=True, text=True)
    assert bad.returncode == 2
