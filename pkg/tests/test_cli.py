import csv
import json

import pytest

from cocoon.cli import main
from cocoon.persistence import FORMAT_VERSION

SMALL = """
num_queries = 20
num_classes = 4
train_scenes = 3
calib_scenes = 3
eval_scenes = 3
aligner_epochs = 15
datasets = linear_gaussian
n_samples = 1200
n_test = 100
n_seeds = 1
model_epochs = 3
regression_aligner_epochs = 10
"""

PIPELINE = [
    ["train-aligner"],
    ["calibrate"],
    ["simulate", "--corruption", "noise_A:2.0"],
    ["sweep", "--corruption", "blackout_A"],
    ["coverage"],
    ["report"],
]


def run_pipeline(out, config, seed=5):
    for cmd in PIPELINE:
        assert main(cmd + ["--config", str(config), "--out", str(out), "--seed", str(seed)]) == 0, cmd
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


@pytest.fixture(scope="module")
def config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.cfg"
    path.write_text(SMALL)
    return path


@pytest.fixture(scope="module")
def outputs(tmp_path_factory, config):
    a, b = tmp_path_factory.mktemp("run_a"), tmp_path_factory.mktemp("run_b")
    return a, run_pipeline(a, config), run_pipeline(b, config)


def test_every_command_is_bit_identical(outputs):
    _, first, second = outputs
    assert set(first) == {"model.cocoon.json", "calibrated.cocoon.json", "sim_result.json", "sweep.csv",
                          "coverage_report.json", "coverage_report.csv", "report.json"}
    for name in first:
        assert first[name] == second[name], name


def test_seed_is_recorded(outputs):
    out, _, _ = outputs
    assert json.loads((out / "sim_result.json").read_text())["master_seed"] == 5
    assert json.loads((out / "report.json").read_text())["seed"] == 5
    with (out / "sweep.csv").open() as fh:
        assert {r["seed"] for r in csv.DictReader(fh)} == {"5"}
    assert json.loads((out / "model.cocoon.json").read_text())["seed"] == 5


def test_different_seed_changes_outputs(tmp_path, config, outputs):
    _, first, _ = outputs
    assert main(["train-aligner", "--config", str(config), "--out", str(tmp_path), "--seed", "6"]) == 0
    assert (tmp_path / "model.cocoon.json").read_bytes() != first["model.cocoon.json"]


def test_refuses_to_overwrite(outputs, config, capsys):
    out, _, _ = outputs
    assert main(["train-aligner", "--config", str(config), "--out", str(out), "--seed", "5"]) == 3
    assert "--force" in capsys.readouterr().err


def test_calibrate_without_artifact(tmp_path, capsys):
    assert main(["calibrate", "--out", str(tmp_path)]) == 3
    assert "missing artifact" in capsys.readouterr().err


def test_simulate_rejects_uncalibrated(outputs, tmp_path, config, capsys):
    out, _, _ = outputs
    code = main(["simulate", "--config", str(config), "--out", str(tmp_path),
                 "--artifact", str(out / "model.cocoon.json")])
    assert code == 3 and "calibrate first" in capsys.readouterr().err


def test_version_mismatch_exit_code(outputs, tmp_path, capsys):
    out, _, _ = outputs
    doc = json.loads((out / "calibrated.cocoon.json").read_text())
    doc["format_version"] = FORMAT_VERSION + 1
    (tmp_path / "future.json").write_text(json.dumps(doc))
    assert main(["simulate", "--out", str(tmp_path), "--artifact", str(tmp_path / "future.json")]) == 4
    err = capsys.readouterr().err
    assert str(FORMAT_VERSION + 1) in err and str(FORMAT_VERSION) in err


def test_config_errors_exit_3(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("n_seeds = lots\n")
    assert main(["coverage", "--config", str(bad), "--out", str(tmp_path)]) == 3
    assert "n_seeds" in capsys.readouterr().err
    assert main(["coverage", "--set", "datasets=moons", "--out", str(tmp_path)]) == 3


def test_unknown_corruption_exit_3(outputs, tmp_path):
    out, _, _ = outputs
    assert main(["sweep", "--out", str(tmp_path), "--artifact", str(out / "calibrated.cocoon.json"),
                 "--corruption", "fog"]) == 3


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["coverage", "--no-such-flag"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_report_on_empty_directory(tmp_path, capsys):
    assert main(["report", "--out", str(tmp_path)]) == 3
    assert "nothing to report" in capsys.readouterr().err


def test_coverage_from_csv(tmp_path, config):
    from cocoon.coverage import make_dataset
    from cocoon.persistence import save_dataset_csv

    X, y = make_dataset("heavy_tailed", 1200, seed=2)
    save_dataset_csv(tmp_path / "mine.csv", X, y)
    assert main(["coverage", "--config", str(config), "--out", str(tmp_path / "o"),
                 "--set", f"data_csv={tmp_path / 'mine.csv'}"]) == 0
    doc = json.loads((tmp_path / "o" / "coverage_report.json").read_text())
    assert doc["reports"][0]["dataset"] == "mine"
