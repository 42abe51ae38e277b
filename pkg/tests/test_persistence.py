import json

import numpy as np
import pytest

from cocoon.fusion_sim import SceneSpec, prepare_artifact
from cocoon.persistence import (FORMAT_VERSION, ArtifactVersionError, ConfigError, artifact_to_dict, load_artifact,
                                load_config, load_dataset_csv, save_artifact, save_dataset_csv)


@pytest.fixture(scope="module")
def artifact():
    spec = SceneSpec.default(0, num_queries=20, num_classes=4)
    return prepare_artifact(spec, 3, train_scenes=3, calib_scenes=3, epochs=10)


def test_csv_values(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("a,b,y\n1,2,3\n4.5,-1e-3,0\n")
    X, y, header = load_dataset_csv(path)
    np.testing.assert_array_equal(X, [[1.0, 2.0], [4.5, -1e-3]])
    np.testing.assert_array_equal(y, [3.0, 0.0])
    assert header == ["a", "b", "y"]


def test_csv_bad_cell_is_located(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("a,b,y\n1,2,3\nabc,5,6\n")
    with pytest.raises(ValueError, match=r"'abc' at \(row 2, column 1\)"):
        load_dataset_csv(path)


def test_csv_ragged_and_empty(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("a,b,y\n1,2\n")
    with pytest.raises(ValueError, match="row 1 has 2 cells"):
        load_dataset_csv(path)
    path.write_text("a,b,y\n")
    with pytest.raises(ValueError, match="no data rows"):
        load_dataset_csv(path)
    with pytest.raises(FileNotFoundError):
        load_dataset_csv(tmp_path / "missing.csv")


def test_csv_round_trip_full_precision(tmp_path):
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(30, 4)) * 1e3, rng.normal(size=30) / 7
    save_dataset_csv(tmp_path / "d.csv", X, y)
    X2, y2, _ = load_dataset_csv(tmp_path / "d.csv")
    assert np.array_equal(X, X2) and np.array_equal(y, y2)


def test_data_dir_lookup(tmp_path, monkeypatch):
    save_dataset_csv(tmp_path / "rel.csv", np.ones((2, 1)), [1.0, 2.0])
    monkeypatch.setenv("COCOON_DATA_DIR", str(tmp_path))
    monkeypatch.chdir(tmp_path.parent)
    _, y, _ = load_dataset_csv("rel.csv")
    np.testing.assert_array_equal(y, [1.0, 2.0])


def test_artifact_round_trip_is_exact(artifact, tmp_path):
    path = save_artifact(artifact, tmp_path / "a.cocoon.json")
    back = load_artifact(path)
    assert back == artifact
    assert back.calibrated and back.seed == 3
    assert all(np.array_equal(p.scores, q.scores) for p, q in zip(back.nc_pools, artifact.nc_pools))
    assert path.read_text() == save_artifact(back, tmp_path / "b.cocoon.json").read_text()


def test_artifact_refuses_overwrite(artifact, tmp_path):
    save_artifact(artifact, tmp_path / "a.json")
    with pytest.raises(FileExistsError, match="--force"):
        save_artifact(artifact, tmp_path / "a.json")
    save_artifact(artifact, tmp_path / "a.json", force=True)


def test_artifact_version_mismatch(artifact, tmp_path):
    doc = artifact_to_dict(artifact)
    doc["format_version"] = FORMAT_VERSION + 1
    (tmp_path / "a.json").write_text(json.dumps(doc))
    with pytest.raises(ArtifactVersionError, match=f"{FORMAT_VERSION + 1}.*{FORMAT_VERSION}"):
        load_artifact(tmp_path / "a.json")


def test_config_defaults_file_and_overrides(tmp_path):
    assert load_config()["alpha"] == 0.1
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nalpha = 0.2\nn_seeds = 3\n")
    cfg = load_config(path, ["n_seeds=7"])
    assert (cfg["alpha"], cfg["n_seeds"]) == (0.2, 7)


@pytest.mark.parametrize("text,match", [
    ("alhpa = 0.2\n", "unknown config key 'alhpa'"),
    ("n_seeds = five\n", "cannot read 'five' as int"),
    ("alpha = 1.5\n", "alpha must lie"),
    ("alpha\n", "malformed"),
])
def test_config_errors(tmp_path, text, match):
    path = tmp_path / "run.cfg"
    path.write_text(text)
    with pytest.raises(ConfigError, match=match):
        load_config(path)


def test_config_missing_and_bad_override(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.cfg")
    with pytest.raises(ConfigError, match="not key=value"):
        load_config(None, ["alpha"])
