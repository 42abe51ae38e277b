"""Artifact files, dataset CSVs and run configuration."""

from __future__ import annotations

import configparser
import csv
import json
import os
from pathlib import Path

import numpy as np

from .aligner import FeatureImpressionSet
from .conformal import NCPool
from .fusion_sim import CalibrationArtifact, LinearHead
from .numerics import MlpParams

FORMAT_VERSION = 1
ARTIFACT_SUFFIX = ".cocoon.json"
DATA_DIR_ENV = "COCOON_DATA_DIR"


class ArtifactVersionError(ValueError):
    """The artifact was written with a different format version."""


class ConfigError(ValueError):
    """Malformed configuration or missing input file."""


# -- artifacts --------------------------------------------------------------

def _mlp_to_dict(p):
    return {"activation": p.activation, "weights": [w.tolist() for w in p.weights],
            "biases": [b.tolist() for b in p.biases]}


def _mlp_from_dict(d):
    # reshape keeps (out, 0) / (0,) shapes that nested lists cannot express
    weights = [np.array(w, dtype=float).reshape(len(w), -1) for w in d["weights"]]
    biases = [np.array(b, dtype=float).reshape(-1) for b in d["biases"]]
    return MlpParams(weights, biases, d["activation"])


def artifact_to_dict(artifact):
    """JSON-ready document; floats keep full precision through ``repr``."""
    return {
        "format_version": FORMAT_VERSION,
        "seed": artifact.seed,
        "config": artifact.config,
        "aligner": _mlp_to_dict(artifact.aligner),
        "fis": artifact.fis.nodes.tolist(),
        "nc_pools": [{"layer": p.layer, "class_scope": p.class_scope, "scores": p.scores.tolist()}
                     for p in artifact.nc_pools],
        "head": None if artifact.head is None else {"coef": artifact.head.coef.tolist(),
                                                    "intercept": artifact.head.intercept.tolist()},
    }


def artifact_from_dict(doc):
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ArtifactVersionError(
            f"artifact format_version {version} is not supported (this build reads version {FORMAT_VERSION})")
    head = doc.get("head")
    return CalibrationArtifact(
        aligner=_mlp_from_dict(doc["aligner"]),
        fis=FeatureImpressionSet(np.array(doc["fis"], dtype=float)),
        nc_pools=[NCPool(np.array(p["scores"], dtype=float), p["layer"], p["class_scope"]) for p in doc["nc_pools"]],
        head=None if head is None else LinearHead(np.array(head["coef"], dtype=float),
                                                  np.array(head["intercept"], dtype=float)),
        config=dict(doc.get("config") or {}),
        seed=int(doc["seed"]),
    )


def save_artifact(artifact, path, force=False):
    path = Path(path)
    check_writable(path, force)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(artifact_to_dict(artifact), sort_keys=True) + "\n")
    return path


def load_artifact(path):
    """Read an artifact; a wrong version raises :class:`ArtifactVersionError`,
    a truncated file ``json.JSONDecodeError``."""
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError(f"{path} does not hold an artifact document")
    return artifact_from_dict(doc)


def check_writable(path, force):
    if Path(path).exists() and not force:
        raise FileExistsError(f"{path} already exists; pass --force to overwrite")


def write_json(path, doc, force=False):
    path = Path(path)
    check_writable(path, force)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# -- datasets ---------------------------------------------------------------

def resolve_data_path(path):
    """``path`` as given if it exists, else relative to ``$COCOON_DATA_DIR``."""
    p = Path(path)
    if p.exists() or p.is_absolute():
        return p
    root = os.environ.get(DATA_DIR_ENV)
    if root and (Path(root) / p).exists():
        return Path(root) / p
    return p


def load_dataset_csv(path):
    """Numeric CSV with a header row; the last column is the target.

    Errors name the 1-based data row and column of the first bad cell.

    Returns
    -------
    X : ndarray of shape (n, d)
    y : ndarray of shape (n,)
    header : list of str
    """
    path = resolve_data_path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset {path} not found")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if not rows:
        raise ValueError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    if len(header) < 2:
        raise ValueError(f"{path} needs at least two columns (features and target)")
    if not body:
        raise ValueError(f"{path} has a header but no data rows")
    data = np.empty((len(body), len(header)))
    for i, row in enumerate(body, start=1):
        if len(row) != len(header):
            raise ValueError(f"{path}: row {i} has {len(row)} cells, header has {len(header)}")
        for j, cell in enumerate(row, start=1):
            try:
                data[i - 1, j - 1] = float(cell)
            except ValueError:
                raise ValueError(f"{path}: non-numeric value {cell!r} at (row {i}, column {j})") from None
    return data[:, :-1], data[:, -1], header


def save_dataset_csv(path, X, y, header=None):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    header = header or [f"x{j}" for j in range(X.shape[1])] + ["y"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row, t in zip(X, y):
            w.writerow([repr(float(v)) for v in row] + [repr(float(t))])


# -- configuration ----------------------------------------------------------

# every key, its type and default; an empty file is a valid config
CONFIG_SCHEMA = {
    # shared
    "alpha": (float, 0.1),
    # coverage harness
    "datasets": (str, "linear_gaussian,sinusoidal_heteroscedastic,heavy_tailed"),
    "data_csv": (str, ""),
    "n_samples": (int, 4000),
    "n_test": (int, 500),
    "n_seeds": (int, 5),
    "model_epochs": (int, 60),
    "regression_aligner_epochs": (int, 500),
    # simulator family and training
    "family_seed": (int, 0),
    "num_classes": (int, 10),
    "num_queries": (int, 60),
    "num_layers": (int, 6),
    "feature_dim": (int, 8),
    "matched_fraction": (float, 0.5),
    "train_scenes": (int, 20),
    "calib_scenes": (int, 20),
    "eval_scenes": (int, 40),
    "aligned_dim": (int, 16),
    "aligner_hidden": (int, 32),
    "aligner_epochs": (int, 200),
    "learning_rate": (float, 1e-3),
    "clip_threshold": (float, 0.7),
    "corruption": (str, "none"),
    "severity": (str, ""),
    # file names
    "artifact": (str, "model.cocoon.json"),
    "calibrated_artifact": (str, "calibrated.cocoon.json"),
}


def _convert(key, raw):
    kind, _ = CONFIG_SCHEMA[key]
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot read {raw!r} as {kind.__name__}") from None


def load_config(path=None, overrides=()):
    """Flat ``key = value`` file (``#`` comments) merged over the defaults.

    ``overrides`` are ``"key=value"`` strings applied last. Unknown keys and
    unreadable values raise :class:`ConfigError`.
    """
    cfg = {k: d for k, (_, d) in CONFIG_SCHEMA.items()}
    items = []
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string("[run]\n" + p.read_text())
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {p}: {exc}") from None
        items.extend(parser.items("run"))
    for text in overrides:
        key, sep, value = text.partition("=")
        if not sep:
            raise ConfigError(f"override {text!r} is not key=value")
        items.append((key.strip(), value.strip()))
    for key, value in items:
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _convert(key, value)
    if not 0 < cfg["alpha"] < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {cfg['alpha']}")
    return cfg
