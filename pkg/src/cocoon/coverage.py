"""Repeated-split coverage experiment for the three conformal regressors."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import (BasicCPRegressor, CocoonCPRegressor, FeatureCPRegressor, make_y_grid,
                        train_regression_aligner, train_regression_model)
from .seeding import stream_seed

logger = logging.getLogger(__name__)

METHODS = ("basic_cp", "feature_cp", "cocoon_nc")
CSV_COLUMNS = ("method", "mean", "std", "abs_diff", "mean_width")


# -- datasets ---------------------------------------------------------------

def _linear_gaussian(rng, n, d):
    X = rng.normal(size=(n, d))
    beta = np.linspace(1.0, -1.0, d)
    return X, X @ beta + rng.normal(size=n)


def _sinusoidal(rng, n, d):
    X = rng.uniform(-3, 3, size=(n, d))
    scale = 0.2 + 0.6 * np.abs(X[:, 0])
    y = 2.0 * np.sin(X[:, 0]) + 0.5 * X[:, 1] + scale * rng.normal(size=n)
    return X, y


def _heavy_tailed(rng, n, d):
    X = rng.normal(size=(n, d))
    beta = np.linspace(-1.0, 1.0, d)
    return X, X @ beta + 0.7 * rng.standard_t(3, size=n)


DATASETS = {
    "linear_gaussian": _linear_gaussian,
    "sinusoidal_heteroscedastic": _sinusoidal,
    "heavy_tailed": _heavy_tailed,
}


def make_dataset(name, n=4000, d=8, seed=0):
    """One of the built-in synthetic regression sets as ``(X, y)``.

    The default 4000 rows give 500 test rows and 3500 rows split 6:1 into
    3000 proper-training and 500 calibration rows.
    """
    try:
        gen = DATASETS[name]
    except KeyError:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(DATASETS)}") from None
    return gen(np.random.default_rng(stream_seed(seed, f"dataset/{name}")), n, d)


# -- splitting --------------------------------------------------------------

@dataclass
class DatasetSplit:
    """Standardised proper-training / calibration / test partitions."""

    X_train: np.ndarray
    y_train: np.ndarray
    X_calib: np.ndarray
    y_calib: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    seed: int
    calib_ratio: int = 6
    indices: dict = field(default_factory=dict)


def split_dataset(X, y, seed, n_test=500, calib_ratio=6):
    """Shuffle, hold out ``n_test`` rows, then split the rest ``calib_ratio:1``.

    The calibration part has ``floor(m / (calib_ratio + 1))`` rows where ``m``
    is the number of non-test rows. Features and target are z-scored with
    statistics of the proper training part only.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = X.shape[0]
    if n_test >= n:
        raise ValueError(f"n_test={n_test} leaves no rows for training ({n} rows)")
    perm = np.random.default_rng(stream_seed(seed, "split")).permutation(n)
    test, rest = perm[:n_test], perm[n_test:]
    n_cal = rest.size // (calib_ratio + 1)
    calib, train = rest[:n_cal], rest[n_cal:]
    mu, sd = X[train].mean(axis=0), X[train].std(axis=0)
    sd[sd == 0] = 1.0
    y_mu, y_sd = y[train].mean(), y[train].std()
    if y_sd == 0:
        raise ValueError("target is constant on the training split")

    def zx(idx):
        return (X[idx] - mu) / sd

    def zy(idx):
        return (y[idx] - y_mu) / y_sd

    return DatasetSplit(zx(train), zy(train), zx(calib), zy(calib), zx(test), zy(test), seed, calib_ratio,
                        {"train": train, "calib": calib, "test": test})


# -- trials -----------------------------------------------------------------

@dataclass
class TrialResult:
    seed: int
    coverage: dict
    width: dict
    skipped: bool = False


def fit_models(split, seed, model_kwargs=None, aligner_kwargs=None):
    """Train the regression model and the regression aligner on the proper part only."""
    model = train_regression_model(split.X_train, split.y_train, seed=stream_seed(seed, "model"),
                                   **(model_kwargs or {}))
    aligner, fis = train_regression_aligner(model, split.X_train, split.y_train,
                                            seed=stream_seed(seed, "aligner"), **(aligner_kwargs or {}))
    return model, aligner, fis


def run_coverage_trial(X, y, alpha=0.1, seed=0, n_test=500, methods=METHODS, model_kwargs=None,
                       aligner_kwargs=None):
    """Split, train, calibrate and measure test coverage and mean width per method."""
    try:
        split = split_dataset(X, y, seed, n_test)
    except ValueError as exc:
        logger.warning("trial %d skipped: %s", seed, exc)
        return TrialResult(seed, {}, {}, skipped=True)
    model, aligner, fis = fit_models(split, seed, model_kwargs, aligner_kwargs)
    estimators = {
        "basic_cp": lambda: BasicCPRegressor(model, alpha),
        "feature_cp": lambda: FeatureCPRegressor(model, alpha, seed=stream_seed(seed, "band")),
        "cocoon_nc": lambda: CocoonCPRegressor(model, aligner, fis, make_y_grid(split.y_train), alpha),
    }
    coverage, width = {}, {}
    for name in methods:
        est = estimators[name]().fit(split.X_calib, split.y_calib)
        iv = est.predict_interval(split.X_test)
        coverage[name] = float(np.mean((split.y_test >= iv[:, 0]) & (split.y_test <= iv[:, 1])))
        width[name] = float(np.mean(iv[:, 1] - iv[:, 0]))
    logger.info("seed %d coverage %s", seed, {k: round(v, 4) for k, v in coverage.items()})
    return TrialResult(seed, coverage, width)


def trial_seeds(master_seed, n_seeds):
    """Per-trial seeds: stream ``trial/<k>`` of the master seed."""
    return [stream_seed(master_seed, f"trial/{k}") for k in range(n_seeds)]


def _trial_job(job):
    X, y, alpha, seed, n_test, model_kwargs, aligner_kwargs = job
    return run_coverage_trial(X, y, alpha, seed, n_test, model_kwargs=model_kwargs, aligner_kwargs=aligner_kwargs)


def run_coverage_experiment(X, y, alpha=0.1, master_seed=0, n_seeds=5, n_test=500, jobs=1, dataset="",
                            model_kwargs=None, aligner_kwargs=None):
    """Independent trials over :func:`trial_seeds`, optionally in worker processes,
    aggregated into a :class:`CoverageReport`."""
    work = [(X, y, alpha, s, n_test, model_kwargs, aligner_kwargs) for s in trial_seeds(master_seed, n_seeds)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            trials = list(pool.map(_trial_job, work))
    else:
        trials = [_trial_job(w) for w in work]
    return coverage_report(trials, alpha, master_seed, dataset)


@dataclass
class CoverageReport:
    """Mean/std coverage in percent, distance from the target level, mean width."""

    alpha: float
    n_seeds: int
    rows: list
    seed: int = 0
    dataset: str = ""
    per_seed: list = field(default_factory=list)

    def row(self, method):
        return next(r for r in self.rows if r["method"] == method)

    def to_dict(self):
        return {"dataset": self.dataset, "alpha": self.alpha, "n_seeds": self.n_seeds, "seed": self.seed,
                "methods": self.rows, "per_seed": self.per_seed}


def coverage_report(trials, alpha, seed=0, dataset=""):
    """Aggregate trials; coverage is reported in percent and std is the population std."""
    trials = [t for t in trials if not t.skipped]
    if not trials:
        raise ValueError("no completed trials to report")
    rows = []
    for method in trials[0].coverage:
        cov = 100.0 * np.array([t.coverage[method] for t in trials])
        mean = float(cov.mean())
        rows.append({
            "method": method,
            "mean": mean,
            "std": float(cov.std()),
            "abs_diff": abs(mean - 100.0 * (1 - alpha)),
            "mean_width": float(np.mean([t.width[method] for t in trials])),
        })
    per_seed = [{"seed": t.seed, "coverage": t.coverage, "width": t.width} for t in trials]
    return CoverageReport(alpha, len(trials), rows, seed, dataset, per_seed)


def write_reports(reports, out_dir, force=False):
    """Write ``coverage_report.json`` and ``coverage_report.csv`` for one or more datasets."""
    out_dir = Path(out_dir)
    paths = [out_dir / "coverage_report.json", out_dir / "coverage_report.csv"]
    for p in paths:
        if p.exists() and not force:
            raise FileExistsError(f"{p} exists; pass force=True to overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)
    paths[0].write_text(json.dumps({"reports": [r.to_dict() for r in reports]}, indent=2, sort_keys=True) + "\n")
    with paths[1].open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS + ("dataset", "alpha", "n_seeds", "seed"))
        for r in reports:
            for row in r.rows:
                writer.writerow([row["method"]] + [repr(row[k]) for k in CSV_COLUMNS[1:]]
                                + [r.dataset, repr(r.alpha), r.n_seeds, r.seed])
    return paths
