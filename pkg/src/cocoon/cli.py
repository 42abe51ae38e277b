"""Command-line experiment runner.

Subcommands: ``train-aligner``, ``calibrate``, ``coverage``, ``simulate``,
``sweep`` and ``report``. Exit status is 0 on success, 2 for usage errors,
3 for malformed configuration or missing/existing files and 4 for an
artifact format-version mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import coverage as cov
from . import fusion_sim as sim
from .persistence import (ARTIFACT_SUFFIX, ArtifactVersionError, ConfigError, check_writable, load_artifact,
                          load_config, load_dataset_csv, save_artifact, write_json)
from .seeding import stream_seed

EXIT_USAGE, EXIT_INPUT, EXIT_VERSION = 2, 3, 4

logger = logging.getLogger("cocoon")


class CommandError(Exception):
    def __init__(self, message, code=EXIT_INPUT):
        super().__init__(message)
        self.code = code


def scene_spec(cfg):
    return sim.SceneSpec.default(cfg["family_seed"], num_classes=cfg["num_classes"],
                                 feature_dim=cfg["feature_dim"], num_queries=cfg["num_queries"],
                                 num_layers=cfg["num_layers"], matched_fraction=cfg["matched_fraction"])


def corruption_spec(cfg, override=None):
    text = override or cfg["corruption"]
    if ":" not in text and cfg["severity"]:
        text = f"{text}:{cfg['severity']}"
    try:
        return sim.CorruptionSpec.parse(text)
    except ValueError as exc:
        raise CommandError(str(exc)) from None


def _artifact_path(args, cfg, key):
    return Path(args.artifact) if args.artifact else Path(args.out) / cfg[key]


def _load(path, what="artifact"):
    if not Path(path).exists():
        raise CommandError(f"missing {what}: {path} (run the previous stage first)")
    return load_artifact(path)


def _summary(stage, **fields):
    print(f"[{stage}] " + " ".join(f"{k}={v}" for k, v in fields.items()))


# -- commands ---------------------------------------------------------------

def cmd_train_aligner(args, cfg):
    spec = scene_spec(cfg)
    out = _artifact_path(args, cfg, "artifact")
    check_writable(out, args.force)
    scenes = sim.generate_scenes(spec, stream_seed(args.seed, "train_scenes"), cfg["train_scenes"])
    hidden = (cfg["aligner_hidden"],) if cfg["aligner_hidden"] > 0 else ()
    art = sim.train_artifact(spec, scenes, args.seed, aligned_dim=cfg["aligned_dim"], hidden=hidden,
                             epochs=cfg["aligner_epochs"], learning_rate=cfg["learning_rate"], config=cfg)
    save_artifact(art, out, args.force)
    _summary("train-aligner", artifact=out, classes=art.fis.num_classes, min_fi_distance=f"{art.fis.min_pairwise_distance():.4f}",
             seed=args.seed)


def cmd_calibrate(args, cfg):
    src = _artifact_path(args, cfg, "artifact")
    art = _load(src)
    out = Path(args.output) if args.output else Path(args.out) / cfg["calibrated_artifact"]
    check_writable(out, args.force)
    spec = scene_spec(art.config or cfg)
    scenes = sim.generate_scenes(spec, stream_seed(args.seed, "calib_scenes"), cfg["calib_scenes"])
    art = sim.calibrate_artifact(art, scenes)
    save_artifact(art, out, args.force)
    _summary("calibrate", artifact=out, layers=len(art.nc_pools), pool_size=len(art.nc_pools[-1]), seed=args.seed)


def cmd_coverage(args, cfg):
    out = Path(args.out)
    for name in ("coverage_report.json", "coverage_report.csv"):
        check_writable(out / name, args.force)
    if cfg["data_csv"]:
        try:
            X, y, _ = load_dataset_csv(cfg["data_csv"])
        except (FileNotFoundError, ValueError) as exc:
            raise CommandError(str(exc)) from None
        sets = [(Path(cfg["data_csv"]).stem, X, y)]
    else:
        names = [n.strip() for n in cfg["datasets"].split(",") if n.strip()]
        unknown = [n for n in names if n not in cov.DATASETS]
        if unknown:
            raise CommandError(f"unknown dataset(s) {unknown}; choose from {sorted(cov.DATASETS)}")
        sets = [(n, *cov.make_dataset(n, cfg["n_samples"], seed=args.seed)) for n in names]
    reports = []
    for name, X, y in sets:
        rep = cov.run_coverage_experiment(X, y, cfg["alpha"], args.seed, cfg["n_seeds"], cfg["n_test"], args.jobs,
                                          name, {"epochs": cfg["model_epochs"]},
                                          {"epochs": cfg["regression_aligner_epochs"]})
        reports.append(rep)
        _summary("coverage", dataset=name, **{r["method"]: f"{r['mean']:.2f}" for r in rep.rows}, seed=args.seed)
    cov.write_reports(reports, out, args.force)


def cmd_simulate(args, cfg):
    art = _load(_artifact_path(args, cfg, "calibrated_artifact"), "calibrated artifact")
    if not art.calibrated:
        raise CommandError("artifact has no calibration pools; run calibrate first")
    out = Path(args.out) / "sim_result.json"
    check_writable(out, args.force)
    spec = scene_spec(art.config or cfg)
    corruption = corruption_spec(cfg, args.corruption)
    res = sim.simulate(art, spec, corruption, stream_seed(args.seed, "evaluate"), cfg["eval_scenes"],
                       cfg["clip_threshold"], record_queries=True)
    doc = res.to_dict(include_queries=True)
    doc.update(master_seed=args.seed, artifact_seed=art.seed)
    write_json(out, doc, args.force)
    _summary("simulate", corruption=corruption.kind, static=f"{res.static_accuracy:.4f}",
             adaptive=f"{res.adaptive_accuracy:.4f}", mean_w_a=f"{res.mean_weight_a:.3f}", seed=args.seed)


def cmd_sweep(args, cfg):
    art = _load(_artifact_path(args, cfg, "calibrated_artifact"), "calibrated artifact")
    out = Path(args.out) / "sweep.csv"
    check_writable(out, args.force)
    spec = scene_spec(art.config or cfg)
    corruption = corruption_spec(cfg, args.corruption)
    eval_seed = stream_seed(args.seed, "evaluate")
    res, sw = sim.simulate_and_sweep(art, spec, corruption, eval_seed, cfg["eval_scenes"])
    out.parent.mkdir(parents=True, exist_ok=True)
    region = set(np.round(sw.region, 10).tolist())
    with out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["weight_a", "accuracy", "in_region", "corruption", "adaptive_mean_weight_a", "seed"])
        for g, a in zip(sw.grid, sw.accuracies):
            w.writerow([repr(float(g)), repr(float(a)), int(round(float(g), 10) in region), corruption.kind,
                        repr(sw.mean_weight_a), args.seed])
    _summary("sweep", corruption=corruption.kind, region=",".join(f"{r:.1f}" for r in sw.region),
             adaptive_mean_w_a=f"{sw.mean_weight_a:.3f}", inside=sw.inside, seed=args.seed)


def cmd_report(args, cfg):
    out = Path(args.out)
    found = {}
    if (out / "coverage_report.json").exists():
        found["coverage"] = json.loads((out / "coverage_report.json").read_text())
        for rep in found["coverage"]["reports"]:
            for row in rep["methods"]:
                _summary("report", dataset=rep["dataset"], method=row["method"], mean=f"{row['mean']:.2f}",
                         std=f"{row['std']:.2f}", abs_diff=f"{row['abs_diff']:.2f}")
    if (out / "sim_result.json").exists():
        doc = json.loads((out / "sim_result.json").read_text())
        doc.pop("queries", None)
        found["simulate"] = doc
        _summary("report", corruption=doc["corruption"], static=f"{doc['static_accuracy']:.4f}",
                 adaptive=f"{doc['adaptive_accuracy']:.4f}")
    if (out / "sweep.csv").exists():
        with (out / "sweep.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        found["sweep"] = rows
        region = [r["weight_a"] for r in rows if r["in_region"] == "1"]
        _summary("report", sweep_region=",".join(region))
    for name in sorted(out.glob(f"*{ARTIFACT_SUFFIX}")):
        art = load_artifact(name)
        found.setdefault("artifacts", []).append({"file": name.name, "seed": art.seed,
                                                  "calibrated": art.calibrated, "classes": art.fis.num_classes})
    if not found:
        raise CommandError(f"nothing to report in {out}")
    found["seed"] = args.seed
    write_json(out / "report.json", found, args.force)


COMMANDS = {
    "train-aligner": (cmd_train_aligner, "train classifier head, feature aligner and FI nodes on clean scenes"),
    "calibrate": (cmd_calibrate, "build per-layer NC pools for a trained artifact"),
    "coverage": (cmd_coverage, "coverage experiment for Basic CP, Feature CP and the FI-distance score"),
    "simulate": (cmd_simulate, "static vs adaptive fusion under one corruption"),
    "sweep": (cmd_sweep, "accuracy over fixed fusion weights and the optimal region"),
    "report": (cmd_report, "summarise outputs found in the output directory"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="cocoon", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
        p.add_argument("--out", default=".", help="output directory (default .)")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if name in ("train-aligner", "calibrate", "simulate", "sweep"):
            p.add_argument("--artifact", help="artifact path (default taken from the config)")
        if name == "calibrate":
            p.add_argument("--output", help="calibrated artifact path")
        if name in ("simulate", "sweep"):
            p.add_argument("--corruption", help="none, blackout_A, noise_A[:sigma], noise_B[:sigma], "
                                                "dropout_B[:rate] or misalign[:sigma]")
        if name == "coverage":
            p.add_argument("--jobs", type=int, default=1, help="parallel trials (default 1)")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func = COMMANDS[args.command][0]
    try:
        cfg = load_config(args.config, args.set)
        func(args, cfg)
    except ArtifactVersionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERSION
    except (ConfigError, CommandError, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return getattr(exc, "code", EXIT_INPUT)
    except json.JSONDecodeError as exc:
        print(f"error: cannot parse artifact: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return 0


if __name__ == "__main__":
    sys.exit(main())
