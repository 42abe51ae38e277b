"""Two-modality query simulator used to compare static and uncertainty-weighted fusion.

A scene holds ``N`` object queries, each with a feature vector per modality
(``A`` and ``B``) at each of ``L`` pseudo-decoder layers. Matched queries carry a
class label; background queries (label ``-1``) come from a broad null
distribution. Both modalities share one feature space, so static fusion is the
element-wise sum ``f_A + f_B``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .aligner import FeatureImpressionSet, LossCoefficients, init_feature_impressions, train_joint
from .conformal import (DEFAULT_CLIP, QueryUncertainty, build_nc_pool, conformal_p_value,
                        fuse_features, fusion_weights, nc_scores, stability_score)
from .numerics import MlpParams, init_mlp, mlp_forward
from .seeding import stream_seed

logger = logging.getLogger(__name__)

BACKGROUND = -1
CORRUPTIONS = ("none", "blackout_A", "noise_A", "noise_B", "dropout_B", "misalign")
DEFAULT_SEVERITY = {"none": 0.0, "blackout_A": 0.0, "noise_A": 1.0, "noise_B": 1.0, "dropout_B": 0.3,
                    "misalign": 1.0}
WEIGHT_GRID = np.round(np.linspace(0.0, 1.0, 11), 10)


@dataclass
class SceneSpec:
    """Generative description of a family of scenes.

    ``class_means`` (C, D) is shared by both modalities and sits on top of a
    common ``offset`` vector, so a missing modality shifts the fused feature
    away from every class. ``noise_a`` / ``noise_b`` (C,) are the per-class
    query-level noise scales, i.e. which modality is cleaner for which class.
    """

    class_means: np.ndarray
    offset: np.ndarray
    noise_a: np.ndarray
    noise_b: np.ndarray
    num_queries: int = 60
    num_layers: int = 6
    matched_fraction: float = 0.5
    layer_noise: float = 0.2
    background_scale: float = 3.0
    class_probs: np.ndarray | None = None

    def __post_init__(self):
        self.class_means = np.asarray(self.class_means, dtype=float)
        self.offset = np.asarray(self.offset, dtype=float)
        C, D = self.class_means.shape
        self.noise_a = np.broadcast_to(np.asarray(self.noise_a, dtype=float), (C,)).copy()
        self.noise_b = np.broadcast_to(np.asarray(self.noise_b, dtype=float), (C,)).copy()
        if self.offset.shape != (D,):
            raise ValueError(f"offset must have shape ({D},), got {self.offset.shape}")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if not 0 <= self.matched_fraction <= 1:
            raise ValueError("matched_fraction must lie in [0, 1]")
        if min(self.layer_noise, self.background_scale, self.noise_a.min(), self.noise_b.min()) < 0:
            raise ValueError("noise scales must be non-negative")
        probs = np.full(C, 1.0 / C) if self.class_probs is None else np.asarray(self.class_probs, dtype=float)
        if probs.shape != (C,) or np.any(probs < 0) or not np.isclose(probs.sum(), 1.0):
            raise ValueError("class_probs must be a probability vector with one entry per class")
        self.class_probs = probs

    @property
    def num_classes(self):
        return self.class_means.shape[0]

    @property
    def feature_dim(self):
        return self.class_means.shape[1]

    @property
    def num_matched(self):
        return int(round(self.matched_fraction * self.num_queries))

    @classmethod
    def default(cls, seed=0, num_classes=10, feature_dim=8, separation=5.0, offset_scale=12.0, base_noise=0.6,
                noise_ratio=2.0, a_cleaner_fraction=0.3, **kwargs):
        """Random class means on a sphere of radius ``separation``.

        Modality A is the cleaner one (noise ``base_noise``) for the first
        ``a_cleaner_fraction`` of the classes and B for the rest; the other
        modality's noise is ``noise_ratio`` times larger.
        """
        rng = np.random.default_rng(seed)
        means = rng.normal(size=(num_classes, feature_dim))
        means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
        offset = rng.normal(size=feature_dim)
        offset *= offset_scale / np.linalg.norm(offset)
        half = np.arange(num_classes) < int(round(a_cleaner_fraction * num_classes))
        noise_a = np.where(half, base_noise, base_noise * noise_ratio)
        noise_b = np.where(half, base_noise * noise_ratio, base_noise)
        return cls(means, offset, noise_a, noise_b, **kwargs)

    def to_dict(self):
        return {"class_means": self.class_means.tolist(), "offset": self.offset.tolist(),
                "noise_a": self.noise_a.tolist(), "noise_b": self.noise_b.tolist(),
                "num_queries": self.num_queries, "num_layers": self.num_layers,
                "matched_fraction": self.matched_fraction, "layer_noise": self.layer_noise,
                "background_scale": self.background_scale, "class_probs": self.class_probs.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Scene:
    """Raw features ``(N, L, D)`` per modality and labels ``(N,)`` (``-1`` = background)."""

    features_a: np.ndarray
    features_b: np.ndarray
    labels: np.ndarray

    @property
    def matched(self):
        return self.labels != BACKGROUND

    def copy(self):
        return Scene(self.features_a.copy(), self.features_b.copy(), self.labels.copy())


@dataclass
class CorruptionSpec:
    """Feature-space corruption of one modality.

    ``severity`` is the noise std for ``noise_A``/``noise_B``/``misalign`` and the
    zeroed fraction for ``dropout_B``; it is ignored by ``none``/``blackout_A``.
    Noise and dropout are drawn independently per layer; ``misalign`` adds one
    fixed offset per query to every layer of modality B.
    """

    kind: str = "none"
    severity: float | None = None

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"unknown corruption {self.kind!r}; choose from {CORRUPTIONS}")
        if self.severity is None:
            self.severity = DEFAULT_SEVERITY[self.kind]
        self.severity = float(self.severity)
        if self.severity < 0:
            raise ValueError("severity must be non-negative")
        if self.kind == "dropout_B" and self.severity > 1:
            raise ValueError("dropout rate must lie in [0, 1]")

    @property
    def modality(self):
        if self.kind == "none":
            return None
        return "a" if self.kind.endswith("_A") else "b"

    @classmethod
    def parse(cls, text):
        """``"noise_A"`` or ``"noise_A:2.5"``."""
        kind, _, sev = str(text).partition(":")
        return cls(kind, float(sev) if sev else None)


def generate_scene(spec, seed):
    """Draw one scene; matched queries come first."""
    rng = np.random.default_rng(seed)
    N, L, D, M = spec.num_queries, spec.num_layers, spec.feature_dim, spec.num_matched
    labels = np.full(N, BACKGROUND)
    labels[:M] = rng.choice(spec.num_classes, size=M, p=spec.class_probs)
    base = np.empty((2, N, D))
    for k, scale in enumerate((spec.noise_a, spec.noise_b)):
        base[k, :M] = spec.class_means[labels[:M]] + scale[labels[:M], None] * rng.normal(size=(M, D))
        base[k, M:] = spec.background_scale * rng.normal(size=(N - M, D))
    base += spec.offset
    layers = base[:, :, None, :] + spec.layer_noise * rng.normal(size=(2, N, L, D))
    return Scene(layers[0], layers[1], labels)


def generate_scenes(spec, seed, count):
    seeds = np.random.SeedSequence(seed).spawn(count)
    return [generate_scene(spec, s) for s in seeds]


def corrupt(scene, spec, seed):
    """Return a corrupted copy; only the targeted modality changes."""
    if spec.kind == "none":
        return scene.copy()
    rng = np.random.default_rng(seed)
    out = scene.copy()
    if spec.kind == "blackout_A":
        out.features_a = np.zeros_like(scene.features_a)
    elif spec.kind == "noise_A":
        out.features_a = scene.features_a + spec.severity * rng.normal(size=scene.features_a.shape)
    elif spec.kind == "noise_B":
        out.features_b = scene.features_b + spec.severity * rng.normal(size=scene.features_b.shape)
    elif spec.kind == "dropout_B":
        keep = rng.random(scene.features_b.shape) >= spec.severity
        out.features_b = np.where(keep, scene.features_b, 0.0)
    elif spec.kind == "misalign":
        shift = spec.severity * rng.normal(size=(scene.features_b.shape[0], 1, scene.features_b.shape[2]))
        out.features_b = scene.features_b + shift
    return out


# -- offline preparation ----------------------------------------------------

@dataclass
class LinearHead:
    """Frozen multinomial linear classifier on fused features."""

    coef: np.ndarray
    intercept: np.ndarray

    def decision_function(self, X):
        return np.asarray(X, dtype=float) @ self.coef.T + self.intercept

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=-1)

    def __eq__(self, other):
        return (isinstance(other, LinearHead) and np.array_equal(self.coef, other.coef)
                and np.array_equal(self.intercept, other.intercept))


@dataclass
class CalibrationArtifact:
    """Everything the online pipeline needs: aligner, FI nodes, per-layer pools,
    the frozen classifier head, the config snapshot and the creation seed."""

    aligner: MlpParams
    fis: FeatureImpressionSet
    nc_pools: list = field(default_factory=list)
    head: LinearHead | None = None
    config: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.aligner.output_dim != self.fis.dim:
            raise ValueError(f"aligner emits {self.aligner.output_dim} dims, FI nodes have {self.fis.dim}")
        if self.head is not None and self.head.coef.shape[1] != self.aligner.input_dim:
            raise ValueError("classifier head and aligner disagree on the raw feature dimension")

    @property
    def calibrated(self):
        return bool(self.nc_pools)

    def __eq__(self, other):
        return (isinstance(other, CalibrationArtifact) and self.aligner == other.aligner
                and self.fis == other.fis and self.nc_pools == other.nc_pools and self.head == other.head
                and self.config == other.config and self.seed == other.seed)


def _matched_rows(scenes, layers=None):
    """Stack raw matched-query features of both modalities: ``(rows, labels, layer)``."""
    feats, labels, layer_ids = [], [], []
    for sc in scenes:
        m = sc.matched
        L = sc.features_a.shape[1]
        for ell in (range(L) if layers is None else layers):
            for f in (sc.features_a, sc.features_b):
                feats.append(f[m, ell])
                labels.append(sc.labels[m])
                layer_ids.append(np.full(m.sum(), ell))
    return np.concatenate(feats), np.concatenate(labels), np.concatenate(layer_ids)


def train_head(scenes, seed=0, C=1.0):
    """Logistic-regression head on static-fused final-layer features of matched queries."""
    from sklearn.linear_model import LogisticRegression

    X = np.concatenate([fuse_features(sc.features_a[sc.matched, -1], sc.features_b[sc.matched, -1], 0.5)
                        for sc in scenes])
    y = np.concatenate([sc.labels[sc.matched] for sc in scenes])
    clf = LogisticRegression(C=C, max_iter=2000, random_state=seed).fit(X, y)
    return LinearHead(clf.coef_.copy(), clf.intercept_.copy())


def train_artifact(spec, scenes, seed=0, aligned_dim=16, hidden=(32,), activation="relu", epochs=200,
                   learning_rate=1e-3, refine_epochs=100, config=None):
    """Train classifier head, aligner and FI nodes on clean scenes (no pools yet).

    The aligner sees matched-query features of both modalities at every layer;
    one scene is one optimizer step.
    """
    s_net, s_fi, s_train, s_head = (stream_seed(seed, k) for k in ("aligner_init", "fi_init", "joint", "head"))
    batches = [_matched_rows([sc])[:2] for sc in scenes]
    X_all = np.concatenate([b[0] for b in batches])
    mean, scale = X_all.mean(axis=0), X_all.std(axis=0)
    scale[scale == 0] = 1.0
    batches = [((X - mean) / scale, y) for X, y in batches]
    aligner = init_mlp([spec.feature_dim, *hidden, aligned_dim], s_net, activation)
    fis = init_feature_impressions(spec.num_classes, aligned_dim, s_fi)
    coeffs = LossCoefficients.from_num_queries(spec.num_queries)
    res = train_joint(batches, aligner, fis, coeffs, epochs, s_train, learning_rate, refine_epochs=refine_epochs)
    head = train_head(scenes, s_head)
    return CalibrationArtifact(fold_input_standardization(res.aligner, mean, scale), res.fis, [], head,
                               dict(config or {}), int(seed))


def fold_input_standardization(params, mean, scale):
    """Absorb ``x -> (x - mean) / scale`` into the first layer so the network takes raw inputs."""
    w0 = params.weights[0] / scale
    b0 = params.biases[0] - w0 @ mean
    return MlpParams([w0] + list(params.weights[1:]), [b0] + list(params.biases[1:]), params.activation)


def calibrate_artifact(artifact, scenes):
    """Attach one NC pool per layer built from matched queries of clean scenes."""
    X, y, layer = _matched_rows(scenes)
    Z = mlp_forward(artifact.aligner, X)
    L = int(layer.max()) + 1
    pools = [build_nc_pool(Z[layer == ell], y[layer == ell], artifact.fis, layer=ell) for ell in range(L)]
    return replace(artifact, nc_pools=pools)


# -- online pipeline --------------------------------------------------------

@dataclass
class PipelineOutput:
    predictions: np.ndarray
    uncertainty: QueryUncertainty
    top1_a: np.ndarray
    top1_b: np.ndarray


def _modality_trace(artifact, feats):
    N, L, D = feats.shape
    Z = mlp_forward(artifact.aligner, feats.reshape(-1, D))
    scores, top1 = nc_scores(Z, artifact.fis)
    return scores.reshape(N, L), top1.reshape(N, L)


def run_pipeline(scene, artifact, mode="adaptive", clip_threshold=DEFAULT_CLIP, clip_modality="a",
                 fixed_weight_a=None):
    """Classify every query of ``scene`` after static or adaptive fusion.

    Adaptive mode aligns both modalities at every layer, takes the final-layer
    nearest-FI score against the final-layer pool as ``P`` and the top-1 trace
    as ``S``, then fuses final-layer raw features with :func:`fusion_weights`.
    Static mode fuses with (0.5, 0.5). ``fixed_weight_a`` overrides both.
    """
    if mode not in ("static", "adaptive"):
        raise ValueError(f"mode must be 'static' or 'adaptive', got {mode!r}")
    if not artifact.calibrated or artifact.head is None:
        raise ValueError("artifact has no calibration pools or classifier head")
    D = scene.features_a.shape[2]
    if D != artifact.aligner.input_dim:
        raise ValueError(f"scene features have dim {D}, artifact aligner expects {artifact.aligner.input_dim}")
    if scene.features_a.shape[1] > len(artifact.nc_pools):
        raise ValueError(f"scene has {scene.features_a.shape[1]} layers, artifact calibrated "
                         f"{len(artifact.nc_pools)}")
    nc_a, top_a = _modality_trace(artifact, scene.features_a)
    nc_b, top_b = _modality_trace(artifact, scene.features_b)
    pool = artifact.nc_pools[scene.features_a.shape[1] - 1]
    p_a, p_b = conformal_p_value(pool, nc_a[:, -1]), conformal_p_value(pool, nc_b[:, -1])
    unc = fusion_weights(p_a, p_b, stability_score(top_a), stability_score(top_b), clip_threshold,
                         clip_modality, nc_a[:, -1], nc_b[:, -1])
    if fixed_weight_a is not None:
        w_a = np.full(len(scene.labels), float(fixed_weight_a))
    elif mode == "static":
        w_a = np.full(len(scene.labels), 0.5)
    else:
        w_a = unc.w_a
    fused = fuse_features(scene.features_a[:, -1], scene.features_b[:, -1], w_a, 1.0 - w_a)
    return PipelineOutput(artifact.head.predict(fused), unc, top_a, top_b)


def accuracy(scenes, outputs):
    """Top-1 accuracy over matched queries."""
    hits = sum(int(np.sum(o.predictions[s.matched] == s.labels[s.matched])) for s, o in zip(scenes, outputs))
    total = sum(int(s.matched.sum()) for s in scenes)
    return hits / total if total else float("nan")


# -- experiments ------------------------------------------------------------

@dataclass
class SimResult:
    """Static vs adaptive comparison for one corruption."""

    corruption: str
    severity: float
    seed: int
    static_accuracy: float
    adaptive_accuracy: float
    mean_weight_a: float
    mean_weight_b: float
    clip_rate_matched: float
    clip_rate_background: float
    nc_final: dict
    stability: dict
    queries: list = field(default_factory=list)

    def to_dict(self, include_queries=False):
        d = {k: v for k, v in self.__dict__.items() if k != "queries"}
        if include_queries:
            d["queries"] = self.queries
        return d


def _matched_mean(values, scenes, background=False):
    vals = np.concatenate([np.atleast_1d(v)[(s.labels == BACKGROUND) if background else s.matched]
                           for v, s in zip(values, scenes)])
    return float(vals.mean()) if vals.size else float("nan")


def evaluation_scenes(spec, corruption, seed, num_scenes=40):
    """Fresh clean scenes for ``seed``, each corrupted with its own stream."""
    if isinstance(corruption, str):
        corruption = CorruptionSpec.parse(corruption)
    ss = np.random.SeedSequence(seed)
    scene_seed, corrupt_seed = (int(c.generate_state(1)[0]) for c in ss.spawn(2))
    clean = generate_scenes(spec, scene_seed, num_scenes)
    c_seeds = np.random.SeedSequence(corrupt_seed).spawn(num_scenes)
    return [corrupt(sc, corruption, cs) for sc, cs in zip(clean, c_seeds)]


def simulate(artifact, spec, corruption, seed, num_scenes=40, clip_threshold=DEFAULT_CLIP,
             record_queries=False):
    """Evaluate static and adaptive fusion on freshly drawn, corrupted scenes."""
    if isinstance(corruption, str):
        corruption = CorruptionSpec.parse(corruption)
    scenes = evaluation_scenes(spec, corruption, seed, num_scenes)
    static = [run_pipeline(sc, artifact, "static", clip_threshold) for sc in scenes]
    adaptive = [run_pipeline(sc, artifact, "adaptive", clip_threshold) for sc in scenes]
    unc = [o.uncertainty for o in adaptive]
    stab_a = [stability_score(o.top1_a) for o in adaptive]
    stab_b = [stability_score(o.top1_b) for o in adaptive]
    queries = []
    if record_queries:
        for i, (sc, u) in enumerate(zip(scenes, unc)):
            for q in range(len(sc.labels)):
                queries.append({"scene": i, "query": q, "label": int(sc.labels[q]),
                                **{k: float(getattr(u, k)[q]) for k in
                                   ("nc_a", "nc_b", "p_a", "p_b", "q_a", "q_b", "s_a", "s_b", "w_a", "w_b")},
                                "clipped": bool(u.clipped[q]), "degenerate": bool(u.degenerate[q])})
    return SimResult(
        corruption=corruption.kind,
        severity=corruption.severity,
        seed=int(seed),
        static_accuracy=accuracy(scenes, static),
        adaptive_accuracy=accuracy(scenes, adaptive),
        mean_weight_a=_matched_mean([u.w_a for u in unc], scenes),
        mean_weight_b=_matched_mean([u.w_b for u in unc], scenes),
        clip_rate_matched=_matched_mean([u.clipped.astype(float) for u in unc], scenes),
        clip_rate_background=_matched_mean([u.clipped.astype(float) for u in unc], scenes, background=True),
        nc_final={"a": _matched_mean([u.nc_a for u in unc], scenes), "b": _matched_mean([u.nc_b for u in unc], scenes)},
        stability={"a": _matched_mean(stab_a, scenes), "b": _matched_mean(stab_b, scenes)},
        queries=queries,
    )


@dataclass
class SweepResult:
    grid: np.ndarray
    accuracies: np.ndarray
    region: np.ndarray
    mean_weight_a: float
    inside: bool


def in_region(weight, region, step):
    """Whether ``weight`` lies within half a grid step of some region point."""
    return bool(np.any(np.abs(np.asarray(region) - weight) <= step / 2 + 1e-12))


def optimal_region(grid, accuracies, margin=0.005):
    """Grid weights whose accuracy is within ``margin`` (a fraction) of the peak."""
    accuracies = np.asarray(accuracies, dtype=float)
    return np.asarray(grid)[accuracies >= accuracies.max() - margin - 1e-12]


def sweep_optimal_region(scenes, artifact, grid=WEIGHT_GRID, mean_weight_a=None, margin=0.005):
    """Accuracy with one fixed modality-A weight for all queries, over ``grid``.

    The optimal region holds every grid weight within ``margin`` accuracy of
    the peak (0.005 = half a percentage point). If ``mean_weight_a`` is given,
    ``inside`` reports whether it is within half a grid step of the region.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("weight grid is empty")
    acc = np.array([accuracy(scenes, [run_pipeline(sc, artifact, fixed_weight_a=w) for sc in scenes])
                    for w in grid])
    region = optimal_region(grid, acc, margin)
    step = float(np.min(np.diff(np.sort(grid)))) if grid.size > 1 else 0.0
    inside = mean_weight_a is not None and in_region(mean_weight_a, region, step)
    return SweepResult(grid, acc, region, float("nan") if mean_weight_a is None else float(mean_weight_a), inside)


def simulate_and_sweep(artifact, spec, corruption, seed, num_scenes=40, grid=WEIGHT_GRID):
    """:func:`simulate` plus a weight sweep on the very same corrupted scenes."""
    if isinstance(corruption, str):
        corruption = CorruptionSpec.parse(corruption)
    res = simulate(artifact, spec, corruption, seed, num_scenes)
    scenes = evaluation_scenes(spec, corruption, seed, num_scenes)
    return res, sweep_optimal_region(scenes, artifact, grid, res.mean_weight_a)


def prepare_artifact(spec, seed, train_scenes=20, calib_scenes=20, **train_kwargs):
    """Train on clean scenes and calibrate on a disjoint batch of clean scenes."""
    art = train_artifact(spec, generate_scenes(spec, stream_seed(seed, "train_scenes"), train_scenes), seed,
                         **train_kwargs)
    return calibrate_artifact(art, generate_scenes(spec, stream_seed(seed, "calib_scenes"), calib_scenes))
