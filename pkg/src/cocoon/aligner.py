"""Feature aligner and Feature Impression (FI) nodes trained under the
center / geometric-median / separation objective."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .numerics import MlpParams, OptimizerState, init_mlp, mlp_backward, mlp_forward, optimizer_step

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-8
EXP_DECAY_FLOOR = 1e-3


@dataclass
class FeatureImpressionSet:
    """One learnable surrogate ground-truth vector per class, stacked as ``(C, dim)``."""

    nodes: np.ndarray

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        if self.nodes.ndim != 2 or 0 in self.nodes.shape:
            raise ValueError(f"nodes must be a non-empty (C, dim) array, got shape {self.nodes.shape}")
        if not np.all(np.isfinite(self.nodes)):
            raise ValueError("FI nodes must be finite")

    @property
    def num_classes(self):
        return self.nodes.shape[0]

    @property
    def dim(self):
        return self.nodes.shape[1]

    def min_pairwise_distance(self):
        if self.num_classes < 2:
            return np.inf
        diff = self.nodes[:, None, :] - self.nodes[None, :, :]
        dist = np.linalg.norm(diff, axis=-1)
        return float(dist[np.triu_indices(self.num_classes, 1)].min())

    def __eq__(self, other):
        return isinstance(other, FeatureImpressionSet) and np.array_equal(self.nodes, other.nodes)


def init_feature_impressions(num_classes, dim=128, seed=0, radius=1.0):
    """Draw ``num_classes`` nodes uniformly on the sphere of ``radius`` about the origin."""
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(num_classes, dim))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return FeatureImpressionSet(radius * v)


@dataclass(frozen=True)
class LossCoefficients:
    """Weights of the center, geometric-median and separation terms."""

    alpha_c: float
    beta_c: float
    gamma_c: float

    @classmethod
    def from_num_queries(cls, num_queries):
        if num_queries < 1:
            raise ValueError("num_queries must be positive")
        return cls(5.0 / num_queries, 3.0 / num_queries, 1.0 / (7.0 * num_queries))


@dataclass
class AlignedBatch:
    """Aligned features with their class labels (and optional modality tags)."""

    features: np.ndarray
    labels: np.ndarray
    modality: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int).ravel()
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"features must be (n, dim) with one label per row; got {self.features.shape} "
                f"and {self.labels.shape[0]} labels"
            )


class LossTerms(NamedTuple):
    total: float
    center: float
    geomed: float
    separate: float
    empty: bool = False


def _check(batch, fis):
    if len(batch.labels) and batch.features.shape[1] != fis.dim:
        raise ValueError(f"aligned features have dim {batch.features.shape[1]}, FI nodes have {fis.dim}")
    if len(batch.labels) and (batch.labels.min() < 0 or batch.labels.max() >= fis.num_classes):
        raise ValueError(f"labels must lie in 0..{fis.num_classes - 1}")


def _separate(nodes):
    diff = nodes[:, None, :] - nodes[None, :, :]
    sq = np.einsum("jkd,jkd->jk", diff, diff)
    return float(np.triu(sq, 1).sum())


def _unit_pulls(batch, fis, eps):
    d = batch.features - fis.nodes[batch.labels]
    r = np.linalg.norm(d, axis=1)
    s = r + eps
    u = d / s[:, None]
    pulls = np.zeros_like(fis.nodes)
    np.add.at(pulls, batch.labels, u)
    return d, r, s, u, pulls


def loss_total(batch, fis, coeffs, eps=DEFAULT_EPS):
    """Evaluate ``alpha_c*center + beta_c*geomed - gamma_c*separate``.

    ``center`` sums feature-to-own-node distances, ``geomed`` sums over classes the
    squared norm of the summed (eps-guarded) unit vectors from node to features,
    and ``separate`` sums squared distances over node pairs.
    """
    _check(batch, fis)
    separate = _separate(fis.nodes)
    if len(batch.labels) == 0:
        return LossTerms(-coeffs.gamma_c * separate, 0.0, 0.0, separate, True)
    _, r, _, _, pulls = _unit_pulls(batch, fis, eps)
    center = float(r.sum())
    geomed = float(np.einsum("cd,cd->", pulls, pulls))
    total = coeffs.alpha_c * center + coeffs.beta_c * geomed - coeffs.gamma_c * separate
    return LossTerms(total, center, geomed, separate)


def loss_gradients(batch, fis, coeffs, eps=DEFAULT_EPS):
    """Analytic gradients of :func:`loss_total`.

    Returns
    -------
    feature_grad : ndarray of shape (n, dim)
        Gradient with respect to each aligned feature.
    node_grad : ndarray of shape (C, dim)
    """
    _check(batch, fis)
    nodes = fis.nodes
    sep_grad = 2.0 * (nodes.shape[0] * nodes - nodes.sum(axis=0))
    if len(batch.labels) == 0:
        return np.zeros_like(batch.features), -coeffs.gamma_c * sep_grad

    d, r, s, u, pulls = _unit_pulls(batch, fis, eps)
    # d/dd ||d||, eps-guarded so a coincident feature contributes zero
    center_grad = u
    # chain rule through u = d / (||d|| + eps)
    upstream = 2.0 * pulls[batch.labels]
    proj = np.einsum("nd,nd->n", d, upstream)
    safe_r = np.where(r > 0, r, 1.0)
    coef = np.where(r > 0, proj / (s * s * safe_r), 0.0)
    geomed_grad = upstream / s[:, None] - d * coef[:, None]

    feature_grad = coeffs.alpha_c * center_grad + coeffs.beta_c * geomed_grad
    node_grad = np.zeros_like(nodes)
    np.add.at(node_grad, batch.labels, -feature_grad)
    node_grad -= coeffs.gamma_c * sep_grad
    return feature_grad, node_grad


def joint_loss_and_gradients(aligner, raw, labels, fis, coeffs, eps=DEFAULT_EPS):
    """Loss terms plus gradients for the aligner parameters and the FI nodes."""
    raw = np.asarray(raw, dtype=float)
    aligned = mlp_forward(aligner, raw)
    batch = AlignedBatch(aligned, labels)
    terms = loss_total(batch, fis, coeffs, eps)
    feature_grad, node_grad = loss_gradients(batch, fis, coeffs, eps)
    aligner_grad, _ = mlp_backward(aligner, raw, feature_grad)
    return terms, aligner_grad, node_grad


def align(aligner, raw_feature):
    """Project raw modality features into the shared FI space."""
    return mlp_forward(aligner, raw_feature)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


class TrainResult(NamedTuple):
    aligner: MlpParams
    fis: FeatureImpressionSet
    loss_trace: list
    initial_min_distance: float


def _lr_at(schedule, base, step, total):
    if schedule == "constant":
        return base
    if schedule == "cosine":
        return 0.5 * base * (1.0 + np.cos(np.pi * step / total))
    if schedule == "exponential":
        return base * EXP_DECAY_FLOOR ** (step / max(1, total - 1))
    raise ValueError(f"unknown schedule {schedule!r}")


def _descend(scenes, aligner, nodes, coeffs, epochs, rng, learning_rate, optimizer, eps,
             schedule, train_aligner, trace):
    n_w = len(aligner.arrays())
    state = OptimizerState(learning_rate, optimizer)
    total = epochs * len(scenes)
    step = 0
    for epoch in range(epochs):
        losses = []
        for idx in rng.permutation(len(scenes)):
            raw, labels = scenes[idx]
            terms, a_grad, n_grad = joint_loss_and_gradients(
                aligner, raw, labels, FeatureImpressionSet(nodes), coeffs, eps)
            if not np.isfinite(terms.total):
                raise TrainingDivergedError(f"loss became non-finite at epoch {epoch}", trace)
            losses.append(terms.total)
            lr = _lr_at(schedule, learning_rate, step, total)
            if train_aligner:
                new, state = optimizer_step(state, aligner.arrays() + [nodes], a_grad.arrays() + [n_grad], lr)
                aligner, nodes = aligner.with_arrays(new[:n_w]), new[n_w]
            else:
                (nodes,), state = optimizer_step(state, [nodes], [n_grad], lr)
            step += 1
        trace.append(float(np.mean(losses)))
        if epoch % 100 == 0:
            logger.debug("epoch %d loss %.6g", epoch, trace[-1])
    return aligner, nodes


def train_joint(scenes, aligner_init, fi_init, coeffs, epochs=500, seed=0, learning_rate=1e-3,
                optimizer="adam", eps=DEFAULT_EPS, schedule="constant", refine_epochs=100,
                train_aligner=True):
    """Jointly fit aligner weights and FI nodes on frozen raw features.

    Parameters
    ----------
    scenes : list of (raw, labels)
        Each scene is one optimizer step; ``raw`` has shape ``(n, input_dim)``
        and ``labels`` holds the class of every row.
    schedule : {"constant", "cosine", "exponential"}
        Learning-rate schedule of the joint phase; the exponential schedule
        decays geometrically to ``EXP_DECAY_FLOOR * learning_rate``.
    refine_epochs : int
        Extra epochs on the same loss in which only the FI nodes move, with an
        exponentially decaying rate. The geometric-median term is very stiff
        once features have contracted, and joint steps alone leave the nodes
        oscillating around the medians of their features.
    train_aligner : bool
        With ``False`` only the FI nodes move in the joint phase too.

    Returns
    -------
    TrainResult
        ``loss_trace`` holds the mean total loss of every epoch (joint epochs
        first, then refinement epochs).
    """
    scenes = [(np.asarray(x, dtype=float), np.asarray(y, dtype=int)) for x, y in scenes]
    if not scenes:
        raise ValueError("need at least one training scene")
    rng = np.random.default_rng(seed)
    trace = []
    aligner, nodes = _descend(scenes, aligner_init.copy(), fi_init.nodes.copy(), coeffs, epochs, rng,
                              learning_rate, optimizer, eps, schedule, train_aligner, trace)
    if refine_epochs:
        aligner, nodes = _descend(scenes, aligner, nodes, coeffs, refine_epochs, rng, learning_rate,
                                  optimizer, eps, "exponential", False, trace)
    return TrainResult(aligner, FeatureImpressionSet(nodes), trace, fi_init.min_pairwise_distance())


class FeatureAligner(TransformerMixin, BaseEstimator):
    """Estimator that learns the aligner MLP and one FI node per class.

    Parameters
    ----------
    n_components : int
        Dimension of the aligned space (and of every FI node).
    hidden_dims : tuple of int
    activation : {"relu", "tanh", "identity"}
    num_queries : int or None
        Sets the default loss coefficients; ``None`` uses the mean number of
        rows per scene.
    alpha_c, beta_c, gamma_c : float or None
        Override individual loss coefficients.
    epochs, learning_rate, schedule, refine_epochs, seed
        Training controls, see :func:`train_joint`.

    Attributes
    ----------
    aligner_ : MlpParams
    fis_ : FeatureImpressionSet
    loss_trace_ : list of float
    """

    def __init__(self, n_components=128, hidden_dims=(64,), activation="relu", num_queries=None,
                 alpha_c=None, beta_c=None, gamma_c=None, epochs=500, learning_rate=1e-3,
                 schedule="constant", refine_epochs=100, fi_radius=1.0, eps=DEFAULT_EPS, seed=0):
        self.n_components = n_components
        self.hidden_dims = hidden_dims
        self.activation = activation
        self.num_queries = num_queries
        self.alpha_c = alpha_c
        self.beta_c = beta_c
        self.gamma_c = gamma_c
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.schedule = schedule
        self.refine_epochs = refine_epochs
        self.fi_radius = fi_radius
        self.eps = eps
        self.seed = seed

    def coefficients(self, num_queries):
        base = LossCoefficients.from_num_queries(self.num_queries or num_queries)
        return LossCoefficients(
            base.alpha_c if self.alpha_c is None else self.alpha_c,
            base.beta_c if self.beta_c is None else self.beta_c,
            base.gamma_c if self.gamma_c is None else self.gamma_c,
        )

    def fit(self, X, y, groups=None, n_classes=None):
        """Fit on raw features ``X`` with class labels ``y``.

        ``groups`` assigns rows to scenes (one optimizer step each); by default
        the whole set is a single scene.
        """
        X, y = check_X_y(X, y, dtype=float)
        y = y.astype(int)
        if groups is None:
            scenes = [(X, y)]
        else:
            groups = np.asarray(groups)
            scenes = [(X[groups == g], y[groups == g]) for g in np.unique(groups)]
        self.n_classes_ = int(n_classes or y.max() + 1)
        self.n_features_in_ = X.shape[1]
        ss = np.random.SeedSequence(self.seed)
        s_net, s_fi, s_train = (int(c.generate_state(1)[0]) for c in ss.spawn(3))
        dims = [X.shape[1], *self.hidden_dims, self.n_components]
        aligner = init_mlp(dims, s_net, self.activation)
        fis = init_feature_impressions(self.n_classes_, self.n_components, s_fi, self.fi_radius)
        coeffs = self.coefficients(max(1, round(np.mean([len(s[1]) for s in scenes]))))
        res = train_joint(scenes, aligner, fis, coeffs, self.epochs, s_train, self.learning_rate,
                          eps=self.eps, schedule=self.schedule, refine_epochs=self.refine_epochs)
        self.aligner_, self.fis_, self.loss_trace_ = res.aligner, res.fis, res.loss_trace
        self.coefficients_ = coeffs
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=float)
        return mlp_forward(self.aligner_, X)

    def predict(self, X):
        """Index of the nearest FI node for every row."""
        Z = self.transform(X)
        dist = np.linalg.norm(Z[:, None, :] - self.fis_.nodes[None], axis=-1)
        return np.argmin(dist, axis=1)
