"""Nonconformity scores against FI nodes, calibration pools, conformal p-values,
cross-layer stability and the resulting per-query fusion weights."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

DEFAULT_CLIP = 0.7


@dataclass
class NCPool:
    """Sorted calibration nonconformity scores.

    ``layer`` and ``class_scope`` record where the scores came from; a
    ``class_scope`` of ``None`` means the pool mixes all classes.
    """

    scores: np.ndarray
    layer: int | None = None
    class_scope: int | None = None

    def __post_init__(self):
        s = np.sort(np.asarray(self.scores, dtype=float).ravel())
        if s.size == 0:
            raise ValueError("an NC pool needs at least one score")
        if not np.all(np.isfinite(s)) or s[0] < 0:
            raise ValueError("NC scores must be finite and non-negative")
        self.scores = s

    def __len__(self):
        return self.scores.size

    def __eq__(self, other):
        return (isinstance(other, NCPool) and self.layer == other.layer
                and self.class_scope == other.class_scope and np.array_equal(self.scores, other.scores))

    def count_at_least(self, nc):
        return self.scores.size - np.searchsorted(self.scores, nc, side="left")


def nc_scores(aligned, fis, targets=None):
    """Vectorised :func:`nc_score` over rows of ``aligned``.

    Returns
    -------
    scores : ndarray of shape (n,)
    indices : ndarray of shape (n,)
        The FI node each score was measured against.
    """
    Z = np.atleast_2d(np.asarray(aligned, dtype=float))
    nodes = fis.nodes
    if Z.shape[1] != nodes.shape[1]:
        raise ValueError(f"aligned features have dim {Z.shape[1]}, FI nodes have {nodes.shape[1]}")
    if targets is not None:
        idx = np.broadcast_to(np.asarray(targets, dtype=int), (Z.shape[0],)).copy()
        return np.linalg.norm(Z - nodes[idx], axis=1), idx
    dist = np.linalg.norm(Z[:, None, :] - nodes[None, :, :], axis=-1)
    idx = np.argmin(dist, axis=1)  # first minimum wins ties
    return dist[np.arange(Z.shape[0]), idx], idx


def nc_score(aligned, fis, target=None):
    """Distance from one aligned feature to an FI node.

    ``target=None`` picks the nearest node (lowest index on ties); otherwise the
    distance to node ``target`` is returned. Result is ``(score, node_index)``.
    """
    score, idx = nc_scores(np.asarray(aligned, dtype=float)[None, :], fis,
                           None if target is None else [target])
    return float(score[0]), int(idx[0])


def build_nc_pool(aligned, labels, fis, layer=None, per_class=False):
    """Calibration pool of distances from each feature to its ground-truth FI node.

    With ``per_class=True`` a dict ``{class: NCPool}`` is returned instead of one
    global pool.
    """
    labels = np.asarray(labels, dtype=int).ravel()
    if labels.size == 0:
        raise ValueError("calibration set is empty")
    scores, _ = nc_scores(aligned, fis, labels)
    if not per_class:
        return NCPool(scores, layer)
    return {int(c): NCPool(scores[labels == c], layer, int(c)) for c in np.unique(labels)}


def conformal_p_value(pool, nc, smoothed=False):
    """Fraction of pool scores at least as large as ``nc``.

    The default is the plain count ratio ``|{x >= nc}| / n``. ``smoothed=True``
    gives ``(|{x >= nc}| + 1) / (n + 1)``, the variant with the exact
    finite-sample validity guarantee. Accepts scalars or arrays.
    """
    count = pool.count_at_least(nc)
    n = len(pool)
    p = (count + 1) / (n + 1) if smoothed else count / n
    return float(p) if np.ndim(p) == 0 else p


def conformal_quantile(pool, alpha):
    """The ``ceil((n+1)(1-alpha))``-th smallest pool score."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    n = len(pool)
    # guard against (n+1)(1-alpha) landing a hair above an integer
    k = math.ceil((n + 1) * (1 - alpha) - 1e-9)
    if k > n:
        raise ValueError(
            f"alpha={alpha} is too small for a pool of {n} scores (needs alpha >= {1 / (n + 1):.4g})"
        )
    return float(pool.scores[max(k, 1) - 1])


@dataclass
class LayerTrace:
    """Top-1 FI index and its NC score at every decoder layer."""

    top1: np.ndarray
    scores: np.ndarray | None = None

    def __post_init__(self):
        self.top1 = np.asarray(self.top1, dtype=int).ravel()
        if self.top1.size < 1:
            raise ValueError("a layer trace needs at least one layer")
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=float).ravel()


def stability_score(trace):
    """``1 - transitions / (L - 1)`` over the top-1 index sequence; 1 for one layer.

    ``trace`` may be a :class:`LayerTrace`, a sequence of indices, or an array of
    shape ``(..., L)`` whose last axis runs over layers.
    """
    top1 = trace.top1 if isinstance(trace, LayerTrace) else np.asarray(trace)
    L = top1.shape[-1]
    if L < 1:
        raise ValueError("a layer trace needs at least one layer")
    if L == 1:
        out = np.ones(top1.shape[:-1])
    else:
        changes = (np.diff(top1, axis=-1) != 0).sum(axis=-1)
        out = 1.0 - changes / (L - 1)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class FusionWeights:
    w_a: float
    w_b: float

    def __post_init__(self):
        if not (0 <= self.w_a <= 1 and 0 <= self.w_b <= 1) or not math.isclose(self.w_a + self.w_b, 1.0):
            raise ValueError(f"fusion weights must be in [0, 1] and sum to 1, got ({self.w_a}, {self.w_b})")


@dataclass
class QueryUncertainty:
    """Per-query uncertainty record for modalities A and B.

    Fields are scalars for one query or equally shaped arrays for many.
    ``clipped`` marks queries reverted to static fusion by the threshold rule
    and ``degenerate`` those whose weight ratios were undefined.
    """

    p_a: np.ndarray
    p_b: np.ndarray
    q_a: np.ndarray
    q_b: np.ndarray
    s_a: np.ndarray
    s_b: np.ndarray
    w_a: np.ndarray
    w_b: np.ndarray
    clipped: np.ndarray
    degenerate: np.ndarray
    nc_a: np.ndarray | None = None
    nc_b: np.ndarray | None = None

    @property
    def weights(self):
        return FusionWeights(float(self.w_a), float(self.w_b))


def fusion_weights(p_a, p_b, s_a, s_b, clip_threshold=DEFAULT_CLIP, clip_modality="a", nc_a=None, nc_b=None):
    """Combine typicality (p-value) and stability into per-modality weights.

    ``Q_m = P_m / (P_A + P_B)`` and ``W_m = Q_m S_m / (Q_A S_A + Q_B S_B)``.
    A query whose weight on ``clip_modality`` exceeds ``clip_threshold`` falls
    back to static fusion (0.5, 0.5); ``clip_modality="max"`` applies the rule
    to whichever weight is larger. Zero denominators also fall back to (0.5, 0.5)
    and set ``degenerate``. Inputs broadcast elementwise.
    """
    p_a, p_b, s_a, s_b = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (p_a, p_b, s_a, s_b)))
    for name, v in (("P_A", p_a), ("P_B", p_b), ("S_A", s_a), ("S_B", s_b)):
        if np.any((v < 0) | (v > 1)) or not np.all(np.isfinite(v)):
            raise ValueError(f"{name} must lie in [0, 1]")
    p_sum = p_a + p_b
    ok = p_sum > 0
    q_a = np.divide(p_a, p_sum, out=np.full_like(p_sum, 0.5), where=ok)
    q_b = np.divide(p_b, p_sum, out=np.full_like(p_sum, 0.5), where=ok)
    qs_sum = q_a * s_a + q_b * s_b
    ok &= qs_sum > 0
    w_a = np.divide(q_a * s_a, qs_sum, out=np.full_like(p_sum, 0.5), where=ok)
    w_b = np.where(ok, 1.0 - w_a, 0.5)
    if clip_modality == "a":
        clipped = ok & (w_a > clip_threshold)
    elif clip_modality == "b":
        clipped = ok & (w_b > clip_threshold)
    elif clip_modality == "max":
        clipped = ok & (np.maximum(w_a, w_b) > clip_threshold)
    else:
        raise ValueError(f"clip_modality must be 'a', 'b' or 'max', got {clip_modality!r}")
    w_a = np.where(clipped, 0.5, w_a)
    w_b = np.where(clipped, 0.5, w_b)
    fields = [p_a, p_b, q_a, q_b, s_a, s_b, w_a, w_b, clipped, ~ok]
    if p_a.ndim == 0:
        fields = [v.item() for v in fields]
    return QueryUncertainty(*fields, nc_a=nc_a, nc_b=nc_b)


def fuse_features(f_a, f_b, w_a, w_b=None):
    """``2 * (w_a * f_a + w_b * f_b)``; equal weights give the plain sum ``f_a + f_b``.

    ``w_a`` may be a :class:`FusionWeights`, a scalar, or one weight per row of
    batched features (then ``w_b`` defaults to ``1 - w_a``).
    """
    if isinstance(w_a, FusionWeights):
        w_a, w_b = w_a.w_a, w_a.w_b
    f_a = np.asarray(f_a, dtype=float)
    f_b = np.asarray(f_b, dtype=float)
    if f_a.shape != f_b.shape:
        raise ValueError(f"modality features differ in shape: {f_a.shape} vs {f_b.shape}")
    w_a = np.asarray(w_a, dtype=float)
    w_b = 1.0 - w_a if w_b is None else np.asarray(w_b, dtype=float)
    if w_a.ndim and f_a.ndim > 1:
        w_a, w_b = w_a[..., None], w_b[..., None]
    return 2.0 * (w_a * f_a + w_b * f_b)


class ConformalScorer(BaseEstimator):
    """Calibrate an NC pool on aligned features and score new ones.

    Parameters
    ----------
    fis : FeatureImpressionSet
    smoothed : bool
        Use the ``(k+1)/(n+1)`` p-value.

    Attributes
    ----------
    pool_ : NCPool
    """

    def __init__(self, fis=None, smoothed=False):
        self.fis = fis
        self.smoothed = smoothed

    def fit(self, Z, y):
        Z = check_array(Z, dtype=float)
        self.pool_ = build_nc_pool(Z, y, self.fis)
        self.n_features_in_ = Z.shape[1]
        return self

    def nonconformity(self, Z):
        """Nearest-node NC scores and node indices."""
        return nc_scores(check_array(Z, dtype=float), self.fis)

    def score_samples(self, Z):
        """Conformal p-value of every row (high means typical)."""
        check_is_fitted(self)
        nc, _ = self.nonconformity(Z)
        return conformal_p_value(self.pool_, nc, self.smoothed)
