"""Split-conformal regression intervals: Basic CP on residuals, Feature CP in the
encoder's feature space, and the FI-distance score through a feature aligner.

All three calibrate on a held-out set against a prefit :class:`RegressionModel`
(``g(f(x))``) and expose ``predict`` / ``predict_interval`` like a scikit-learn
regressor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .aligner import FeatureImpressionSet, LossCoefficients, init_feature_impressions, train_joint
from .conformal import NCPool, conformal_quantile
from .numerics import (MlpParams, OptimizerState, init_mlp, mlp_backward, mlp_forward,
                       mlp_value_and_input_gradient, optimizer_step)

SURROGATE_STEPS = 50
SURROGATE_LR = 0.5
BAND_STEPS = 50
GRID_SIZE = 1000


@dataclass
class RegressionModel:
    """Encoder ``f`` followed by a scalar head ``g``."""

    encoder: MlpParams
    head: MlpParams

    def __post_init__(self):
        if self.encoder.output_dim != self.head.input_dim or self.head.output_dim != 1:
            raise ValueError(
                f"encoder emits {self.encoder.output_dim} features, head takes "
                f"{self.head.input_dim} and emits {self.head.output_dim} (needs 1)"
            )

    def features(self, X):
        return mlp_forward(self.encoder, X)

    def predict(self, X):
        return mlp_forward(self.head, self.features(X))[..., 0]


@dataclass
class PredictionInterval:
    lower: float
    upper: float
    alpha: float
    flag: bool = False

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError(f"lower bound {self.lower} exceeds upper bound {self.upper}")

    @property
    def width(self):
        return self.upper - self.lower

    def __contains__(self, y):
        return self.lower <= y <= self.upper


def train_regression_model(X, y, seed=0, hidden=64, feature_dim=16, epochs=60, batch_size=64,
                           learning_rate=2e-3, activation="relu"):
    """Fit ``g(f(x))`` by minibatch Adam on squared error.

    ``f`` is ``d -> hidden -> feature_dim`` and ``g`` is ``feature_dim -> hidden -> 1``.
    """
    X, y = check_X_y(X, y, dtype=float)
    ss = np.random.SeedSequence(seed)
    s_enc, s_head, s_batch = (int(c.generate_state(1)[0]) for c in ss.spawn(3))
    encoder = init_mlp([X.shape[1], hidden, feature_dim], s_enc, activation)
    head = init_mlp([feature_dim, hidden, 1], s_head, activation)
    rng = np.random.default_rng(s_batch)
    n_enc = len(encoder.arrays())
    state = OptimizerState(learning_rate)
    for _ in range(epochs):
        order = rng.permutation(X.shape[0])
        for start in range(0, X.shape[0], batch_size):
            idx = order[start:start + batch_size]
            feats = mlp_forward(encoder, X[idx])
            pred = mlp_forward(head, feats)[:, 0]
            out_grad = (2.0 / idx.size) * (pred - y[idx])[:, None]
            g_head, g_feat = mlp_backward(head, feats, out_grad)
            g_enc, _ = mlp_backward(encoder, X[idx], g_feat)
            new, state = optimizer_step(state, encoder.arrays() + head.arrays(),
                                        g_enc.arrays() + g_head.arrays())
            encoder, head = encoder.with_arrays(new[:n_enc]), head.with_arrays(new[n_enc:])
    return RegressionModel(encoder, head)


class SplitMLPRegressor(RegressorMixin, BaseEstimator):
    """scikit-learn wrapper over :func:`train_regression_model`.

    ``transform`` exposes the encoder features ``f(x)``.
    """

    def __init__(self, hidden=64, feature_dim=16, epochs=60, batch_size=64, learning_rate=2e-3, seed=0):
        self.hidden = hidden
        self.feature_dim = feature_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed

    def fit(self, X, y):
        self.model_ = train_regression_model(X, y, self.seed, self.hidden, self.feature_dim, self.epochs,
                                             self.batch_size, self.learning_rate)
        self.n_features_in_ = self.model_.encoder.input_dim
        return self

    def predict(self, X):
        check_is_fitted(self)
        return self.model_.predict(check_array(X, dtype=float))

    def transform(self, X):
        check_is_fitted(self)
        return self.model_.features(check_array(X, dtype=float))


def surrogate_search(head, start, targets, steps=SURROGATE_STEPS, learning_rate=SURROGATE_LR):
    """Gradient descent on ``(g(v) - y)**2`` from ``start``, one row per target.

    A step that would raise a row's loss is rejected and that row's step size
    halved, so the loss never increases.

    Returns
    -------
    v : ndarray of shape (n, dim)
    loss : ndarray of shape (n,)
    """
    v = np.array(start, dtype=float, copy=True)
    y = np.asarray(targets, dtype=float).ravel()
    out, grad = mlp_value_and_input_gradient(head, v)
    loss = (out[:, 0] - y) ** 2
    step = np.full(y.shape, float(learning_rate))
    for _ in range(steps):
        cand = v - (step * 2.0 * (out[:, 0] - y))[:, None] * grad
        out_c, grad_c = mlp_value_and_input_gradient(head, cand)
        loss_c = (out_c[:, 0] - y) ** 2
        ok = loss_c <= loss
        v[ok], out[ok], grad[ok], loss[ok] = cand[ok], out_c[ok], grad_c[ok], loss_c[ok]
        step[~ok] *= 0.5
    return v, loss


def feature_cp_surrogate(model, x, y, steps=SURROGATE_STEPS, lr=SURROGATE_LR):
    """Surrogate feature ``v*`` for one labelled point, searched from ``f(x)``."""
    v, _ = surrogate_search(model.head, model.features(np.asarray(x, dtype=float)[None, :]), [y], steps, lr)
    return v[0]


def make_y_grid(y_train, size=GRID_SIZE):
    """Candidate targets spanning the training range padded by two standard deviations."""
    y_train = np.asarray(y_train, dtype=float)
    pad = 2.0 * y_train.std()
    return np.linspace(y_train.min() - pad, y_train.max() + pad, size)


class _ConformalRegressor(RegressorMixin, BaseEstimator):
    def predict(self, X):
        return self.model.predict(check_array(X, dtype=float))

    def quantile(self, alpha=None):
        check_is_fitted(self)
        return conformal_quantile(self.pool_, self.alpha if alpha is None else alpha)

    def _fit_pool(self, scores):
        self.pool_ = NCPool(scores)
        return self


class BasicCPRegressor(_ConformalRegressor):
    """Absolute-residual split conformal regressor around a prefit model."""

    def __init__(self, model=None, alpha=0.1):
        self.model = model
        self.alpha = alpha

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        self.n_features_in_ = X.shape[1]
        return self._fit_pool(np.abs(y - self.model.predict(X)))

    def predict_interval(self, X, alpha=None):
        q = self.quantile(alpha)
        pred = self.predict(X)
        return np.column_stack([pred - q, pred + q])


def ball_range(head, centres, radius, steps=BAND_STEPS):
    """Approximate ``min`` and ``max`` of the scalar ``head`` over balls.

    Projected normalised-gradient ascent (and descent) from the boundary point
    along the gradient at each centre; the step shrinks linearly to zero and
    the best value seen is kept, so the result never falls below the value at
    the centre or at the first boundary point.
    """
    centres = np.atleast_2d(np.asarray(centres, dtype=float))
    radius = np.broadcast_to(np.asarray(radius, dtype=float), (centres.shape[0],))[:, None]

    def unit(g):
        norm = np.linalg.norm(g, axis=1, keepdims=True)
        return np.divide(g, norm, out=np.zeros_like(g), where=norm > 0)

    centre_val, g0 = mlp_value_and_input_gradient(head, centres)
    bounds = []
    for sign in (-1.0, 1.0):
        v = centres + sign * radius * unit(g0)
        best = sign * centre_val[:, 0]
        for k in range(steps):
            val, g = mlp_value_and_input_gradient(head, v)
            best = np.maximum(best, sign * val[:, 0])
            v = v + sign * (0.3 * (1 - k / steps)) * radius * unit(g)
            d = v - centres
            norm = np.linalg.norm(d, axis=1, keepdims=True)
            v = centres + d * np.minimum(1.0, np.divide(radius, norm, out=np.ones_like(norm), where=norm > 0))
        best = np.maximum(best, sign * mlp_forward(head, v)[:, 0])
        bounds.append(sign * best)
    return bounds[0], bounds[1]


def score_range(head, centres, radius, steps=SURROGATE_STEPS, learning_rate=SURROGATE_LR, iters=30):
    """Targets whose surrogate distance from each centre is at most ``radius``.

    For every row, walks up and down from ``g(centre)``: the first offset comes
    from the local slope, doubles until a target is rejected, then bisection
    narrows the gap between the last accepted and first rejected target. The
    accepted set is taken to be the interval around the prediction, which holds
    when the surrogate distance grows with ``|y - g(centre)|``.

    Returns
    -------
    lower, upper : ndarray of shape (n,)
    """
    centres = np.atleast_2d(np.asarray(centres, dtype=float))
    radius = np.broadcast_to(np.asarray(radius, dtype=float), (centres.shape[0],))
    out, grad = mlp_value_and_input_gradient(head, centres)
    pred = out[:, 0]
    first = np.maximum(radius * np.linalg.norm(grad, axis=1), 1e-12)

    def accepted(rows, targets):
        v, _ = surrogate_search(head, centres[rows], targets, steps, learning_rate)
        return np.linalg.norm(v - centres[rows], axis=1) <= radius[rows]

    ends = []
    for sign in (-1.0, 1.0):
        inside = np.zeros_like(pred)
        outside = np.full_like(pred, np.inf)
        trial = first.copy()
        for _ in range(60):
            rows = np.flatnonzero(np.isinf(outside))
            if rows.size == 0:
                break
            ok = accepted(rows, pred[rows] + sign * trial[rows])
            inside[rows[ok]] = trial[rows[ok]]
            outside[rows[~ok]] = trial[rows[~ok]]
            trial[rows[ok]] *= 2.0
        rows = np.flatnonzero(np.isfinite(outside))
        for _ in range(iters):
            if rows.size == 0:
                break
            mid = 0.5 * (inside[rows] + outside[rows])
            ok = accepted(rows, pred[rows] + sign * mid)
            inside[rows] = np.where(ok, mid, inside[rows])
            outside[rows] = np.where(ok, outside[rows], mid)
        ends.append(pred + sign * inside)
    return ends[0], ends[1]


class FeatureCPRegressor(_ConformalRegressor):
    """Split conformal regression with scores measured in feature space.

    Each calibration point gets a surrogate feature ``v*`` near ``f(x)`` with
    ``g(v*) ~ y``; the score is ``||f(x) - v*||``. With ``band="score"`` a test
    interval holds the targets whose own surrogate score is within ``Q``
    (:func:`score_range`), so calibration and test use the same score.
    ``band="ball"`` instead takes the range of ``g`` over the ball of radius
    ``Q`` around ``f(x')``: the extremes found by :func:`ball_range`, widened by
    ``g`` at the centre and at ``band_samples`` fixed random points on the
    sphere. The surrogate only finds the preimage reachable by descent from
    ``f(x)``, so the ball range is wider than the score allows and over-covers.
    """

    def __init__(self, model=None, alpha=0.1, band="score", band_samples=256, steps=SURROGATE_STEPS,
                 learning_rate=SURROGATE_LR, band_steps=BAND_STEPS, seed=0):
        self.model = model
        self.alpha = alpha
        self.band = band
        self.band_samples = band_samples
        self.steps = steps
        self.learning_rate = learning_rate
        self.band_steps = band_steps
        self.seed = seed

    def fit(self, X, y):
        if self.band not in ("score", "ball"):
            raise ValueError(f"band must be 'score' or 'ball', got {self.band!r}")
        X, y = check_X_y(X, y, dtype=float)
        self.n_features_in_ = X.shape[1]
        feats = self.model.features(X)
        v, self.surrogate_loss_ = surrogate_search(self.model.head, feats, y, self.steps, self.learning_rate)
        dirs = np.random.default_rng(self.seed).normal(size=(self.band_samples, feats.shape[1]))
        self.directions_ = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        return self._fit_pool(np.linalg.norm(feats - v, axis=1))

    def predict_interval(self, X, alpha=None):
        q = self.quantile(alpha)
        feats = self.model.features(check_array(X, dtype=float))
        if self.band == "score":
            return np.column_stack(score_range(self.model.head, feats, q, self.steps, self.learning_rate))
        lo, hi = ball_range(self.model.head, feats, q, self.band_steps)
        if self.band_samples:
            n, d = feats.shape
            pts = feats[:, None, :] + q * self.directions_[None, :, :]
            vals = mlp_forward(self.model.head, pts.reshape(-1, d))[:, 0].reshape(n, -1)
            lo, hi = np.minimum(lo, vals.min(axis=1)), np.maximum(hi, vals.max(axis=1))
        return np.column_stack([lo, hi])


def train_regression_aligner(model, X, y, dim=16, hidden=(32,), epochs=500, learning_rate=1e-3,
                             refine_epochs=100, seed=0, steps=SURROGATE_STEPS, lr=SURROGATE_LR):
    """Fit an aligner and a single FI node on label-consistent surrogate features.

    The training features are ``v*(x_i, y_i)`` for the proper training rows, so
    the node becomes the geometric median of features that decode to the true
    targets.
    """
    X, y = check_X_y(X, y, dtype=float)
    v, _ = surrogate_search(model.head, model.features(X), y, steps, lr)
    ss = np.random.SeedSequence(seed)
    s_net, s_fi, s_train = (int(c.generate_state(1)[0]) for c in ss.spawn(3))
    aligner = init_mlp([v.shape[1], *hidden, dim], s_net)
    fis = init_feature_impressions(1, dim, s_fi)
    coeffs = LossCoefficients.from_num_queries(v.shape[0])
    res = train_joint([(v, np.zeros(v.shape[0], dtype=int))], aligner, fis, coeffs, epochs, s_train,
                      learning_rate, refine_epochs=refine_epochs)
    return res.aligner, res.fis


class CocoonCPRegressor(_ConformalRegressor):
    """Split conformal regression scored by distance to a single FI node.

    ``NC(x, y) = ||h(v*(x, y)) - w*||`` where ``v*`` is the surrogate feature
    for target ``y``. The prediction set keeps the grid targets whose score is
    within the calibrated quantile and the interval is its hull. With
    ``refine=True`` the grid is scanned every ``coarse_stride`` points and only
    the cells just outside the outermost accepted points are filled in.
    """

    def __init__(self, model=None, aligner=None, fis=None, y_grid=None, alpha=0.1,
                 steps=SURROGATE_STEPS, learning_rate=SURROGATE_LR, refine=True, coarse_stride=10,
                 chunk_rows=40_000):
        self.model = model
        self.aligner = aligner
        self.fis = fis
        self.y_grid = y_grid
        self.alpha = alpha
        self.steps = steps
        self.learning_rate = learning_rate
        self.refine = refine
        self.coarse_stride = coarse_stride
        self.chunk_rows = chunk_rows

    def _node(self):
        fis = self.fis if isinstance(self.fis, FeatureImpressionSet) else FeatureImpressionSet(self.fis)
        return fis.nodes[0]

    def nonconformity(self, feats, targets):
        """Scores for paired rows of encoder features and candidate targets."""
        node = self._node()
        out = np.empty(len(targets))
        for s in range(0, len(targets), self.chunk_rows):
            sl = slice(s, s + self.chunk_rows)
            v, _ = surrogate_search(self.model.head, feats[sl], targets[sl], self.steps, self.learning_rate)
            out[sl] = np.linalg.norm(mlp_forward(self.aligner, v) - node, axis=1)
        return out

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        self.n_features_in_ = X.shape[1]
        return self._fit_pool(self.nonconformity(self.model.features(X), y))

    def _scan(self, feats, q, rows, cols):
        grid = np.asarray(self.y_grid, dtype=float)
        return self.nonconformity(feats[rows], grid[cols]) <= q

    def predict_interval(self, X, alpha=None, return_flags=False):
        q = self.quantile(alpha)
        X = check_array(X, dtype=float)
        if self.y_grid is None:
            raise ValueError("y_grid is not set; build one with make_y_grid(y_train)")
        feats = self.model.features(X)
        grid = np.asarray(self.y_grid, dtype=float)
        n, G = X.shape[0], grid.size
        lo = np.full(n, -1)
        hi = np.full(n, -1)

        if self.refine and G > 2 * self.coarse_stride:
            coarse = np.unique(np.r_[np.arange(0, G, self.coarse_stride), G - 1])
            rows = np.repeat(np.arange(n), coarse.size)
            inside = self._scan(feats, q, rows, np.tile(coarse, n)).reshape(n, coarse.size)
            found = inside.any(axis=1)
            first = np.argmax(inside, axis=1)
            last = coarse.size - 1 - np.argmax(inside[:, ::-1], axis=1)
            lo[found] = coarse[first[found]]
            hi[found] = coarse[last[found]]
            # fill in the cells just outside the outermost coarse hits
            r_list, c_list = [], []
            for i in np.flatnonzero(found):
                if first[i] > 0:
                    cells = np.arange(coarse[first[i] - 1] + 1, coarse[first[i]])
                    r_list.append(np.full(cells.size, i))
                    c_list.append(cells)
                if last[i] < coarse.size - 1:
                    cells = np.arange(coarse[last[i]] + 1, coarse[last[i] + 1])
                    r_list.append(np.full(cells.size, i))
                    c_list.append(cells)
            if r_list:
                r_all, c_all = np.concatenate(r_list), np.concatenate(c_list)
                ok = self._scan(feats, q, r_all, c_all)
                for i, c in zip(r_all[ok], c_all[ok]):
                    lo[i] = min(lo[i], c)
                    hi[i] = max(hi[i], c)
            todo = np.flatnonzero(~found)
        else:
            todo = np.arange(n)

        if todo.size:
            rows = np.repeat(todo, G)
            inside = self._scan(feats, q, rows, np.tile(np.arange(G), todo.size)).reshape(todo.size, G)
            has = inside.any(axis=1)
            lo[todo[has]] = np.argmax(inside[has], axis=1)
            hi[todo[has]] = G - 1 - np.argmax(inside[has, ::-1], axis=1)

        empty = lo < 0
        pred = mlp_forward(self.model.head, feats)[:, 0]
        lower = np.where(empty, pred, grid[np.maximum(lo, 0)])
        upper = np.where(empty, pred, grid[np.maximum(hi, 0)])
        out = np.column_stack([lower, upper])
        return (out, empty) if return_flags else out


def _split_calib(calib):
    X, y = calib
    return check_X_y(X, y, dtype=float)


def basic_cp_interval(model, calib, x, alpha):
    """Residual-quantile interval around ``g(f(x))``."""
    est = BasicCPRegressor(model, alpha).fit(*_split_calib(calib))
    lo, hi = est.predict_interval(np.asarray(x, dtype=float)[None, :])[0]
    return PredictionInterval(lo, hi, alpha)


def feature_cp_interval(model, calib, x, alpha, band="score", band_samples=256, seed=0):
    est = FeatureCPRegressor(model, alpha, band, band_samples, seed=seed).fit(*_split_calib(calib))
    lo, hi = est.predict_interval(np.asarray(x, dtype=float)[None, :])[0]
    return PredictionInterval(lo, hi, alpha)


def cocoon_nc_interval(model, aligner, fis, calib, x, alpha, y_grid):
    est = CocoonCPRegressor(model, aligner, fis, y_grid, alpha).fit(*_split_calib(calib))
    out, empty = est.predict_interval(np.asarray(x, dtype=float)[None, :], return_flags=True)
    return PredictionInterval(out[0, 0], out[0, 1], alpha, bool(empty[0]))
