"""Geometric median via Weiszfeld iteration, with the Vardi-Zhang fix for iterates
that land on a data point."""

from __future__ import annotations

import warnings
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import ConvergenceWarning
from sklearn.utils.validation import check_array, check_is_fitted

SINGULAR_EPS = 1e-12


class MedianResult(NamedTuple):
    median: np.ndarray
    n_iter: int
    converged: bool
    residual: float
    objective_history: list


def _points(points):
    return check_array(points, ensure_min_samples=1, ensure_min_features=1, dtype=float)


def distance_sum(points, y):
    """Objective minimised by the geometric median: sum of Euclidean distances."""
    points = _points(points)
    return float(np.linalg.norm(points - np.asarray(y, dtype=float), axis=1).sum())


def _residual(points, y, eps):
    diff = points - y
    dist = np.linalg.norm(diff, axis=1)
    hit = dist <= eps
    pull = np.linalg.norm((diff[~hit] / dist[~hit, None]).sum(axis=0))
    if not hit.any():
        return float(pull)
    # subgradient condition at a data point of multiplicity k: ||pull|| <= k
    return float(max(0.0, pull - hit.sum()))


def weiszfeld_residual(points, candidate, eps=SINGULAR_EPS):
    """Norm of the summed unit vectors from ``candidate`` towards every point.

    Zero exactly at the geometric median when the candidate is distinct from all
    points. When the candidate sits on ``k`` coincident points, those are left out
    of the sum and the optimality gap ``max(0, ||sum|| - k)`` is returned instead,
    which is again zero iff the candidate is optimal.
    """
    points = _points(points)
    y = np.asarray(candidate, dtype=float)
    if y.shape != (points.shape[1],):
        raise ValueError(f"candidate has shape {y.shape}, points have dimension {points.shape[1]}")
    return _residual(points, y, eps)


def _collinear_median(points):
    origin = points[0]
    centred = points - origin
    if points.shape[1] == 1:
        return np.array([np.median(points[:, 0])])
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    if s[0] == 0.0:
        return origin.copy()
    if len(s) > 1 and s[1] > 1e-12 * s[0]:
        return None
    direction = vt[0]
    return origin + np.median(centred @ direction) * direction


def geometric_median(points, tol=1e-9, max_iter=10_000, return_info=False):
    """Point minimising the sum of Euclidean distances to ``points``.

    Parameters
    ----------
    points : array-like of shape (n_points, dim)
    tol : float
        Stop once :func:`weiszfeld_residual` of the iterate is at most ``tol``.
    max_iter : int
    return_info : bool
        Also return iteration count, convergence flag, final residual and the
        objective value of every iterate.

    Notes
    -----
    Non-unique cases are resolved deterministically: two points give their
    midpoint and collinear clouds give the median along the line (midpoint of
    the middle pair for an even count). A :class:`ConvergenceWarning` is issued
    when ``max_iter`` runs out; the best iterate seen is returned.
    """
    points = _points(points)
    n = points.shape[0]
    if n == 1:
        y = points[0].copy()
    elif n == 2:
        y = 0.5 * (points[0] + points[1])
    else:
        y = _collinear_median(points)
    if y is not None:
        result = MedianResult(y, 0, True, _residual(points, y, SINGULAR_EPS), [distance_sum(points, y)])
        return result if return_info else result.median

    y = points.mean(axis=0)
    history = []
    best, best_obj = y, np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        diff = points - y
        dist = np.linalg.norm(diff, axis=1)
        obj = float(dist.sum())
        history.append(obj)
        if obj < best_obj:
            best, best_obj = y, obj

        # a data point is the median iff the pull of the others is at most its multiplicity
        j = int(np.argmin(dist))
        to_j = points - points[j]
        d_j = np.linalg.norm(to_j, axis=1)
        same = d_j <= SINGULAR_EPS
        pull = np.linalg.norm((to_j[~same] / d_j[~same, None]).sum(axis=0))
        if pull <= same.sum():
            best, converged = points[j].copy(), True
            break

        hit = dist <= SINGULAR_EPS
        inv = np.zeros(n)
        inv[~hit] = 1.0 / dist[~hit]
        weiszfeld = (points * inv[:, None]).sum(axis=0) / inv.sum()
        if not hit.any():
            if np.linalg.norm((diff * inv[:, None]).sum(axis=0)) <= tol:
                best, converged = y, True
                break
            y = weiszfeld
        else:
            # Vardi-Zhang: blend the Weiszfeld map with the current point
            k = hit.sum()
            r = np.linalg.norm((diff * inv[:, None]).sum(axis=0))
            y = max(0.0, 1.0 - k / r) * weiszfeld + min(1.0, k / r) * y
    if not converged:
        warnings.warn(
            f"Weiszfeld iteration stopped after {max_iter} iterations "
            f"(residual {_residual(points, best, SINGULAR_EPS):.3g} > tol {tol:g})",
            ConvergenceWarning,
            stacklevel=2,
        )
    result = MedianResult(best, it, converged, _residual(points, best, SINGULAR_EPS), history)
    return result if return_info else result.median


class GeometricMedian(BaseEstimator):
    """Estimator wrapper around :func:`geometric_median`.

    Attributes
    ----------
    median_ : ndarray of shape (n_features,)
    n_iter_ : int
    converged_ : bool
    residual_ : float
    """

    def __init__(self, tol=1e-9, max_iter=10_000):
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y=None):
        res = geometric_median(X, tol=self.tol, max_iter=self.max_iter, return_info=True)
        self.median_ = res.median
        self.n_iter_ = res.n_iter
        self.converged_ = res.converged
        self.residual_ = res.residual
        self.n_features_in_ = self.median_.shape[0]
        return self

    def transform(self, X):
        """Distance of every row of ``X`` to the fitted median."""
        check_is_fitted(self)
        X = check_array(X, dtype=float)
        return np.linalg.norm(X - self.median_, axis=1)[:, None]
