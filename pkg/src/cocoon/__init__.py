"""Conformal uncertainty for multi-modal feature fusion.

Feature impressions trained as geometric medians of aligned features give a
nonconformity score; conformal p-values and cross-layer stability of that
score weight each modality per query. Split conformal regression baselines
and a seeded fusion simulator exercise the pieces end to end.
"""

from .aligner import FeatureAligner, FeatureImpressionSet, LossCoefficients, loss_total, train_joint
from .baselines import BasicCPRegressor, CocoonCPRegressor, FeatureCPRegressor, SplitMLPRegressor
from .conformal import (ConformalScorer, NCPool, conformal_p_value, conformal_quantile, fuse_features,
                        fusion_weights, nc_score, stability_score)
from .geometry import GeometricMedian, geometric_median, weiszfeld_residual

__version__ = "0.1.0"

__all__ = [
    "BasicCPRegressor",
    "CocoonCPRegressor",
    "ConformalScorer",
    "FeatureAligner",
    "FeatureCPRegressor",
    "FeatureImpressionSet",
    "GeometricMedian",
    "LossCoefficients",
    "NCPool",
    "SplitMLPRegressor",
    "conformal_p_value",
    "conformal_quantile",
    "fuse_features",
    "fusion_weights",
    "geometric_median",
    "loss_total",
    "nc_score",
    "stability_score",
    "train_joint",
    "weiszfeld_residual",
]
