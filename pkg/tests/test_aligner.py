import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cocoon.aligner import (AlignedBatch, FeatureAligner, FeatureImpressionSet, LossCoefficients, align,
                            init_feature_impressions, loss_gradients, loss_total, train_joint)
from cocoon.geometry import weiszfeld_residual
from cocoon.numerics import MlpParams, gradient_check, identity_mlp, init_mlp, mlp_forward

EPS = 1e-8


def two_class_cloud(seed, n=20):
    """Two classes, each seen by two modalities with slightly shifted means."""
    rng = np.random.default_rng(seed)
    means = {0: ([2.0, 0.0], [1.5, 0.5]), 1: ([-2.0, 0.0], [-1.5, -0.5])}
    X, y = [], []
    for c, (ma, mb) in means.items():
        X += [np.array(ma) + 0.5 * rng.normal(size=(n, 2)), np.array(mb) + 0.5 * rng.normal(size=(n, 2))]
        y += [c] * (2 * n)
    return np.vstack(X), np.array(y)


def reference_terms(features, labels, nodes, eps):
    # direct double loop over classes and their members
    center, geomed = 0.0, 0.0
    for c in range(len(nodes)):
        pull = np.zeros(nodes.shape[1])
        for h, lab in zip(features, labels):
            if lab != c:
                continue
            center += np.sqrt(np.sum((nodes[c] - h) ** 2))
            pull += (h - nodes[c]) / (np.sqrt(np.sum((h - nodes[c]) ** 2)) + eps)
        geomed += float(pull @ pull)
    separate = sum(np.sum((nodes[j] - nodes[k]) ** 2) for j in range(len(nodes)) for k in range(j + 1, len(nodes)))
    return center, geomed, separate


def random_config(seed, n=12, c=3, dim=4):
    rng = np.random.default_rng(seed)
    return AlignedBatch(rng.normal(size=(n, dim)), rng.integers(0, c, n)), FeatureImpressionSet(rng.normal(size=(c, dim)))


COEFFS = LossCoefficients(0.7, 0.4, 0.05)


def test_default_coefficients():
    c = LossCoefficients.from_num_queries(70)
    assert (c.alpha_c, c.beta_c, c.gamma_c) == (5 / 70, 3 / 70, 1 / 490)


def test_opposite_features_cancel():
    terms = loss_total(AlignedBatch([[1.0, 0.0], [-1.0, 0.0]], [0, 0]), FeatureImpressionSet([[0.0, 0.0]]), COEFFS)
    assert terms.center == 2.0
    assert terms.geomed == pytest.approx(0.0, abs=1e-24)


def test_parallel_features_add():
    terms = loss_total(AlignedBatch([[1.0, 0.0], [1.0, 0.0]], [0, 0]), FeatureImpressionSet([[0.0, 0.0]]), COEFFS)
    assert terms.geomed == pytest.approx(4.0, rel=1e-7)


def test_empty_batch_only_separates():
    terms = loss_total(AlignedBatch(np.zeros((0, 2)), []), FeatureImpressionSet([[0.0, 0.0], [2.0, 0.0]]), COEFFS)
    assert terms.empty and (terms.center, terms.geomed, terms.separate) == (0.0, 0.0, 4.0)
    assert terms.total == pytest.approx(-COEFFS.gamma_c * 4)


@pytest.mark.parametrize("seed", range(10))
def test_terms_match_reference_loops(seed):
    batch, fis = random_config(seed)
    terms = loss_total(batch, fis, COEFFS, EPS)
    center, geomed, separate = reference_terms(batch.features, batch.labels, fis.nodes, EPS)
    assert terms.center == pytest.approx(center, abs=1e-10)
    assert terms.geomed == pytest.approx(geomed, abs=1e-10)
    assert terms.separate == pytest.approx(separate, abs=1e-10)
    assert terms.total == pytest.approx(COEFFS.alpha_c * center + COEFFS.beta_c * geomed - COEFFS.gamma_c * separate,
                                        abs=1e-10)


def test_label_out_of_range_rejected():
    with pytest.raises(ValueError, match="labels must lie in 0..1"):
        loss_total(AlignedBatch(np.zeros((1, 2)), [2]), FeatureImpressionSet(np.eye(2)), COEFFS)


def test_separation_gradient_closed_form():
    nodes = np.array([[0.0, 0.0], [3.0, 1.0]])
    _, g = loss_gradients(AlignedBatch(np.zeros((0, 2)), []), FeatureImpressionSet(nodes), COEFFS)
    np.testing.assert_allclose(g[0], 2 * COEFFS.gamma_c * (nodes[1] - nodes[0]))
    np.testing.assert_allclose(g[1], 2 * COEFFS.gamma_c * (nodes[0] - nodes[1]))


def test_symmetric_geomed_gradient_vanishes():
    c = LossCoefficients(0.0, 1.0, 0.0)
    _, g = loss_gradients(AlignedBatch([[1.0, 0.0], [-1.0, 0.0]], [0, 0]), FeatureImpressionSet([[0.0, 0.0]]), c)
    np.testing.assert_allclose(g, 0.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_gradients_match_finite_differences(seed):
    batch, fis = random_config(seed)
    fg, ng = loss_gradients(batch, fis, COEFFS, EPS)
    nf = batch.features.size

    def f(v):
        return loss_total(AlignedBatch(v[:nf].reshape(batch.features.shape), batch.labels),
                          FeatureImpressionSet(v[nf:].reshape(fis.nodes.shape)), COEFFS, EPS).total

    point = np.concatenate([batch.features.ravel(), fis.nodes.ravel()])
    assert gradient_check(f, lambda v: np.concatenate([fg.ravel(), ng.ravel()]), point) <= 1e-4


def test_coincident_feature_stays_finite():
    batch = AlignedBatch([[1.0, 1.0], [1.0, 1.0], [0.0, 2.0]], [0, 0, 0])
    fis = FeatureImpressionSet([[1.0, 1.0]])
    terms = loss_total(batch, fis, COEFFS)
    fg, ng = loss_gradients(batch, fis, COEFFS)
    assert np.isfinite(terms.total) and np.all(np.isfinite(fg)) and np.all(np.isfinite(ng))
    # the guarded unit vector d / (|d| + eps) has Jacobian I / eps at d = 0
    pull = np.array([-1.0, 1.0]) / (np.sqrt(2) + 1e-8)
    np.testing.assert_allclose(fg[:2], np.tile(COEFFS.beta_c * 2 * pull / 1e-8, (2, 1)), rtol=1e-7)


def test_features_on_nodes_are_a_fixed_point():
    fis = init_feature_impressions(3, 4, seed=1)
    batch = AlignedBatch(np.repeat(fis.nodes, 5, axis=0), np.repeat(np.arange(3), 5))
    terms = loss_total(batch, fis, COEFFS)
    assert terms.center == 0.0 and terms.geomed == 0.0
    fg, ng = loss_gradients(batch, fis, COEFFS)
    assert np.linalg.norm(fg) <= 1e-6
    sep_grad = 2.0 * (3 * fis.nodes - fis.nodes.sum(axis=0))
    assert np.linalg.norm(ng + COEFFS.gamma_c * sep_grad) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), shift=st.floats(-20, 20))
def test_permutation_and_translation_invariance(seed, shift):
    batch, fis = random_config(seed)
    base = loss_total(batch, fis, COEFFS)
    perm = np.random.default_rng(seed + 1).permutation(len(batch.labels))
    shuffled = loss_total(AlignedBatch(batch.features[perm], batch.labels[perm]), fis, COEFFS)
    assert shuffled.total == pytest.approx(base.total, rel=1e-12, abs=1e-12)
    moved = loss_total(AlignedBatch(batch.features + shift, batch.labels), FeatureImpressionSet(fis.nodes + shift), COEFFS)
    assert moved.center == pytest.approx(base.center, rel=1e-9)
    assert moved.geomed == pytest.approx(base.geomed, rel=1e-6, abs=1e-9)
    assert moved.separate == pytest.approx(base.separate, rel=1e-9)


def test_class_order_invariance():
    batch, fis = random_config(3)
    order = np.array([2, 0, 1])
    inverse = np.argsort(order)
    relabelled = loss_total(AlignedBatch(batch.features, inverse[batch.labels]), FeatureImpressionSet(fis.nodes[order]),
                            COEFFS)
    assert relabelled.total == pytest.approx(loss_total(batch, fis, COEFFS).total, rel=1e-12)


def test_align_delegates_to_forward():
    np.testing.assert_array_equal(align(identity_mlp(3), [1.0, -2.0, 0.5]), [1.0, -2.0, 0.5])
    p = init_mlp([3, 5, 4], seed=2)
    x = np.random.default_rng(0).normal(size=3)
    assert np.array_equal(align(p, x), mlp_forward(p, x))
    bias_path = MlpParams([np.eye(3)], [np.array([1.0, 0.0, -1.0])], "tanh")
    np.testing.assert_array_equal(align(bias_path, np.zeros(3)), [1.0, 0.0, -1.0])


def test_node_only_descent_reaches_geometric_median():
    X, y = two_class_cloud(4)
    X, y = X[y == 0], y[y == 0]
    coeffs = LossCoefficients(5 / 40, 3 / 40, 0.0)
    res = train_joint([(X, y)], identity_mlp(2), FeatureImpressionSet([[0.0, 0.0]]), coeffs, epochs=300,
                      train_aligner=False, learning_rate=5e-2, refine_epochs=400)
    assert weiszfeld_residual(X, res.fis.nodes[0]) <= 1e-5


@pytest.mark.parametrize("seed", range(3))
def test_joint_training_reaches_medians_without_collapse(seed):
    X, y = two_class_cloud(seed)
    res = train_joint([(X, y)], init_mlp([2, 16, 8], seed + 1), init_feature_impressions(2, 8, seed + 2),
                      LossCoefficients.from_num_queries(len(y) // 2), epochs=500, seed=3)
    Z = mlp_forward(res.aligner, X)
    for c in range(2):
        P, w = Z[y == c], res.fis.nodes[c]
        assert weiszfeld_residual(P, w) <= 0.05 * np.linalg.norm(P - w, axis=1).mean()
    assert res.fis.min_pairwise_distance() >= 0.5 * res.initial_min_distance
    trace = np.convolve(res.loss_trace, np.ones(25) / 25, mode="valid")
    assert trace[-1] < trace[0]


def test_separation_weight_spreads_nodes():
    X, y = two_class_cloud(0)
    base = LossCoefficients.from_num_queries(len(y) // 2)
    spread = []
    for gamma in (base.gamma_c / 10, base.gamma_c, base.gamma_c * 10):
        res = train_joint([(X, y)], init_mlp([2, 16, 8], 1), init_feature_impressions(2, 8, 2),
                          LossCoefficients(base.alpha_c, base.beta_c, gamma), epochs=500, seed=3)
        spread.append(res.fis.min_pairwise_distance())
    assert spread[0] < spread[1] < spread[2]


def test_nan_features_abort_training():
    X, y = two_class_cloud(0)
    X[0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        train_joint([(X, y)], init_mlp([2, 4, 3], 0), init_feature_impressions(2, 3, 0),
                    LossCoefficients.from_num_queries(40), epochs=2)


def test_estimator_fit_transform_predict():
    X, y = two_class_cloud(1)
    est = FeatureAligner(n_components=8, hidden_dims=(16,), epochs=300, seed=0).fit(X, y)
    Z = est.transform(X)
    assert Z.shape == (len(X), 8)
    assert (est.predict(X) == y).mean() > 0.95
    assert est.get_params()["n_components"] == 8
    assert est.fis_.num_classes == 2
