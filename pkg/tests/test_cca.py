import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import NULL_THRESHOLD_N2000_D10, null_threshold

from layerprobe.cca import (
    CcaConfig,
    CcaError,
    DegenerateCovarianceError,
    component_correlations,
    cross_validated_cca,
    fit_cca,
    fold_indices,
    layerwise_cca_sweep,
    projection_weights,
    pwcca_score,
)

def test_null_threshold_is_reproducible():
    assert null_threshold(trials=5000) == pytest.approx(NULL_THRESHOLD_N2000_D10, abs=0.005)


def _well_conditioned(rng, d, max_cond=1e3):
    while True:
        a = rng.normal(size=(d, d))
        if np.linalg.cond(a) < max_cond:
            return a


def test_identical_views_score_one():
    X = np.random.default_rng(0).normal(size=(500, 8))
    m = fit_cca(X, X)
    assert pwcca_score(m, X, X) == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_allclose(m.train_correlations, 1.0, atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16), d=st.integers(2, 12))
def test_invertible_transform_is_invisible(seed, d):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(400, d))
    A = _well_conditioned(rng, d)
    assert pwcca_score(fit_cca(X, X @ A), X, X @ A) >= 0.99


def test_weights_are_a_distribution():
    rng = np.random.default_rng(1)
    X, Y = rng.normal(size=(300, 6)), rng.normal(size=(300, 4))
    w = projection_weights(fit_cca(X, Y), X)
    assert w.shape == (4,)
    assert np.all(w >= 0)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)


def test_weights_hand_computed():
    # 2-d X, 1-d Y: one component; its weight must be exactly 1
    rng = np.random.default_rng(2)
    X = rng.normal(size=(100, 2))
    Y = X[:, :1] + 0.1 * rng.normal(size=(100, 1))
    assert projection_weights(fit_cca(X, Y), X)[0] == 1.0


def test_score_bounded_and_symmetric_in_signal():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(600, 2))
    X = np.hstack([z, rng.normal(size=(600, 3))])
    Y = z @ rng.normal(size=(2, 2)) + 0.5 * rng.normal(size=(600, 2))
    s = pwcca_score(fit_cca(X, Y), X, Y)
    assert 0.0 <= s <= 1.0
    assert s > 0.5


def test_correlations_clipped_to_unit_interval():
    rng = np.random.default_rng(4)
    X, Y = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
    m = fit_cca(X[:25], Y[:25])
    rho = component_correlations(m, X[25:], Y[25:])
    assert np.all((rho >= 0) & (rho <= 1))


def test_independent_views_below_null_threshold():
    rng = np.random.default_rng(5)
    X, Y = rng.normal(size=(2000, 10)), rng.normal(size=(2000, 10))
    assert cross_validated_cca(X, Y, CcaConfig(seed=0)) < NULL_THRESHOLD_N2000_D10


def test_folds_partition_rows():
    folds = fold_indices(103, 10, seed=7)
    assert len(folds) == 10
    assert sorted(np.concatenate(folds)) == list(range(103))
    assert {len(f) for f in folds} == {10, 11}
    for a, b in zip(folds, fold_indices(103, 10, seed=7)):
        np.testing.assert_array_equal(a, b)


def test_cross_validation_averages_first_three_folds():
    rng = np.random.default_rng(6)
    z = rng.normal(size=(300, 1))
    X = np.hstack([z, rng.normal(size=(300, 2))])
    Y = z + rng.normal(size=(300, 1))
    cfg = CcaConfig(seed=11)
    folds = fold_indices(300, 10, 11)
    per_fold = []
    for f in range(10):
        test = folds[f]
        train = np.setdiff1d(np.arange(300), test)
        per_fold.append(pwcca_score(fit_cca(X[train], Y[train], cfg), X[test], Y[test]))
    got = cross_validated_cca(X, Y, cfg)
    assert got == pytest.approx(np.mean(per_fold[:3]), abs=1e-12)
    assert got != pytest.approx(np.mean(per_fold[:4]), abs=1e-9)


def test_cross_validation_is_deterministic():
    rng = np.random.default_rng(8)
    X, Y = rng.normal(size=(200, 5)), rng.normal(size=(200, 3))
    a = cross_validated_cca(X, Y, CcaConfig(seed=3))
    b = cross_validated_cca(X, Y, CcaConfig(seed=3))
    assert np.float64(a).tobytes() == np.float64(b).tobytes()
    assert a != cross_validated_cca(X, Y, CcaConfig(seed=4))


def test_train_weight_option_changes_only_weights():
    rng = np.random.default_rng(9)
    X, Y = rng.normal(size=(200, 4)), rng.normal(size=(200, 2))
    a = cross_validated_cca(X, Y, CcaConfig(weights_on="train"))
    b = cross_validated_cca(X, Y, CcaConfig(weights_on="test"))
    assert 0 <= a <= 1 and 0 <= b <= 1


def test_svcca_truncation_runs():
    rng = np.random.default_rng(10)
    z = rng.normal(size=(400, 2))
    X = np.hstack([z, 0.01 * rng.normal(size=(400, 20))])
    assert pwcca_score(fit_cca(X, z, CcaConfig(svcca_dims=2)), X, z) == pytest.approx(1.0, abs=1e-3)


def test_layer_sweep_order_and_jobs_invariance():
    rng = np.random.default_rng(12)
    Y = rng.normal(size=(300, 3))
    mix = rng.normal(size=(3, 5))
    layers = [Y @ mix * (k / 5) + rng.normal(size=(300, 5)) for k in range(6)]
    serial = layerwise_cca_sweep(layers, Y, CcaConfig(), jobs=1)
    parallel = layerwise_cca_sweep(layers, Y, CcaConfig(), jobs=4)
    assert [l for l, _ in serial] == list(range(6))
    assert serial == parallel
    scores = [s for _, s in serial]
    assert scores[0] < 0.3 < scores[-1]


@pytest.mark.parametrize("cfg", [
    dict(reg_epsilon=0), dict(n_folds=1), dict(n_test_folds=10), dict(n_test_folds=0),
    dict(weights_on="both"), dict(max_components=0), dict(svcca_dims=0),
])
def test_config_validation(cfg):
    with pytest.raises(CcaError):
        CcaConfig(**cfg)


def test_degenerate_inputs():
    X = np.random.default_rng(0).normal(size=(20, 3))
    with pytest.raises(DegenerateCovarianceError):
        fit_cca(X, np.ones((20, 2)))
    with pytest.raises(CcaError):
        fit_cca(X, X[:10])
    with pytest.raises(CcaError):
        cross_validated_cca(X[:5], X[:5])
    bad = X.copy()
    bad[0, 0] = np.nan
    with pytest.raises(CcaError):
        fit_cca(bad, X)


def test_swapping_views_keeps_component_correlations():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(400, 5))
    Y = X[:, :3] @ rng.normal(size=(3, 4)) + rng.normal(size=(400, 4))
    rxy = component_correlations(fit_cca(X, Y), X, Y)
    ryx = component_correlations(fit_cca(Y, X), Y, X)
    np.testing.assert_allclose(np.sort(rxy), np.sort(ryx), atol=1e-8)
    assert pwcca_score(fit_cca(X, Y), X, Y) <= rxy.max() + 1e-9
