import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pragtune.surrogate import (
    BoostedTrees,
    FitError,
    Forest,
    GaussianProcess,
    Prediction,
    ShapeError,
    SurrogateKind,
    build_tree,
    fit,
    forest_max_features,
    predict,
)


def dataset(seed, n=30, d=3):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 8, size=(n, d)).astype(float)
    y = np.sin(X[:, 0]) + 0.3 * X[:, 1] + rng.normal(0, 0.1, n)
    return X, y


# -- forests ----------------------------------------------------------------


@pytest.mark.parametrize("kind", ["RF", "ET"])
def test_forest_mean_and_std_from_trees(kind):
    X, y = dataset(0)
    model = fit(kind, X, y, seed=1)
    assert isinstance(model, Forest) and len(model.trees) == 100
    Q = dataset(9, n=15)[0]
    per_tree = np.array([[t.predict(q[None, :])[0] for t in model.trees] for q in Q])
    mean, std = model.predict(Q)
    np.testing.assert_allclose(mean, per_tree.mean(axis=1), rtol=0, atol=1e-12)
    # population std (ddof=0) across trees
    pop = np.sqrt(((per_tree - per_tree.mean(axis=1, keepdims=True)) ** 2).sum(axis=1) / per_tree.shape[1])
    np.testing.assert_allclose(std, pop, rtol=0, atol=1e-12)


@pytest.mark.parametrize("kind", ["RF", "ET", "GBRT", "GP"])
def test_fit_is_seed_deterministic(kind):
    X, y = dataset(2)
    a = fit(kind, X, y, seed=3).predict(X)
    b = fit(kind, X, y, seed=3).predict(X)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_rf_leaf_size_and_feature_quota():
    X, y = dataset(4, n=40, d=4)
    assert forest_max_features(4) == 2
    assert forest_max_features(1) == 1
    assert forest_max_features(10) == 3
    model = fit("RF", X, y, seed=0, n_trees=10)
    for t in model.trees:
        leaves = [i for i in range(t.node_count) if t.feature[i] < 0]
        # bootstrap rows can repeat, so count occupied leaves on the training set
        assert all(c >= 1 for c in np.bincount(t.apply(X), minlength=t.node_count)[leaves] if c)


def test_rf_thresholds_are_midpoints():
    X = np.array([[0.0], [1.0], [3.0], [7.0], [8.0], [9.0]])
    y = np.array([0.0, 0.0, 0.0, 5.0, 5.0, 5.0])
    tree = build_tree(X, y, np.random.default_rng(0), min_samples_leaf=1)
    assert tree.splits() == [(0, 5.0)]


def test_best_split_ties_go_to_lowest_feature():
    X = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0]])
    y = np.array([0.0, 0.0, 1.0, 1.0])
    tree = build_tree(X, y, np.random.default_rng(0))
    assert tree.splits() == [(0, 0.5)]


def test_et_uses_injected_thresholds_rf_does_not():
    X, y = dataset(5, n=25, d=2)
    calls = []

    def gen(lo, hi):
        calls.append((lo, hi))
        return lo + 0.25 * (hi - lo)

    et = fit("ET", X, y, seed=0, n_trees=5, threshold_gen=gen)
    assert calls
    generated = {lo + 0.25 * (hi - lo) for lo, hi in calls}
    for tree in et.trees:
        for _, thr in tree.splits():
            assert thr in generated
    rf = fit("RF", X, y, seed=0, n_trees=5)
    values = np.unique(X)
    midpoints = {(a + b) / 2 for a, b in itertools.combinations(values, 2)}
    for tree in rf.trees:
        for _, thr in tree.splits():
            assert thr in midpoints


def test_et_has_no_bootstrap():
    # the root of a tree averages the rows it was grown on
    X, y = dataset(6, n=20, d=2)
    et = fit("ET", X, y, seed=0, n_trees=10)
    rf = fit("RF", X, y, seed=0, n_trees=10)
    assert all(t.value[0] == pytest.approx(y.mean(), abs=1e-12) for t in et.trees)
    assert len({round(t.value[0], 9) for t in rf.trees}) > 1


# -- gradient boosting ------------------------------------------------------


def naive_tree(x, g, depth):
    """Depth-limited 1-D least-squares tree; returns a list of (lo, hi, rows)."""
    rows = list(range(len(x)))

    def grow(rows, lo, hi, depth):
        vals = [g[i] for i in rows]
        if depth == 0 or len(rows) < 2 or max(vals) == min(vals):
            return [(lo, hi, rows)]
        xs = sorted({x[i] for i in rows})
        if len(xs) < 2:
            return [(lo, hi, rows)]
        best, best_err = None, math.inf
        for a, b in zip(xs, xs[1:]):
            thr = (a + b) / 2
            left = [i for i in rows if x[i] <= thr]
            right = [i for i in rows if x[i] > thr]
            err = 0.0
            for part in (left, right):
                m = sum(g[i] for i in part) / len(part)
                err += sum((g[i] - m) ** 2 for i in part)
            if err < best_err - 1e-12:
                best, best_err = (thr, left, right), err
        thr, left, right = best
        return grow(left, lo, thr, depth - 1) + grow(right, thr, hi, depth - 1)

    return grow(rows, -math.inf, math.inf, depth)


def naive_quantile_boosting(x, y, alpha, stages=100, lr=0.1, depth=3):
    init = float(np.quantile(y, alpha))
    F = [init] * len(y)
    model = []
    for _ in range(stages):
        resid = [yi - fi for yi, fi in zip(y, F)]
        grad = [alpha if r > 0 else alpha - 1.0 for r in resid]
        leaves = []
        for lo, hi, rows in naive_tree(x, grad, depth):
            v = float(np.quantile([resid[i] for i in rows], alpha))
            leaves.append((lo, hi, v))
            for i in rows:
                F[i] += lr * v
        model.append(leaves)

    def predict(q):
        out = init
        for leaves in model:
            out += lr * next(v for lo, hi, v in leaves if lo < q <= hi)
        return out

    return predict


def test_gbrt_matches_naive_boosting_on_monotone_data():
    x = [float(i) for i in range(20)]
    y = [0.5 * i + (0.3 if i % 3 == 0 else 0.0) for i in range(20)]
    model = fit("GBRT", np.array(x)[:, None], np.array(y), seed=0)
    assert isinstance(model, BoostedTrees)
    Q = np.array([-1.0, 0.0, 2.5, 7.0, 11.2, 19.0, 25.0])
    qs = model.quantile_predictions(Q[:, None])
    for alpha in BoostedTrees.QUANTILES:
        oracle = naive_quantile_boosting(x, y, alpha)
        np.testing.assert_allclose(qs[alpha], [oracle(q) for q in Q], atol=1e-9)
    mean, std = model.predict(Q[:, None])
    np.testing.assert_allclose(mean, np.clip(qs[0.5], min(y), max(y)))
    np.testing.assert_allclose(std, np.maximum(0, (qs[0.84] - qs[0.16]) / 2))
    assert np.all((mean >= min(y)) & (mean <= max(y)))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_gbrt_mean_within_target_range(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(20, 3))
    y = rng.exponential(size=20) * rng.choice([-1, 1])
    model = fit("GBRT", X, y, seed=seed)
    mean, std = model.predict(rng.normal(scale=3, size=(50, 3)))
    assert np.all(mean >= y.min()) and np.all(mean <= y.max())
    assert np.all(std >= 0)


# -- gaussian process -------------------------------------------------------


def gp_oracle(X, y, Q, jitter=1e-6):
    n = len(X)
    dists = [math.dist(X[i], X[j]) for i in range(n) for j in range(i + 1, n)]
    ell = float(np.median(dists)) or 1.0
    s2 = float(np.var(y)) or 1.0
    k = lambda a, b: s2 * math.exp(-0.5 * math.dist(a, b) ** 2 / ell**2)  # noqa: E731
    K = np.array([[k(a, b) for b in X] for a in X]) + jitter * s2 * np.eye(n)
    Ks = np.array([[k(a, q) for q in Q] for a in X])
    mu0 = float(np.mean(y))
    mean = mu0 + Ks.T @ np.linalg.solve(K, y - mu0)
    var = s2 - np.einsum("ij,ij->j", Ks, np.linalg.solve(K, Ks))
    return mean, np.sqrt(np.maximum(var, 0))


@pytest.mark.parametrize("seed", range(5))
def test_gp_matches_exact_linear_algebra(seed):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(20, 4))
    y = np.cos(3 * X[:, 0]) + X[:, 1] ** 2 + rng.normal(0, 0.05, 20)
    model = fit("GP", X, y)
    assert isinstance(model, GaussianProcess)
    Q = np.vstack([X, rng.uniform(size=(10, 4))])
    mean, std = model.predict(Q)
    o_mean, o_std = gp_oracle(X, y, Q)
    np.testing.assert_allclose(mean, o_mean, atol=1e-6)
    np.testing.assert_allclose(std, o_std, atol=1e-6)
    # interpolates the training targets
    np.testing.assert_allclose(mean[:20], y, atol=1e-3)


def test_gp_hyperparameters_hook():
    X = np.array([[0.0], [1.0], [3.0]])
    y = np.array([1.0, 2.0, 4.0])
    hp = fit("GP", X, y).hyperparameters
    assert hp["length_scale"] == 2.0
    assert hp["signal_variance"] == pytest.approx(np.var(y))
    assert hp["noise"] == pytest.approx(1e-6 * np.var(y))
    assert hp["prior_mean"] == pytest.approx(7 / 3)


def test_gp_constant_targets():
    X = np.array([[0.0], [1.0], [2.0]])
    model = fit("GP", X, np.full(3, 5.0))
    mean, std = model.predict([[0.5], [10.0]])
    np.testing.assert_allclose(mean, 5.0)
    assert std[1] > std[0]


# -- validation ---------------------------------------------------------------


@pytest.mark.parametrize("kind", list(SurrogateKind))
def test_empty_data_rejected(kind):
    with pytest.raises(FitError):
        fit(kind, np.empty((0, 2)), np.empty(0))


@pytest.mark.parametrize("kind", ["GBRT", "GP"])
def test_single_row_rejected(kind):
    with pytest.raises(FitError):
        fit(kind, [[1.0, 2.0]], [3.0])


def test_single_row_forest_ok():
    model = fit("RF", [[1.0, 2.0]], [3.0], n_trees=4)
    assert predict(model, [[0.0, 0.0]]) == [Prediction(3.0, 0.0)]


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_non_finite_rejected(bad):
    with pytest.raises(FitError):
        fit("RF", [[1.0], [2.0]], [1.0, bad])
    with pytest.raises(FitError):
        fit("RF", [[1.0], [bad]], [1.0, 2.0])


def test_mismatched_rows_rejected():
    with pytest.raises(FitError):
        fit("RF", [[1.0], [2.0]], [1.0])


@pytest.mark.parametrize("kind", list(SurrogateKind))
def test_predict_shape_checked(kind):
    X, y = dataset(1, n=10, d=3)
    model = fit(kind, X, y, n_trees=3) if kind in ("RF", "ET") else fit(kind, X, y)
    with pytest.raises(ShapeError):
        model.predict(np.zeros((2, 4)))


@settings(max_examples=20, deadline=None)
@given(
    X=arrays(np.float64, (12, 2), elements=st.integers(0, 5).map(float)),
    y=arrays(np.float64, 12, elements=st.floats(-100, 100)),
)
def test_forest_means_within_range_and_std_non_negative(X, y):
    for kind in ("RF", "ET"):
        mean, std = fit(kind, X, y, seed=0, n_trees=10).predict(X)
        assert np.all(mean >= y.min() - 1e-9) and np.all(mean <= y.max() + 1e-9)
        assert np.all(std >= 0)


def test_gp_two_point_interpolation():
    model = fit("GP", [[0.0], [1.0]], [1.0, 3.0])
    (p,) = predict(model, [[0.0]])
    assert abs(p.mean - 1.0) < 1e-3 and p.std < 1e-2


def test_gp_reverts_to_prior_far_away():
    X = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    y = np.array([1.0, 2.0, 0.5, 4.0])
    model = fit("GP", X, y)
    mean, std = model.predict([[50.0, 50.0]])
    assert mean[0] == pytest.approx(y.mean(), rel=0.05)
    assert std[0] == pytest.approx(np.sqrt(np.var(y)), rel=0.05)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_gp_variance_bounded_by_prior(seed):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(15, 3))
    y = rng.normal(size=15)
    model = fit("GP", X, y)
    _, std = model.predict(rng.uniform(-1, 2, size=(40, 3)))
    hp = model.hyperparameters
    assert np.all(std**2 <= hp["signal_variance"] + hp["noise"] + 1e-12)
