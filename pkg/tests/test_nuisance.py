import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcdml.data import Dataset, sample_sim1, sim1_u
from dcdml.forest import DecisionTree, RandomForest
from dcdml.nuisance import (
    PROPENSITY_CLIP,
    LearnerSpec,
    brier,
    cross_fit,
    fit_classifier,
    fit_regressor,
    learner_scores,
    make_folds,
    parse_learner,
    rmse,
    select_learner,
)

ALL_SPECS = [LearnerSpec.ols(), LearnerSpec.ridge(1.0), LearnerSpec.random_forest(n_trees=10)]


class TestForest:
    def test_tree_fits_step_function(self):
        x = np.linspace(-1, 1, 200).reshape(-1, 1)
        y = (x[:, 0] > 0.3).astype(float)
        tree = DecisionTree(min_leaf=5).fit(x, y)
        np.testing.assert_array_equal(tree.predict(x), y)
        assert tree.n_leaves == 2

    def test_leaf_size_respected(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((100, 3))
        tree = DecisionTree(min_leaf=7, rng=rng).fit(X, rng.standard_normal(100))
        leaves = tree.predict(X)
        _, counts = np.unique(leaves, return_counts=True)
        assert counts.min() >= 7

    def test_forest_deterministic(self):
        rng = np.random.default_rng(1)
        X, y = rng.standard_normal((80, 4)), rng.standard_normal(80)
        a = RandomForest(n_trees=5, max_features=2, seed=3).fit(X, y).predict(X)
        b = RandomForest(n_trees=5, max_features=2, seed=3).fit(X, y).predict(X)
        np.testing.assert_array_equal(a, b)


class TestRegressor:
    def test_exact_linear(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((50, 3))
        model = fit_regressor(X, 2 * X[:, 0], LearnerSpec.ols())
        np.testing.assert_allclose(model.predict(X), 2 * X[:, 0], atol=1e-8)

    @pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: s.label())
    def test_constant_target(self, spec):
        X = np.random.default_rng(1).standard_normal((40, 2))
        model = fit_regressor(X, np.full(40, 5.0), spec)
        np.testing.assert_allclose(model.predict(X[:7] * 3), 5.0, atol=1e-10)

    def test_forest_beats_ols_on_abs_signal(self):
        rng = np.random.default_rng(2)
        X = rng.uniform(-3, 3, (5000, 2))
        y = sim1_u(X)
        ols = fit_regressor(X, y, LearnerSpec.ols())
        rf = fit_regressor(X, y, LearnerSpec.random_forest(n_trees=20), seed=0)
        assert rmse(y, rf.predict(X)) < rmse(y, ols.predict(X))

    def test_rank_deficiency_is_signalled(self):
        X = np.column_stack([np.arange(10.0), 2 * np.arange(10.0)])
        model = fit_regressor(X, np.arange(10.0), LearnerSpec.ols())
        assert model.rank_deficient
        np.testing.assert_allclose(model.predict(X), np.arange(10.0), atol=1e-9)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_ols_affine_invariance(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((30, 3))
        y = rng.standard_normal(30)
        A = rng.standard_normal((3, 3)) + 3 * np.eye(3)
        b = rng.standard_normal(3)
        p1 = fit_regressor(X, y, LearnerSpec.ols()).predict(X)
        p2 = fit_regressor(X @ A + b, y, LearnerSpec.ols()).predict(X @ A + b)
        np.testing.assert_allclose(p1, p2, atol=1e-8)


class TestClassifier:
    def test_balanced_independent(self):
        rng = np.random.default_rng(3)
        X = rng.standard_normal((2000, 3))
        Z = np.repeat([0.0, 1.0], 1000)
        rng.shuffle(Z)
        p = fit_classifier(X, Z, LearnerSpec.logistic()).predict(X)
        assert np.all(np.abs(p - 0.5) < 0.05)

    def test_threshold_rule(self):
        rng = np.random.default_rng(4)
        X = rng.standard_normal((2000, 2))
        Z = (X[:, 0] > 0).astype(float)
        p = fit_classifier(X, Z, LearnerSpec.logistic()).predict(X)
        assert brier(Z, p) < 0.1

    def test_single_class(self):
        with pytest.raises(ValueError, match="single-class"):
            fit_classifier(np.zeros((5, 1)), np.ones(5), LearnerSpec.logistic())

    @pytest.mark.parametrize("spec", [LearnerSpec.ols(), LearnerSpec.logistic(), LearnerSpec.random_forest(n_trees=5)],
                             ids=lambda s: s.label())
    def test_clipped(self, spec):
        rng = np.random.default_rng(5)
        X = rng.standard_normal((300, 2))
        Z = (X[:, 0] + 0.1 * rng.standard_normal(300) > 0).astype(float)
        p = fit_classifier(X, Z, spec).predict(X * 10)
        assert p.min() >= PROPENSITY_CLIP and p.max() <= 1 - PROPENSITY_CLIP


class TestCrossFit:
    def _data(self, n=10, seed=0):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((n, 2))
        Z = np.tile([0.0, 1.0], n // 2)
        return Dataset(X, Z, X @ [1.0, -2.0] + 0.5)

    def test_fold_bookkeeping(self):
        cf = cross_fit(self._data(), LearnerSpec.ols(), LearnerSpec.ols(), n_folds=2, seed=1)
        assert sorted(np.bincount(cf.fold_of)) == [5, 5]
        assert cf.n_folds == 2

    def test_against_direct_two_fold_ols(self):
        data = self._data(n=40, seed=2)
        data = data.with_outcome(data.Y + np.random.default_rng(9).standard_normal(40))
        cf = cross_fit(data, LearnerSpec.ols(), LearnerSpec.ols(), seed=3)
        for l in (0, 1):
            test = cf.fold_of == l
            A = np.column_stack([np.ones((~test).sum()), data.X[~test]])
            coef = np.linalg.lstsq(A, data.Y[~test], rcond=None)[0]
            pred = np.column_stack([np.ones(test.sum()), data.X[test]]) @ coef
            np.testing.assert_allclose(cf.zeta_hat[test], data.Y[test] - pred, atol=1e-10)
            hcoef = np.linalg.lstsq(A, data.Z[~test], rcond=None)[0]
            hpred = np.clip(np.column_stack([np.ones(test.sum()), data.X[test]]) @ hcoef, 0.01, 0.99)
            np.testing.assert_allclose(cf.eta_hat[test], data.Z[test] - hpred, atol=1e-10)

    def test_out_of_fold_discipline(self):
        data = self._data(n=40, seed=4)
        cf = cross_fit(data, LearnerSpec.ols(), LearnerSpec.ols(), seed=5)
        i = int(np.flatnonzero(cf.fold_of == 0)[0])
        Y = data.Y.copy()
        Y[i] += 100.0
        cf2 = cross_fit(data.with_outcome(Y), LearnerSpec.ols(), LearnerSpec.ols(), seed=5)
        same_fold = cf.fold_of == 0
        same_fold[i] = False
        np.testing.assert_allclose(cf2.zeta_hat[same_fold], cf.zeta_hat[same_fold], atol=1e-10)

    def test_stratified_folds(self):
        Z = np.r_[np.ones(3), np.zeros(97)]
        fold_of = make_folds(Z, 2, seed=0)
        assert set(fold_of[Z == 1]) == {0, 1}

    def test_eta_mean_near_zero(self):
        rng = np.random.default_rng(6)
        X, Z, Y, _ = sample_sim1(rng, 2000)
        cf = cross_fit(Dataset(X, Z, Y), LearnerSpec.ols(), LearnerSpec.logistic(), seed=0)
        for l in (0, 1):
            eta = cf.eta_hat[cf.fold_of == l]
            assert abs(eta.mean()) < 3 * np.sqrt(0.25 / eta.size)

    def test_deterministic(self):
        data = self._data(n=40)
        a = cross_fit(data, LearnerSpec.random_forest(n_trees=5), LearnerSpec.random_forest(n_trees=5), seed=7)
        b = cross_fit(data, LearnerSpec.random_forest(n_trees=5), LearnerSpec.random_forest(n_trees=5), seed=7)
        np.testing.assert_array_equal(a.zeta_hat, b.zeta_hat)


class TestSelection:
    def test_ols_wins_on_linear_data(self):
        rng = np.random.default_rng(8)
        X = rng.standard_normal((200, 3))
        data = Dataset(X, rng.integers(0, 2, 200), X @ [1.0, 2.0, 3.0])
        assert select_learner(data, [LearnerSpec.ols(), LearnerSpec.ridge(1.0)], "rmse").kind == "ols"

    def test_constant_half_brier(self):
        assert brier(np.tile([0, 1], 50), np.full(100, 0.5)) == pytest.approx(0.25)

    def test_sim1_treatment_scores(self):
        rng = np.random.default_rng(9)
        X, Z, Y, _ = sample_sim1(rng, 600)
        data = Dataset(X, Z, Y)
        cands = [LearnerSpec.logistic(), LearnerSpec.random_forest(n_trees=20)]
        scores = learner_scores(data, cands, "brier")
        assert all(0 < s < 0.25 for s in scores)
        assert select_learner(data, cands, "brier") is cands[int(np.argmin(scores))]


@pytest.mark.parametrize("text,kind,lam", [("ols", "ols", 0.0), ("ridge:2.5", "ridge", 2.5),
                                            ("rf", "random_forest", 0.0), ("logistic:0.5", "logistic", 0.5)])
def test_parse_learner(text, kind, lam):
    spec = parse_learner(text)
    assert spec.kind == kind and spec.lam == lam


def test_parse_learner_rejects_unknown():
    with pytest.raises(ValueError):
        parse_learner("svm")
