import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcdml.data import Dataset, sample_sim1, sim1_outcome_mean, sim1_propensity
from dcdml.dml import (
    RankDeficientWarning,
    SingularJacobianError,
    augment,
    check_orthogonality,
    estimate_variance,
    fit_dml,
    predict_cate,
    score_matrix,
    significance_test,
    solve_cate,
    test_cates,
    test_coefficients,
)
from dcdml.nuisance import CrossFitResult, LearnerSpec

OLS = LearnerSpec.ols()


def _residuals(seed, n=60, p=3):
    rng = np.random.default_rng(seed)
    W = augment(rng.standard_normal((n, p - 1)))
    eta = rng.uniform(-0.9, 0.9, n)
    zeta = eta * (W @ rng.standard_normal(p)) + 0.3 * rng.standard_normal(n)
    fold_of = np.arange(n) % 2
    return W, CrossFitResult(zeta, eta, fold_of, (None, None))


def _variance_oracle(W, cf, beta):
    # row-by-row accumulation, one fold at a time
    p = W.shape[1]
    Js, Os = [], []
    for l in (0, 1):
        J, O, cnt = np.zeros((p, p)), np.zeros((p, p)), 0
        for i in np.flatnonzero(cf.fold_of == l):
            w, e, z = W[i], cf.eta_hat[i], cf.zeta_hat[i]
            psi = w * e * (z - e * w @ beta)
            J += e * e * np.outer(w, w)
            O += np.outer(psi, psi)
            cnt += 1
        Js.append(J / cnt)
        Os.append(O / cnt)
    J, O = sum(Js) / 2, sum(Os) / 2
    Ji = np.linalg.inv(J)
    return Ji @ O @ Ji.T / W.shape[0]


class TestSolver:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_matches_lstsq(self, seed):
        W, cf = _residuals(seed)
        beta = solve_cate(W, cf)
        ref = np.linalg.lstsq(W * cf.eta_hat[:, None], cf.zeta_hat, rcond=None)[0]
        np.testing.assert_allclose(beta, ref, atol=1e-10)
        assert np.abs(score_matrix(W, cf, beta).sum(axis=0)).max() < 1e-10

    def test_score_by_hand(self):
        W, cf = _residuals(1, n=4)
        beta = np.array([0.5, -1.0, 2.0])
        psi = score_matrix(W, cf, beta)
        for i in range(4):
            e = cf.eta_hat[i]
            np.testing.assert_allclose(psi[i], W[i] * e * (cf.zeta_hat[i] - e * W[i] @ beta))

    def test_rank_deficient_minimum_norm(self):
        W, cf = _residuals(2)
        W2 = np.column_stack([W, W[:, 1]])
        with pytest.warns(RankDeficientWarning):
            beta = solve_cate(W2, cf)
        ref = np.linalg.pinv(W2 * cf.eta_hat[:, None]) @ cf.zeta_hat
        np.testing.assert_allclose(beta, ref, atol=1e-10)
        assert beta[1] == pytest.approx(beta[3], abs=1e-10)


class TestVariance:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_against_row_loop(self, seed):
        W, cf = _residuals(seed)
        beta = solve_cate(W, cf)
        np.testing.assert_allclose(estimate_variance(W, cf, beta), _variance_oracle(W, cf, beta), rtol=1e-10)

    def test_psd(self):
        W, cf = _residuals(4)
        cov = estimate_variance(W, cf, solve_cate(W, cf))
        np.testing.assert_array_equal(cov, cov.T)
        assert np.linalg.eigvalsh(cov).min() > 0

    def test_singular_jacobian(self):
        W, cf = _residuals(5)
        W2 = np.column_stack([W, W[:, 1]])
        with pytest.raises(SingularJacobianError):
            estimate_variance(W2, cf, np.zeros(4))


class TestFitDml:
    def test_linear_design_recovers_beta(self):
        rng = np.random.default_rng(0)
        n = 4000
        X = rng.uniform(-1, 1, (n, 2))
        h = 0.5 + 0.2 * X[:, 0]
        Z = (rng.uniform(size=n) < h).astype(float)
        Y = (1 + 2 * X[:, 0] - X[:, 1]) * Z + X[:, 1] + rng.standard_normal(n)
        fit = fit_dml(Dataset(X, Z, Y), OLS, OLS, seed=1)
        assert np.all(np.abs(fit.coef - [1, 2, -1]) < 4 * fit.std_errors)
        assert np.abs(fit.moment_sum()).max() < 1e-8

    def test_single_arm_rejected(self):
        with pytest.raises(ValueError, match="both"):
            fit_dml(Dataset(np.zeros((4, 1)), np.ones(4), np.zeros(4)), OLS, OLS)

    def test_duplicate_covariate_warns(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(200)
        data = Dataset(np.column_stack([x, x]), rng.integers(0, 2, 200), rng.standard_normal(200))
        with pytest.warns(RankDeficientWarning), pytest.raises(SingularJacobianError):
            fit_dml(data, OLS, OLS)

    def test_names_and_deterministic(self, sim1_parties):
        data = sim1_parties[0][0].data
        a = fit_dml(data, OLS, LearnerSpec.logistic(), seed=4)
        b = fit_dml(data, OLS, LearnerSpec.logistic(), seed=4)
        np.testing.assert_array_equal(a.coef, b.coef)
        assert a.names[0] == "const" and len(a.names) == 11

    def test_cate_and_predict(self, sim1_parties):
        data = sim1_parties[0][0].data
        fit = fit_dml(data, OLS, LearnerSpec.logistic(), seed=5)
        x = data.X[3]
        tau, var = predict_cate(fit, x)
        w = np.r_[1.0, x]
        assert tau == pytest.approx(w @ fit.coef)
        assert var == pytest.approx(w @ fit.cov_beta @ w)
        tau_mu, _ = predict_cate(fit, x + 1.0, mu=np.ones(10))
        assert tau_mu == pytest.approx(tau)


class TestSignificance:
    def test_boundary_strict(self):
        # |z| exactly at the critical value is not significant
        from scipy.stats import norm
        crit = norm.ppf(0.975)
        assert significance_test(crit, 1.0).sign_class == "not_significant"
        assert significance_test(crit + 1e-9, 1.0).sign_class == "positive"
        assert significance_test(-3.0, 1.0).sign_class == "negative"

    def test_stars(self):
        assert significance_test(3.0, 1.0).stars == "**"
        assert significance_test(2.2, 1.0).stars == "*"
        assert significance_test(1.0, 1.0).stars == ""

    def test_p_value(self):
        res = significance_test(1.0, 1.0)
        assert res.p_value == pytest.approx(0.31731050786291415, rel=1e-12)

    def test_degenerate_se(self):
        assert significance_test(0.0, 0.0).sign_class == "not_significant"
        res = significance_test(-2.0, 0.0)
        assert res.degenerate and res.sign_class == "negative"

    def test_fit_helpers(self, sim1_parties):
        data = sim1_parties[0][1].data
        fit = fit_dml(data, OLS, LearnerSpec.logistic(), seed=6)
        tests = test_coefficients(fit)
        assert len(tests) == 11
        assert tests[0].estimate == fit.coef[0]
        assert len(test_cates(fit, data.X[:5])) == 5


class TestOrthogonality:
    def test_orthogonal_score_is_flat(self):
        sampler = lambda rng, n: sample_sim1(rng, n)
        rep = check_orthogonality(
            sampler, sim1_outcome_mean, sim1_propensity, np.r_[1.0, 1.0, 1.0, np.zeros(8)],
            lambda X: np.sin(X[:, 2]), lambda X: 0.1 * X[:, 3], n_mc=50_000, seed=1,
        )
        assert np.all(np.abs(rep.moments[0]) < 5 * rep.mc_std_error)
        assert np.abs(rep.derivative).max() < 0.05 * np.abs(rep.naive_derivative).max()

    def test_bad_grid(self):
        with pytest.raises(ValueError):
            check_orthogonality(None, None, None, None, None, None, r_grid=(0.0,))
