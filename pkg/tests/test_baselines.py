import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcdml.baselines import (
    SmallSampleWarning,
    SufficientStats,
    fit_ca_dml,
    fit_ia_dml,
    fit_sr,
    fit_sr_from_stats,
    sr_design,
    sufficient_stats,
)
from dcdml.data import Dataset, PartyData, pool, resolve_dataset
from dcdml.dml import test_coefficients
from dcdml.nuisance import LearnerSpec

OLS = LearnerSpec.ols()


def _parties(seed, sizes=(40, 55, 30), m=3, effect=1.0, main=1.0):
    rng = np.random.default_rng(seed)
    out = []
    for k, n in enumerate(sizes, start=1):
        X = rng.standard_normal((n, m))
        Z = rng.integers(0, 2, n).astype(float)
        Y = 0.5 + effect * Z * (1 + X[:, 0]) + main * X[:, 1] + rng.standard_normal(n)
        out.append(PartyData(k, Dataset(X, Z, Y)))
    return out


def centralized_ols(parties):
    """Brute-force OLS on the stacked interaction design, written out
    independently of the sufficient-statistics path."""
    rows, ys = [], []
    for p in parties:
        for x, z, y in zip(p.data.X, p.data.Z, p.data.Y):
            rows.append([1.0, z] + [z * v for v in x])
            ys.append(y)
    D, Y = np.array(rows), np.array(ys)
    coef, *_ = np.linalg.lstsq(D, Y, rcond=None)
    resid = Y - D @ coef
    s2 = resid @ resid / (len(Y) - D.shape[1])
    cov = s2 * np.linalg.inv(D.T @ D)
    return coef, cov


class TestSecureRegression:
    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_centralized(self, seed):
        parties = _parties(seed)
        coef, cov = centralized_ols(parties)
        fit = fit_sr(parties)
        np.testing.assert_allclose(fit.const, coef[0], atol=1e-10)
        np.testing.assert_allclose(fit.coef, coef[1:], atol=1e-10)
        np.testing.assert_allclose(fit.cov_beta, cov[1:, 1:], atol=1e-10)

    def test_stats_are_additive(self):
        parties = _parties(1)
        total = sufficient_stats(parties[0]) + sufficient_stats(parties[1])
        both = sufficient_stats(PartyData(1, pool(parties[:2])))
        np.testing.assert_allclose(total.gram, both.gram, atol=1e-12)
        assert total.n == both.n

    def test_design(self):
        D = sr_design([[2.0, 3.0]], [1.0])
        np.testing.assert_array_equal(D, [[1.0, 1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(sr_design([[2.0, 3.0]], [0.0]), [[1.0, 0.0, 0.0, 0.0]])

    def test_zero_effect(self):
        # the SR model has no covariate main effects, so the null DGP has none either
        fit = fit_sr(_parties(2, sizes=(500, 500), effect=0.0, main=0.0))
        assert np.all(np.abs(fit.coef) < 3 * fit.std_errors)

    def test_rank_deficient(self):
        party = PartyData(1, Dataset(np.ones((10, 1)), np.tile([0, 1], 5), np.arange(10.0)))
        with pytest.raises(np.linalg.LinAlgError):
            fit_sr([party])

    def test_too_few_rows(self):
        with pytest.raises(np.linalg.LinAlgError):
            fit_sr_from_stats(SufficientStats(np.eye(3), np.zeros(3), 0.0, 3))

    def test_deterministic_cate(self):
        parties = _parties(3)
        a, b = fit_sr(parties), fit_sr(parties)
        np.testing.assert_array_equal(a.cate(parties[0].data.X)[0], b.cate(parties[0].data.X)[0])


class TestDmlBaselines:
    def test_single_party_ca_equals_ia(self, sim1_parties):
        party = sim1_parties[0][0]
        ia = fit_ia_dml(party, OLS, LearnerSpec.logistic(), seed=3)
        ca = fit_ca_dml([party], OLS, LearnerSpec.logistic(), seed=3)
        np.testing.assert_array_equal(ia.coef, ca.coef)

    def test_small_party_warns(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((30, 10))
        party = PartyData(1, Dataset(X, np.tile([0, 1], 15), rng.standard_normal(30)))
        with pytest.warns(SmallSampleWarning):
            fit_ia_dml(party, LearnerSpec.ridge(1.0), LearnerSpec.logistic())

    def test_sim1_ca_near_truth(self):
        from dcdml.data import gen_sim1

        for seed in range(3):
            parties, _ = gen_sim1(seed)
            fit = fit_ca_dml(parties, LearnerSpec.random_forest(n_trees=50), LearnerSpec.random_forest(n_trees=50),
                             seed=seed)
            assert np.all(np.abs(fit.coef[:3] - 1.0) < 0.35)

    def test_financial_ca_signs(self):
        # fallback data when the survey file is absent
        data = resolve_dataset("financial")[0]
        fit = fit_ca_dml([PartyData(1, data)], OLS, LearnerSpec.logistic())
        signs = dict(zip(fit.names, (t.sign_class for t in test_coefficients(fit))))
        assert signs["db"] == "positive" and signs["hown"] == "positive"
