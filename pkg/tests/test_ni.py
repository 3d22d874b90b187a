import dataclasses
import json

import numpy as np
import pytest

from dcdml import _rng
from dcdml.data import Dataset, PartyData
from dcdml.dimred import DimReducer, ReducerConfig, fit_pca
from dcdml.dml import test_coefficients
from dcdml.ni import (
    NiReturnPackage,
    NiShare,
    _mixing_matrix,
    anchor_design,
    make_ni_intermediate,
    make_ni_return,
    ni_user_finalize,
    recovery_map,
)
from dcdml.nuisance import LearnerSpec, make_folds
from dcdml.protocol import (
    AnchorDataset,
    DcConfig,
    MessageError,
    aggregate,
    analyst_fit,
    anchor_ranges,
    gen_anchor,
    make_intermediate,
    run_dc_dml,
)

from oracles import random_invertible

OLS = LearnerSpec.ols()


def _party(pid, seed, n=100, m=3):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (n, m))
    Z = (rng.uniform(size=n) < 0.5 + 0.2 * X[:, 0]).astype(float)
    Y = (1 + X[:, 0]) * Z + X[:, 1] + rng.standard_normal(n)
    return PartyData(pid, Dataset(X, Z, Y))


@pytest.fixture(scope="module")
def setting():
    parties = [_party(1, 0), _party(2, 1, n=80)]
    anchor = gen_anchor(anchor_ranges(parties), 30, seed=5)
    reducers = [fit_pca(p.data.X, 2) for p in parties]
    return parties, anchor, reducers


class TestShare:
    def test_identity_hooks_match_plain_share(self, setting):
        parties, anchor, reducers = setting
        ni = make_ni_intermediate(parties[0], reducers[0], anchor, seed=3, mix=False, permute=False)
        plain = make_intermediate(parties[0], reducers[0], anchor)
        for f in ("B", "B_anc", "Z", "Y"):
            np.testing.assert_array_equal(getattr(ni, f), getattr(plain, f))

    def test_permutation_keeps_multiset_and_pairing(self, setting):
        parties, anchor, reducers = setting
        data = parties[0].data
        ni = make_ni_intermediate(parties[0], reducers[0], anchor, seed=4, mix=False)
        np.testing.assert_array_equal(np.sort(ni.Y_perm), np.sort(data.Y))
        assert not np.array_equal(ni.Y_perm, data.Y)
        # each shared row still belongs with its own Z and Y
        plain = make_intermediate(parties[0], reducers[0], anchor)
        order = _rng.make_rng(4, _rng.NI_PERM, 1).permutation(data.n)
        np.testing.assert_array_equal(ni.B, plain.B[order])
        np.testing.assert_array_equal(ni.Z_perm, data.Z[order])
        # anchor rows are not permuted
        np.testing.assert_array_equal(ni.B_anc, plain.B_anc)

    def test_shapes(self, setting):
        parties, anchor, reducers = setting
        ni = make_ni_intermediate(parties[1], reducers[1], anchor, seed=0)
        assert ni.B.shape == (80, 3) and ni.B_anc.shape == (30, 3)
        np.testing.assert_array_equal(ni.B[:, 0], 1.0)

    def test_only_share_fields_exposed(self, setting):
        parties, anchor, reducers = setting
        ni = make_ni_intermediate(parties[0], reducers[0], anchor, seed=0)
        assert {f.name for f in dataclasses.fields(NiShare)} == {"party_id", "B", "B_anc", "Z", "Y"}
        assert set(ni.to_message()) == {"version", "party_id", "r", "m_tilde", "B", "B_anc", "Z", "Y"}

    def test_mixing_condition(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            assert np.linalg.cond(_mixing_matrix(rng, 5)) < 1e6

    def test_dimension_mismatch(self, setting):
        parties, anchor, _ = setting
        with pytest.raises(ValueError, match="mismatch"):
            make_ni_intermediate(parties[0], fit_pca(np.random.default_rng(0).standard_normal((9, 2)), 1),
                                 anchor, seed=0)


def _ni_session(setting, seed=2, mix=True, permute=True):
    parties, anchor, reducers = setting
    shares = [make_ni_intermediate(p, r, anchor, seed, mix=mix, permute=permute) for p, r in zip(parties, reducers)]
    return aggregate(shares, m_check=3)


class TestReturn:
    def test_zero_gamma(self, setting):
        session = _ni_session(setting)
        fit = analyst_fit(session, q_spec=OLS, h_spec=OLS)
        fit = dataclasses.replace(fit, gamma_check=np.zeros(3))
        np.testing.assert_array_equal(make_ni_return(fit, session, 1).R_point_anc, 0.0)

    def test_identity_variance_rank(self, setting):
        session = _ni_session(setting)
        fit = dataclasses.replace(analyst_fit(session, q_spec=OLS, h_spec=OLS), cov_gamma_check=np.eye(3))
        pkg = make_ni_return(fit, session, 2)
        A = session.X_check_anc[1]
        np.testing.assert_allclose(pkg.R_var_anc, A @ A.T, atol=1e-12)
        assert np.linalg.matrix_rank(pkg.R_var_anc) <= 3

    def test_sim1_length(self, sim1_parties):
        run = run_dc_dml(sim1_parties[0], DcConfig(q_spec=OLS, h_spec=LearnerSpec.logistic(), ni=True,
                                                   reducer=ReducerConfig(bs_dim=3)))
        pkg = make_ni_return(run.analyst_fit, run.session, 1)
        assert pkg.R_point_anc.shape == (600,)
        assert run.n_messages == 4

    def test_message_roundtrip_and_schema(self, setting):
        session = _ni_session(setting)
        pkg = make_ni_return(analyst_fit(session, q_spec=OLS, h_spec=OLS), session, 1)
        back = NiReturnPackage.from_message(json.loads(json.dumps(pkg.to_message())))
        np.testing.assert_array_equal(back.R_var_anc, pkg.R_var_anc)
        for extra in ("E", "P"):
            msg = pkg.to_message()
            msg[extra] = [[1.0]]
            with pytest.raises(MessageError):
                NiReturnPackage.from_message(msg)


class TestRecovery:
    def test_identity_with_mixing(self, setting):
        parties, anchor, reducers = setting
        seed = 6
        session = _ni_session(setting, seed=seed)
        for k, (p, red) in enumerate(zip(parties, reducers)):
            E = _mixing_matrix(_rng.make_rng(seed, _rng.NI_MIX, p.party_id), red.m_tilde)
            F_bar = DimReducer(red.F @ E, red.mu, red.method_tag).F_bar
            L = recovery_map(anchor, red.mu)
            np.testing.assert_allclose(L @ session.X_check_anc[k], F_bar @ session.G[k], atol=1e-10)

    def test_rank_deficient_anchor(self):
        X = np.tile([[0.0, 1.0]], (4, 1))
        anchor = AnchorDataset(X, ((0, 1), (0, 1)), 0)
        with pytest.raises(np.linalg.LinAlgError):
            recovery_map(anchor, np.zeros(2))

    def test_anchor_design(self, setting):
        _, anchor, reducers = setting
        A = anchor_design(anchor, reducers[0].mu)
        np.testing.assert_allclose(A[:, 1:], anchor.X_anc - reducers[0].mu)

    def test_package_size_checked(self, setting):
        _, anchor, reducers = setting
        with pytest.raises(ValueError, match="anchor"):
            ni_user_finalize(anchor, NiReturnPackage(1, np.zeros(3), np.zeros((3, 3))), reducers[0].mu)


class TestEquivalence:
    def test_identity_hooks_equal_plain_run(self, setting):
        parties, _, _ = setting
        base = dict(q_spec=OLS, h_spec=LearnerSpec.logistic(), seed=8, reducer=ReducerConfig(method="pca"))
        plain = run_dc_dml(parties, DcConfig(**base))
        ni = run_dc_dml(parties, DcConfig(**base, ni=True, ni_mix=False, ni_permute=False))
        for a, b in zip(plain.models, ni.models):
            np.testing.assert_allclose(b.coef, a.coef, atol=1e-8)
            np.testing.assert_allclose(b.cov_gamma, a.cov_gamma, atol=1e-8)

    def test_permutation_neutral_with_transported_folds(self, setting):
        parties, anchor, reducers = setting
        seed = 9
        plain = aggregate([make_intermediate(p, r, anchor) for p, r in zip(parties, reducers)], m_check=3)
        shuffled = _ni_session(setting, seed=seed, mix=False)
        folds = make_folds(plain.Z, 2, seed=1)
        moved, start = [], 0
        for p in parties:
            order = _rng.make_rng(seed, _rng.NI_PERM, p.party_id).permutation(p.data.n)
            moved.append(folds[start:start + p.data.n][order])
            start += p.data.n
        a = analyst_fit(plain, q_spec=OLS, h_spec=OLS, fold_of=folds)
        b = analyst_fit(shuffled, q_spec=OLS, h_spec=OLS, fold_of=np.concatenate(moved))
        np.testing.assert_allclose(b.gamma_check, a.gamma_check, atol=1e-10)

    def test_mixing_neutral_at_full_information(self):
        rng = np.random.default_rng(3)
        parties = [_party(1, 10), _party(2, 11)]
        mu = np.vstack([p.data.X for p in parties]).mean(axis=0)
        reducers = [DimReducer(random_invertible(rng, 3), mu, "combined") for _ in parties]
        folds = make_folds(np.concatenate([p.data.Z for p in parties]), 2, seed=0)
        base = dict(q_spec=OLS, h_spec=OLS, seed=4, m_check=4, anchor_r=8, fold_of=folds, reducers=reducers)
        plain = run_dc_dml(parties, DcConfig(**base, ni=True, ni_mix=False, ni_permute=False))
        mixed = run_dc_dml(parties, DcConfig(**base, ni=True, ni_permute=False))
        for a, b in zip(plain.models, mixed.models):
            np.testing.assert_allclose(b.coef, a.coef, atol=1e-6)

    def test_sim1_slope_signs_preserved(self, sim1_parties):
        parties, _ = sim1_parties
        cfg = dict(q_spec=OLS, h_spec=LearnerSpec.logistic(), reducer=ReducerConfig(bs_dim=3), seed=1)
        plain = run_dc_dml(parties, DcConfig(**cfg))
        ni = run_dc_dml(parties, DcConfig(**cfg, ni=True))
        for a, b in zip(plain.models, ni.models):
            sa = [t.sign_class for t in test_coefficients(a)[1:3]]
            sb = [t.sign_class for t in test_coefficients(b)[1:3]]
            assert sa == sb == ["positive", "positive"]
