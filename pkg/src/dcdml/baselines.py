"""Reference analyses: each party alone, all raw data pooled, and a
distributed OLS with treatment interactions built from shared sums."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import PartyData, pool
from .dml import DmlFit, _quad_rows, augment, fit_dml
from .nuisance import LearnerSpec


class SmallSampleWarning(UserWarning):
    """Fewer than 10 rows per coefficient."""


def fit_ia_dml(party: PartyData, q_spec: LearnerSpec, h_spec: LearnerSpec, seed: int = 0, n_folds: int = 2) -> DmlFit:
    """DML on one party's own rows."""
    data = party.data
    if data.n < 10 * (data.m + 1):
        warnings.warn(f"party {party.party_id} has {data.n} rows for {data.m + 1} coefficients",
                      SmallSampleWarning, stacklevel=2)
    return fit_dml(data, q_spec, h_spec, seed=seed, n_folds=n_folds)


def fit_ca_dml(parties: Sequence[PartyData], q_spec: LearnerSpec, h_spec: LearnerSpec, seed: int = 0, n_folds: int = 2) -> DmlFit:
    """DML on the pooled raw rows (not privacy preserving; the upper reference)."""
    return fit_dml(pool(parties), q_spec, h_spec, seed=seed, n_folds=n_folds)


# ------------------------------------------------------- secure regression


def sr_design(X, Z) -> np.ndarray:
    """Rows ``[1, z, z x_1, ..., z x_m]``."""
    X = np.asarray(X, dtype=float)
    Z = np.asarray(Z, dtype=float)
    return np.column_stack([np.ones(len(Z)), Z[:, None] * augment(X)])


@dataclass(frozen=True)
class SufficientStats:
    """What one party discloses: ``D'D``, ``D'Y``, ``Y'Y`` and ``n``."""

    gram: np.ndarray
    moment: np.ndarray
    yy: float
    n: int

    def __add__(self, other: "SufficientStats") -> "SufficientStats":
        return SufficientStats(self.gram + other.gram, self.moment + other.moment,
                               self.yy + other.yy, self.n + other.n)


def sufficient_stats(party: PartyData) -> SufficientStats:
    D = sr_design(party.data.X, party.data.Z)
    Y = party.data.Y
    return SufficientStats(D.T @ D, D.T @ Y, float(Y @ Y), party.data.n)


@dataclass(frozen=True)
class SrFit:
    """OLS fit of ``y = const + z [1, x'] beta + e``.

    ``beta`` and ``cov_beta`` cover the treatment part only; the untreated
    intercept is kept in ``const`` / ``const_se``. The covariance is the
    classical ``s^2 (D'D)^-1``.
    """

    beta: np.ndarray
    cov_beta: np.ndarray
    const: float
    const_se: float
    sigma2: float
    n: int

    @property
    def coef(self) -> np.ndarray:
        return self.beta

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov_beta), 0.0, None))

    def cate(self, X):
        w = augment(np.atleast_2d(np.asarray(X, dtype=float)))
        return w @ self.beta, _quad_rows(w, self.cov_beta)


def fit_sr_from_stats(stats: SufficientStats) -> SrFit:
    p = stats.gram.shape[0]
    if stats.n <= p:
        raise np.linalg.LinAlgError(f"need more than {p} rows, got {stats.n}")
    s = np.linalg.svd(stats.gram, compute_uv=False)
    if s[-1] <= 1e-12 * s[0]:
        raise np.linalg.LinAlgError("pooled interaction design is rank deficient")
    gram_inv = np.linalg.inv(stats.gram)
    coef = gram_inv @ stats.moment
    # RSS from sums: y'y - 2 b'D'y + b'D'D b
    rss = max(stats.yy - 2.0 * coef @ stats.moment + coef @ stats.gram @ coef, 0.0)
    sigma2 = rss / (stats.n - p)
    cov = sigma2 * gram_inv
    cov = 0.5 * (cov + cov.T)
    return SrFit(coef[1:], cov[1:, 1:], float(coef[0]), float(np.sqrt(cov[0, 0])), float(sigma2), stats.n)


def fit_sr(parties: Sequence[PartyData]) -> SrFit:
    """Distributed OLS: only per-party sufficient statistics are combined."""
    if not parties:
        raise ValueError("need at least one party")
    total = sufficient_stats(parties[0])
    for party in parties[1:]:
        total = total + sufficient_stats(party)
    return fit_sr_from_stats(total)
