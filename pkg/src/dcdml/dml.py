"""Double machine learning for a CATE that is linear in the covariates.

The treatment effect is modeled as ``theta(x) = w(x)' beta`` for a feature
map ``w`` (``[1, x]`` in the centralized case, the collaborative
representation on the analyst side). ``beta`` solves the empirical moment
condition of the partialled-out score

    psi_i = w_i * eta_i * (zeta_i - eta_i * w_i' beta),

which is the normal equation of regressing ``zeta`` on ``eta * w``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.stats import norm

from . import _rng
from .data import Dataset
from .nuisance import CrossFitResult, LearnerSpec, cross_fit

RANK_RTOL = 1e-10
MAX_JACOBIAN_COND = 1e14


class RankDeficientWarning(UserWarning):
    """The residual design lost rank; a minimum-norm solution was used."""


class SingularJacobianError(np.linalg.LinAlgError):
    """The score Jacobian cannot be inverted for the variance."""


def augment(X) -> np.ndarray:
    """Prepend a ones column: rows become ``[1, x']``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    return np.column_stack([np.ones(X.shape[0]), X])


def score_matrix(W, crossfit: CrossFitResult, beta) -> np.ndarray:
    """Per-row score vectors, shape (n, p)."""
    W = np.asarray(W, dtype=float)
    eta, zeta = crossfit.eta_hat, crossfit.zeta_hat
    resid = zeta - eta * (W @ np.asarray(beta))
    return W * (eta * resid)[:, None]


def _solve(W, zeta, eta):
    D = W * eta[:, None]
    U, s, Vt = np.linalg.svd(D, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros(W.shape[1]), 0
    keep = s > RANK_RTOL * s[0]
    V, Uk, sk = Vt[keep].T, U[:, keep], s[keep]
    beta = V @ ((Uk.T @ zeta) / sk)
    # one refinement step tightens the normal-equation residual
    beta = beta + V @ ((Uk.T @ (zeta - D @ beta)) / sk)
    return beta, int(keep.sum())


def solve_cate(X_aug, residuals: CrossFitResult) -> np.ndarray:
    """Least-squares coefficients of ``zeta`` on ``eta * X_aug``.

    Rank-deficient designs get the minimum-norm solution and a
    :class:`RankDeficientWarning`.
    """
    W = np.asarray(X_aug, dtype=float)
    beta, rank = _solve(W, residuals.zeta_hat, residuals.eta_hat)
    if rank < W.shape[1]:
        warnings.warn(
            f"residual design has rank {rank} < {W.shape[1]}; using minimum-norm solution",
            RankDeficientWarning,
            stacklevel=2,
        )
    return beta


def estimate_variance(X_aug, crossfit: CrossFitResult, beta_hat) -> np.ndarray:
    """Covariance of the coefficient estimate, ``J^-1 Omega J^-T / n``.

    ``J`` and ``Omega`` average, with equal weight per fold, the fold means
    of ``eta^2 w w'`` and ``psi psi'``. Each fold's rows carry residuals
    from the learners trained without them.
    """
    W = np.asarray(X_aug, dtype=float)
    n, p = W.shape
    eta = crossfit.eta_hat
    psi = score_matrix(W, crossfit, beta_hat)
    folds = crossfit.fold_of
    labels = np.unique(folds)
    J = np.zeros((p, p))
    omega = np.zeros((p, p))
    for l in labels:
        rows = folds == l
        Wl = W[rows]
        J += (Wl * (eta[rows] ** 2)[:, None]).T @ Wl / rows.sum()
        omega += psi[rows].T @ psi[rows] / rows.sum()
    J /= labels.size
    omega /= labels.size
    cond = np.linalg.cond(J)
    if not np.isfinite(cond) or cond > MAX_JACOBIAN_COND:
        raise SingularJacobianError(f"score Jacobian is singular (condition number {cond:.3g})")
    J_inv = np.linalg.inv(J)
    cov = J_inv @ omega @ J_inv.T / n
    return 0.5 * (cov + cov.T)


@dataclass(frozen=True)
class DmlFit:
    """Result of a DML fit on feature map ``design`` (n x p)."""

    beta_hat: np.ndarray
    cov_beta: np.ndarray
    n_used: int
    crossfit: CrossFitResult
    design: np.ndarray
    rank_deficient: bool = False
    names: tuple[str, ...] = ()

    @property
    def coef(self) -> np.ndarray:
        return self.beta_hat

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov_beta), 0.0, None))

    def moment_sum(self) -> np.ndarray:
        """Sum of the score over all rows (zero at the solution)."""
        return score_matrix(self.design, self.crossfit, self.beta_hat).sum(axis=0)

    def cate(self, X, mu=None):
        """CATEs and their variances for covariate rows ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if mu is not None:
            X = X - np.asarray(mu, dtype=float)
        w = augment(X)
        return w @ self.beta_hat, _quad_rows(w, self.cov_beta)

    def to_dict(self) -> dict:
        return {
            "beta": self.beta_hat.tolist(),
            "cov": self.cov_beta.tolist(),
            "std_errors": self.std_errors.tolist(),
            "n_used": self.n_used,
            "names": list(self.names),
            "rank_deficient": self.rank_deficient,
        }


def _quad_rows(w, cov):
    return np.clip(np.einsum("ij,jk,ik->i", w, cov, w), 0.0, None)


def fit_linear_cate(W, dataset: Dataset, q_spec, h_spec, seed: int, n_folds=2, fold_of=None):
    """Cross-fit nuisances on ``dataset.X`` and fit the CATE on features ``W``.

    Returns ``(beta, cov, crossfit, rank)``.
    """
    W = np.asarray(W, dtype=float)
    cf = cross_fit(dataset, q_spec, h_spec, n_folds=n_folds, seed=seed, fold_of=fold_of)
    beta, rank = _solve(W, cf.zeta_hat, cf.eta_hat)
    if rank < W.shape[1]:
        warnings.warn(f"residual design has rank {rank} < {W.shape[1]}", RankDeficientWarning, stacklevel=3)
    cov = estimate_variance(W, cf, beta)
    return beta, cov, cf, rank


def fit_dml(
    dataset: Dataset,
    q_spec: LearnerSpec,
    h_spec: LearnerSpec,
    seed: int = 0,
    n_folds: int = 2,
    fold_of=None,
) -> DmlFit:
    """Centralized DML: cross-fit q and h, regress residuals, sandwich variance."""
    if not dataset.has_both_arms():
        raise ValueError("dataset must contain both treated and control rows")
    W = augment(dataset.X)
    beta, cov, cf, rank = fit_linear_cate(W, dataset, q_spec, h_spec, seed, n_folds, fold_of)
    W.setflags(write=False)
    return DmlFit(beta, cov, dataset.n, cf, W, rank < W.shape[1], ("const", *dataset.covariate_names))


def predict_cate(fit, x, mu=None) -> tuple[float, float]:
    """CATE estimate and variance at a single covariate vector.

    For a centralized fit ``mu`` defaults to zero; fitted user models
    apply their own shift vector.
    """
    x = np.asarray(x, dtype=float).reshape(1, -1)
    tau, var = fit.cate(x, mu) if mu is not None else fit.cate(x)
    return float(tau[0]), float(var[0])


# ----------------------------------------------------------- significance


@dataclass(frozen=True)
class TestResult:
    __test__ = False  # not a pytest class

    estimate: float
    std_error: float
    z_stat: float
    p_value: float
    sign_class: str
    alpha: float
    degenerate: bool = False

    @property
    def stars(self) -> str:
        if self.sign_class == "not_significant":
            return ""
        return "**" if self.p_value < 0.01 else "*" if self.p_value < 0.05 else ""


def significance_test(estimate: float, std_error: float, alpha: float = 0.05) -> TestResult:
    """Two-sided normal test of ``estimate == 0``."""
    estimate, std_error = float(estimate), float(std_error)
    if std_error <= 0.0:
        if estimate == 0.0:
            return TestResult(estimate, 0.0, 0.0, 1.0, "not_significant", alpha, True)
        cls = "positive" if estimate > 0 else "negative"
        return TestResult(estimate, 0.0, float(np.copysign(np.inf, estimate)), 0.0, cls, alpha, True)
    z = estimate / std_error
    p = float(2.0 * norm.sf(abs(z)))
    crit = norm.ppf(1.0 - alpha / 2.0)
    cls = "positive" if z > crit else "negative" if z < -crit else "not_significant"
    return TestResult(estimate, std_error, z, p, cls, alpha)


def test_coefficients(fit, alpha: float = 0.05) -> list[TestResult]:
    """One test per coefficient of a fitted model (centralized or user)."""
    return [significance_test(b, s, alpha) for b, s in zip(fit.coef, fit.std_errors)]


test_coefficients.__test__ = False


def test_cates(fit, X, alpha: float = 0.05) -> list[TestResult]:
    tau, var = fit.cate(X)
    return [significance_test(t, np.sqrt(v), alpha) for t, v in zip(tau, var)]


test_cates.__test__ = False


# ------------------------------------------------------ orthogonality probe


@dataclass(frozen=True)
class OrthogonalityReport:
    r_grid: tuple[float, ...]
    moments: np.ndarray  # (len(r_grid), p) orthogonal score means
    naive_moments: np.ndarray
    derivative: np.ndarray  # finite difference between the first two r values
    naive_derivative: np.ndarray
    mc_std_error: np.ndarray  # of the orthogonal moment at r_grid[0]


def check_orthogonality(
    sampler: Callable,
    q_true: Callable,
    h_true: Callable,
    beta,
    delta_q: Callable,
    delta_h: Callable,
    r_grid: Sequence[float] = (0.0, 1e-2),
    n_mc: int = 100_000,
    seed: int = 0,
) -> OrthogonalityReport:
    """Monte-Carlo Gateaux derivative of the expected score along
    ``(q + r delta_q, h + r delta_h)``.

    ``sampler(rng, n)`` returns ``(X, Z, Y, ...)``. The control is the
    regression-adjustment score ``w z (y - (q - theta h) - theta z)``, which
    has the same nuisances but no partialling-out of the treatment.
    """
    r_grid = tuple(float(r) for r in r_grid)
    if len(r_grid) < 2 or any(not 0.0 <= r < 1.0 for r in r_grid):
        raise ValueError("r_grid needs at least two values in [0, 1)")
    X, Z, Y = sampler(_rng.make_rng(seed, _rng.ORTHO), n_mc)[:3]
    w = augment(X)
    theta = w @ np.asarray(beta, dtype=float)
    q0, h0, dq, dh = q_true(X), h_true(X), delta_q(X), delta_h(X)
    moments, naive = [], []
    se = None
    for r in r_grid:
        q, h = q0 + r * dq, h0 + r * dh
        eta = Z - h
        psi = w * (eta * (Y - q - theta * eta))[:, None]
        psi_naive = w * (Z * (Y - (q - theta * h) - theta * Z))[:, None]
        moments.append(psi.mean(axis=0))
        naive.append(psi_naive.mean(axis=0))
        if se is None:
            se = psi.std(axis=0) / np.sqrt(n_mc)
    moments, naive = np.array(moments), np.array(naive)
    dr = r_grid[1] - r_grid[0]
    return OrthogonalityReport(
        r_grid, moments, naive,
        (moments[1] - moments[0]) / dr,
        (naive[1] - naive[0]) / dr,
        se,
    )
