"""Private, user-side linear dimensionality reduction ``x -> (x - mu)' F``."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _rng
from .data import PartyData
from .dml import fit_dml
from .nuisance import LearnerSpec

METHODS = ("pca", "bootstrap", "combined", "identity")
DEPENDENCE_TOL = 1e-10


class NonConfidentialWarning(UserWarning):
    """The reducer keeps all m dimensions, so it can be inverted."""


@dataclass(frozen=True)
class DimReducer:
    """Reduction matrix ``F`` (m x m_tilde) and shift vector ``mu`` (length m)."""

    F: np.ndarray
    mu: np.ndarray
    method_tag: str

    def __post_init__(self):
        F = np.array(self.F, dtype=float)
        if F.ndim == 1:
            F = F.reshape(-1, 1)
        mu = np.array(self.mu, dtype=float).ravel()
        if mu.shape[0] != F.shape[0]:
            raise ValueError(f"mu has length {mu.shape[0]} but F has {F.shape[0]} rows")
        if self.method_tag not in METHODS:
            raise ValueError(f"unknown method tag {self.method_tag!r}")
        if not 1 <= F.shape[1] <= F.shape[0]:
            raise ValueError(f"need 1 <= m_tilde <= m, got F of shape {F.shape}")
        if np.linalg.matrix_rank(F) < F.shape[1]:
            raise ValueError("F must have full column rank")
        F.setflags(write=False)
        mu.setflags(write=False)
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "mu", mu)

    @property
    def m(self) -> int:
        return self.F.shape[0]

    @property
    def m_tilde(self) -> int:
        return self.F.shape[1]

    @property
    def confidential(self) -> bool:
        return self.m_tilde < self.m

    @property
    def F_bar(self) -> np.ndarray:
        """``blockdiag(1, F)``, acting on ``[1, x - mu]`` rows."""
        out = np.zeros((self.m + 1, self.m_tilde + 1))
        out[0, 0] = 1.0
        out[1:, 1:] = self.F
        return out

    def to_dict(self) -> dict:
        return {"private": "DO NOT SHARE - local reducer state",
                "F": self.F.tolist(), "mu": self.mu.tolist(), "method_tag": self.method_tag}

    @classmethod
    def from_dict(cls, d) -> "DimReducer":
        return cls(np.array(d["F"]), np.array(d["mu"]), d["method_tag"])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)


def identity_reducer(m: int) -> DimReducer:
    return DimReducer(np.eye(m), np.zeros(m), "identity")


def apply(reducer: DimReducer, X) -> np.ndarray:
    """Intermediate representation ``(X - 1 mu') F``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != reducer.m:
        raise ValueError(f"X has {X.shape[1]} columns, reducer expects {reducer.m}")
    return (X - reducer.mu) @ reducer.F


def fit_pca(X, dim: int) -> DimReducer:
    """Top-``dim`` principal directions of ``X`` with ``mu`` = column means."""
    X = np.asarray(X, dtype=float)
    n, m = X.shape
    if not 1 <= dim <= m:
        raise ValueError(f"dim must be in [1, {m}], got {dim}")
    if n < 2:
        raise ValueError("PCA needs at least 2 rows")
    mu = X.mean(axis=0)
    _, s, Vt = np.linalg.svd(X - mu, full_matrices=True)
    F = Vt[:dim].T
    # deterministic sign: largest-magnitude loading positive
    signs = np.sign(F[np.argmax(np.abs(F), axis=0), np.arange(dim)])
    return DimReducer(F * np.where(signs == 0, 1.0, signs), mu, "pca")


def fit_bootstrap_dr(
    party: PartyData,
    dim: int,
    p: float = 0.5,
    q_spec: LearnerSpec | None = None,
    h_spec: LearnerSpec | None = None,
    seed: int = 0,
    replace: bool = False,
    max_retries: int = 10,
) -> DimReducer:
    """Reduction matrix whose columns are covariate coefficients estimated
    by DML on ``dim`` random subsamples of size ``floor(p * n_k)``.

    The intercept of each subsample estimate is dropped; the ones column of
    ``F_bar`` already spans it. ``replace=True`` draws with replacement.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    q_spec = q_spec or LearnerSpec.ols()
    h_spec = h_spec or LearnerSpec.logistic()
    data = party.data
    size = int(math.floor(p * data.n))
    if size < 10 * (data.m + 1):
        warnings.warn(
            f"subsample size {size} is below 10(m+1) = {10 * (data.m + 1)}",
            stacklevel=2,
        )
    rng = _rng.make_rng(seed, _rng.BOOTSTRAP)
    cols = []
    for b in range(dim):
        for attempt in range(max_retries):
            rows = rng.choice(data.n, size, replace=replace)
            sub = data.take(rows)
            if sub.n_treated < 2 or sub.n - sub.n_treated < 2:
                continue
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    fit = fit_dml(sub, q_spec, h_spec, seed=_rng.child_seed(seed, _rng.BOOTSTRAP, b, attempt))
            except (ValueError, np.linalg.LinAlgError):
                continue
            cols.append(fit.beta_hat[1:])
            break
        else:
            raise ValueError(f"bootstrap draw {b} failed {max_retries} times (single-class subsamples)")
    return DimReducer(np.column_stack(cols), np.zeros(data.m), "bootstrap")


def _independent_columns(F: np.ndarray, tol: float = DEPENDENCE_TOL) -> list[int]:
    """Greedy left-to-right selection of linearly independent columns."""
    kept: list[int] = []
    basis = np.zeros((F.shape[0], 0))
    for j in range(F.shape[1]):
        v = F[:, j]
        norm = np.linalg.norm(v)
        if norm == 0.0:
            continue
        resid = v - basis @ (basis.T @ v)
        resid = resid - basis @ (basis.T @ resid)
        if np.linalg.norm(resid) > tol * norm:
            kept.append(j)
            basis = np.column_stack([basis, resid / np.linalg.norm(resid)])
    return kept


def combine(reducers: Sequence[DimReducer]) -> DimReducer:
    """Concatenate reducers column-wise, e.g. ``[F_bootstrap, F_pca]``.

    Numerically dependent columns are dropped. The shift vector is the one
    non-zero ``mu`` among the inputs (bootstrap parts carry ``mu = 0`` and
    are applied to the same centered data).
    """
    if not reducers:
        raise ValueError("nothing to combine")
    m = reducers[0].m
    if any(r.m != m for r in reducers):
        raise ValueError("reducers disagree on m")
    shifts = [r.mu for r in reducers if np.any(r.mu != 0)]
    for s in shifts[1:]:
        if not np.array_equal(s, shifts[0]):
            raise ValueError("cannot combine reducers with different non-zero shift vectors")
    mu = shifts[0] if shifts else np.zeros(m)
    F = np.column_stack([r.F for r in reducers])
    kept = _independent_columns(F)
    if not kept:
        raise ValueError("combined reducer has no independent columns")
    out = DimReducer(F[:, kept], mu, "combined")
    if not out.confidential:
        warnings.warn("combined reducer keeps all m dimensions (not confidential)",
                      NonConfidentialWarning, stacklevel=2)
    return out


@dataclass(frozen=True)
class ReducerConfig:
    """How a user builds its reducer.

    ``method`` is one of ``pca``, ``bootstrap``, ``pca+b`` or ``identity``.
    ``dim`` is the total reduced dimension (default ``m - 1``); for
    ``pca+b`` the PCA part gets ``dim - bs_dim`` columns.
    """

    method: str = "pca+b"
    dim: int | None = None
    bs_dim: int | None = None
    p: float = 0.5
    q_spec: LearnerSpec | None = None
    h_spec: LearnerSpec | None = None

    def resolve_dims(self, m: int) -> tuple[int, int]:
        dim = m - 1 if self.dim is None else self.dim
        bs = self.bs_dim if self.bs_dim is not None else max(1, math.ceil(0.1 * m))
        return dim, bs

    def to_dict(self) -> dict:
        return {"method": self.method, "dim": self.dim, "bs_dim": self.bs_dim, "p": self.p,
                "q_spec": self.q_spec.to_dict() if self.q_spec else None,
                "h_spec": self.h_spec.to_dict() if self.h_spec else None}


def build_reducer(party: PartyData, config: ReducerConfig, seed: int) -> DimReducer:
    X = party.data.X
    m = X.shape[1]
    dim, bs_dim = config.resolve_dims(m)
    method = config.method.lower()
    if method == "identity":
        return identity_reducer(m)
    if method == "pca":
        return fit_pca(X, dim)
    boot = fit_bootstrap_dr(party, bs_dim if method == "pca+b" else dim, config.p,
                            config.q_spec, config.h_spec, seed)
    if method == "bootstrap":
        return boot
    if method == "pca+b":
        if dim <= bs_dim:
            raise ValueError(f"dim ({dim}) must exceed bs_dim ({bs_dim}) for pca+b")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NonConfidentialWarning)
            return combine([boot, fit_pca(X, dim - bs_dim)])
    raise ValueError(f"unknown reducer method {config.method!r}")
