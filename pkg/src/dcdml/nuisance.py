"""Nuisance learners for the outcome regression q and the propensity h,
and cross-fitting that produces out-of-fold residuals."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import _rng
from .data import Dataset
from .forest import RandomForest

PROPENSITY_CLIP = 0.01
_RANK_RTOL = 1e-10

KINDS = ("ols", "ridge", "random_forest", "logistic")


@dataclass(frozen=True)
class LearnerSpec:
    """Learner choice for q or h.

    ``lam`` is the L2 penalty for ridge and logistic. Forest fields are
    ignored by the linear kinds.
    """

    kind: str
    lam: float = 0.0
    n_trees: int = 100
    max_depth: int | None = None
    min_leaf: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}; expected one of {KINDS}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")

    @classmethod
    def ols(cls):
        return cls("ols")

    @classmethod
    def ridge(cls, lam=1.0):
        return cls("ridge", lam=lam)

    @classmethod
    def random_forest(cls, n_trees=100, max_depth=None, min_leaf=5, seed=0):
        return cls("random_forest", n_trees=n_trees, max_depth=max_depth, min_leaf=min_leaf, seed=seed)

    @classmethod
    def logistic(cls, lam=1.0):
        return cls("logistic", lam=lam)

    def label(self) -> str:
        if self.kind in ("ridge", "logistic"):
            return f"{self.kind}({self.lam:g})"
        if self.kind == "random_forest":
            return f"random_forest({self.n_trees})"
        return self.kind

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lam": self.lam, "n_trees": self.n_trees,
                "max_depth": self.max_depth, "min_leaf": self.min_leaf, "seed": self.seed}


RegressorSpec = LearnerSpec
ClassifierSpec = LearnerSpec

_SHORT_NAMES = {"ols": "ols", "ridge": "ridge", "rf": "random_forest",
                "random_forest": "random_forest", "logistic": "logistic"}


def parse_learner(text: str, n_trees: int = 100) -> LearnerSpec:
    """Parse CLI shorthand such as ``ols``, ``ridge:0.5``, ``rf``, ``logistic``."""
    name, _, arg = text.partition(":")
    kind = _SHORT_NAMES.get(name.strip().lower())
    if kind is None:
        raise ValueError(f"unknown learner {text!r}")
    if kind == "ridge":
        return LearnerSpec.ridge(float(arg) if arg else 1.0)
    if kind == "logistic":
        return LearnerSpec.logistic(float(arg) if arg else 1.0)
    if kind == "random_forest":
        return LearnerSpec.random_forest(n_trees=int(arg) if arg else n_trees)
    return LearnerSpec.ols()


# ---------------------------------------------------------------- learners


class LinearRegressor:
    """Least squares with an unpenalized intercept.

    With ``lam == 0`` the slope solve is a minimum-norm pseudo-inverse on
    centered features, so predictions are unchanged by any invertible
    affine map of the features. ``rank_deficient`` records when the
    centered design lost rank.
    """

    def __init__(self, lam=0.0):
        self.lam = float(lam)

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        x_mean, y_mean = X.mean(axis=0), y.mean()
        Xc, yc = X - x_mean, y - y_mean
        if self.lam == 0.0:
            U, s, Vt = np.linalg.svd(Xc, full_matrices=False)
            keep = s > _RANK_RTOL * s[0] if s.size and s[0] > 0 else np.zeros_like(s, bool)
            self.rank = int(keep.sum())
            self.coef_ = Vt[keep].T @ ((U[:, keep].T @ yc) / s[keep])
        else:
            A = Xc.T @ Xc + self.lam * np.eye(X.shape[1])
            self.coef_ = np.linalg.solve(A, Xc.T @ yc)
            self.rank = X.shape[1]
        self.intercept_ = y_mean - x_mean @ self.coef_
        self.rank_deficient = self.rank < X.shape[1]
        return self

    def predict(self, X):
        return np.asarray(X, dtype=float) @ self.coef_ + self.intercept_


class LogisticClassifier:
    """L2-penalized logistic regression fitted by damped Newton steps.

    Features are standardized internally; ``lam`` penalizes the
    standardized slopes and never the intercept.
    """

    def __init__(self, lam=1.0, max_iter=100, tol=1e-8):
        self.lam = float(lam)
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, z):
        X = np.asarray(X, dtype=float)
        z = np.asarray(z, dtype=float)
        self.mean_ = X.mean(axis=0)
        sd = X.std(axis=0)
        self.scale_ = np.where(sd > 0, sd, 1.0)
        A = np.column_stack([np.ones(X.shape[0]), (X - self.mean_) / self.scale_])
        pen = np.full(A.shape[1], self.lam)
        pen[0] = 0.0

        def objective(w):
            eta = A @ w
            return np.sum(np.logaddexp(0.0, eta) - z * eta) + 0.5 * np.sum(pen * w * w)

        w = np.zeros(A.shape[1])
        p0 = np.clip(z.mean(), 1e-6, 1 - 1e-6)
        w[0] = math.log(p0 / (1 - p0))
        f = objective(w)
        for _ in range(self.max_iter):
            p = expit(A @ w)
            grad = A.T @ (p - z) + pen * w
            H = (A * (p * (1 - p))[:, None]).T @ A + np.diag(pen)
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
            t = 1.0
            while t > 1e-10:
                w_new = w - t * step
                f_new = objective(w_new)
                if f_new <= f:
                    break
                t *= 0.5
            else:
                break
            done = np.max(np.abs(w_new - w)) < self.tol
            w, f = w_new, f_new
            if done:
                break
        self.w_ = w
        return self

    def predict(self, X):
        A = (np.asarray(X, dtype=float) - self.mean_) / self.scale_
        return expit(self.w_[0] + A @ self.w_[1:])


class ClippedClassifier:
    """Wraps a probability model and clips its output into the overlap band."""

    def __init__(self, model, clip=PROPENSITY_CLIP):
        self.model = model
        self.clip = clip

    def predict(self, X):
        return np.clip(self.model.predict(X), self.clip, 1.0 - self.clip)


def _forest(spec: LearnerSpec, m: int, classify: bool, seed: int) -> RandomForest:
    max_features = max(1, int(math.sqrt(m))) if classify else max(1, m // 3)
    return RandomForest(spec.n_trees, max_features, spec.max_depth, spec.min_leaf, seed)


def fit_regressor(X, Y, spec: LearnerSpec, seed: int | None = None):
    """Fit an outcome model; the result has ``predict(X) -> values``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.shape[0] < 2:
        raise ValueError("need at least 2 rows to fit a regressor")
    seed = spec.seed if seed is None else seed
    if spec.kind in ("ols", "ridge"):
        return LinearRegressor(spec.lam if spec.kind == "ridge" else 0.0).fit(X, Y)
    if spec.kind == "random_forest":
        return _forest(spec, X.shape[1], False, seed).fit(X, Y)
    # logistic as a regressor is only meaningful for 0/1 targets
    return LogisticClassifier(spec.lam).fit(X, Y)


def fit_classifier(X, Z, spec: LearnerSpec, seed: int | None = None) -> ClippedClassifier:
    """Fit a propensity model whose predictions lie in [0.01, 0.99].

    ``ols`` and ``ridge`` give a clipped linear probability model.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    Z = np.asarray(Z, dtype=float)
    if not (0 < Z.sum() < Z.shape[0]):
        raise ValueError("single-class treatment input: both classes are required")
    seed = spec.seed if seed is None else seed
    if spec.kind == "logistic":
        model = LogisticClassifier(spec.lam).fit(X, Z)
    elif spec.kind == "random_forest":
        model = _forest(spec, X.shape[1], True, seed).fit(X, Z)
    else:
        model = LinearRegressor(spec.lam if spec.kind == "ridge" else 0.0).fit(X, Z)
    return ClippedClassifier(model)


# ------------------------------------------------------------ cross-fitting


@dataclass(frozen=True)
class CrossFitResult:
    """Out-of-fold residuals.

    Row ``i`` was predicted by ``fold_models[fold_of[i]]``, whose learners
    were trained on every row outside that fold.
    """

    zeta_hat: np.ndarray
    eta_hat: np.ndarray
    fold_of: np.ndarray
    fold_models: tuple
    q_hat: np.ndarray | None = None
    h_hat: np.ndarray | None = None

    @property
    def n_folds(self) -> int:
        return len(self.fold_models)


def make_folds(Z, n_folds: int, seed: int) -> np.ndarray:
    """Stratified random fold labels: fold sizes differ by at most one and
    each arm is spread evenly across folds."""
    Z = np.asarray(Z)
    n = Z.shape[0]
    if n_folds < 1:
        raise ValueError("n_folds must be >= 1")
    rng = _rng.make_rng(seed, _rng.FOLDS)
    order = np.concatenate([
        rng.permutation(np.flatnonzero(Z == 1)),
        rng.permutation(np.flatnonzero(Z != 1)),
    ])
    fold_of = np.empty(n, dtype=np.intp)
    fold_of[order] = np.arange(n) % n_folds
    return fold_of


def _check_folds(Z, fold_of, n_folds):
    for l in range(n_folds):
        inside = fold_of == l
        if not inside.any():
            raise ValueError(f"fold {l} is empty")
        train = Z[~inside] if n_folds > 1 else Z
        test = Z[inside]
        for part, label in ((train, "training complement"), (test, "fold")):
            if not (0 < part.sum() < part.shape[0]):
                raise ValueError(
                    f"{label} of fold {l} lacks a treatment class even after stratification"
                )


def cross_fit(
    dataset: Dataset,
    q_spec: LearnerSpec,
    h_spec: LearnerSpec,
    n_folds: int = 2,
    seed: int = 0,
    fold_of=None,
) -> CrossFitResult:
    """Cross-fitted residuals ``zeta = y - q(x)`` and ``eta = z - h(x)``.

    ``fold_of`` overrides the random stratified split (used to share one
    split between analyses that must be compared row by row). With a
    single fold the learners are trained and evaluated on all rows.
    """
    X, Z, Y = dataset.X, dataset.Z, dataset.Y
    n = dataset.n
    if fold_of is None:
        fold_of = make_folds(Z, n_folds, seed)
    else:
        fold_of = np.asarray(fold_of, dtype=np.intp)
        if fold_of.shape != (n,):
            raise ValueError(f"fold_of must have length {n}")
        n_folds = int(fold_of.max()) + 1
    _check_folds(Z, fold_of, n_folds)

    q_hat = np.empty(n)
    h_hat = np.empty(n)
    models = []
    for l in range(n_folds):
        test = fold_of == l
        train = ~test if n_folds > 1 else test
        q = fit_regressor(X[train], Y[train], q_spec, seed=_rng.child_seed(seed, _rng.LEARNER, l, 0))
        h = fit_classifier(X[train], Z[train], h_spec, seed=_rng.child_seed(seed, _rng.LEARNER, l, 1))
        q_hat[test] = q.predict(X[test])
        h_hat[test] = h.predict(X[test])
        models.append((q, h))
    fold_of = fold_of.copy()
    for arr in (q_hat, h_hat, fold_of):
        arr.setflags(write=False)
    zeta = Y - q_hat
    eta = Z - h_hat
    zeta.setflags(write=False)
    eta.setflags(write=False)
    return CrossFitResult(zeta, eta, fold_of, tuple(models), q_hat, h_hat)


# -------------------------------------------------------- learner selection


def rmse(y, pred) -> float:
    return float(np.sqrt(np.mean((np.asarray(y) - np.asarray(pred)) ** 2)))


def brier(z, prob) -> float:
    return float(np.mean((np.asarray(prob) - np.asarray(z)) ** 2))


def learner_scores(
    dataset: Dataset, candidates: Sequence[LearnerSpec], metric: str, trials: int = 1, seed: int = 0
) -> list[float]:
    """Mean two-fold cross-validated ``rmse`` (on Y) or ``brier`` (on Z)."""
    if metric not in ("rmse", "brier"):
        raise ValueError(f"metric must be 'rmse' or 'brier', got {metric!r}")
    if not candidates:
        raise ValueError("need at least one candidate")
    X, Z, Y = dataset.X, dataset.Z, dataset.Y
    scores = np.zeros(len(candidates))
    for t in range(trials):
        fold_of = make_folds(Z, 2, _rng.child_seed(seed, _rng.SELECT, t))
        for c, spec in enumerate(candidates):
            pred = np.empty(dataset.n)
            for l in range(2):
                test = fold_of == l
                s = _rng.child_seed(seed, _rng.SELECT, t, c, l)
                if metric == "rmse":
                    pred[test] = fit_regressor(X[~test], Y[~test], spec, seed=s).predict(X[test])
                else:
                    pred[test] = fit_classifier(X[~test], Z[~test], spec, seed=s).predict(X[test])
            scores[c] += rmse(Y, pred) if metric == "rmse" else brier(Z, pred)
    return list(scores / trials)


def select_learner(
    dataset: Dataset, candidates: Sequence[LearnerSpec], metric: str, trials: int = 1, seed: int = 0
) -> LearnerSpec:
    """Candidate with the smallest mean cross-validated score (first on ties)."""
    scores = learner_scores(dataset, candidates, metric, trials, seed)
    return candidates[int(np.argmin(scores))]


def with_seed(spec: LearnerSpec, seed: int) -> LearnerSpec:
    return replace(spec, seed=seed)
