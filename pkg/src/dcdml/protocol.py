"""One-shot collaborative DML protocol between users and an analyst.

Stage 1 (user)     share ``[1, (X - mu) F]`` for data and anchor, plus Z, Y.
Stage 2 (analyst)  align all shares through the anchor, fit DML in the
                   common coordinates, return one package per user.
Stage 3 (user)     map the package back to original covariates.

Only two kinds of message cross the user/analyst boundary; both are plain
JSON validated against the schemas below.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import jsonschema
import numpy as np

from . import _rng
from .data import Dataset, PartyData
from .dimred import DimReducer, ReducerConfig, apply, build_reducer
from .dml import DmlFit, _quad_rows, augment, fit_linear_cate, score_matrix
from .nuisance import CrossFitResult, LearnerSpec

VERSION = 1
PINV_RCOND = 1e-10
RANK_RTOL = 1e-10


# ----------------------------------------------------------------- schemas

# Array payloads are checked element-wise with numpy in ``validate_message``;
# per-element jsonschema checks are far too slow for r x r matrices.
_MATRIX = {"type": "array", "items": {"type": "array"}, "x-kind": "matrix"}
_VECTOR = {"type": "array", "x-kind": "vector"}
_BINARY = {"type": "array", "x-kind": "binary"}

SHARE_SCHEMA = {
    "type": "object",
    "properties": {
        "version": {"const": VERSION},
        "party_id": {"type": "integer", "minimum": 1},
        "r": {"type": "integer", "minimum": 1},
        "m_tilde": {"type": "integer", "minimum": 1},
        "B": _MATRIX,
        "B_anc": _MATRIX,
        "Z": _BINARY,
        "Y": _VECTOR,
    },
    "required": ["version", "party_id", "r", "m_tilde", "B", "B_anc", "Z", "Y"],
    "additionalProperties": False,
}

RETURN_SCHEMA = {
    "type": "object",
    "properties": {
        "version": {"const": VERSION},
        "party_id": {"type": "integer", "minimum": 1},
        "R_point": _VECTOR,
        "R_var": _MATRIX,
    },
    "required": ["version", "party_id", "R_point", "R_var"],
    "additionalProperties": False,
}

NI_RETURN_SCHEMA = {
    "type": "object",
    "properties": {
        "version": {"const": VERSION},
        "party_id": {"type": "integer", "minimum": 1},
        "R_point_anc": _VECTOR,
        "R_var_anc": _MATRIX,
    },
    "required": ["version", "party_id", "R_point_anc", "R_var_anc"],
    "additionalProperties": False,
}


class MessageError(ValueError):
    """A wire message failed schema or consistency validation."""


def _check_array(name: str, value, kind: str) -> None:
    try:
        a = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise MessageError(f"invalid message: {name!r} is not a numeric {kind}") from None
    if a.ndim != (2 if kind == "matrix" else 1):
        raise MessageError(f"invalid message: {name!r} is not a {kind}")
    if not np.all(np.isfinite(a)):
        raise MessageError(f"invalid message: {name!r} has non-finite entries")
    if kind == "binary" and not np.all((a == 0) | (a == 1)):
        raise MessageError(f"invalid message: {name!r} must contain only 0 and 1")


def validate_message(msg: dict, schema: dict) -> None:
    error = next(jsonschema.Draft202012Validator(schema).iter_errors(msg), None)
    if error is not None:
        raise MessageError(f"invalid message: {error.message}")
    for name, spec in schema["properties"].items():
        if "x-kind" in spec:
            _check_array(name, msg[name], spec["x-kind"])


def _mat(a) -> list:
    return np.asarray(a, dtype=float).tolist()


# ------------------------------------------------------------------ anchor


@dataclass(frozen=True)
class AnchorDataset:
    """Shared dummy covariates, uniform within per-covariate ranges."""

    X_anc: np.ndarray
    ranges: tuple[tuple[float, float], ...]
    seed: int

    @property
    def r(self) -> int:
        return self.X_anc.shape[0]

    @property
    def m(self) -> int:
        return self.X_anc.shape[1]


def anchor_ranges(parties: Sequence[PartyData]) -> tuple[tuple[float, float], ...]:
    """Union of the parties' per-covariate min/max."""
    lo = np.min([p.data.X.min(axis=0) for p in parties], axis=0)
    hi = np.max([p.data.X.max(axis=0) for p in parties], axis=0)
    return tuple((float(a), float(b)) for a, b in zip(lo, hi))


def gen_anchor(ranges, r: int, seed: int) -> AnchorDataset:
    ranges = tuple((float(a), float(b)) for a, b in ranges)
    m = len(ranges)
    if m == 0:
        raise ValueError("need at least one covariate range")
    for j, (a, b) in enumerate(ranges):
        if not (np.isfinite(a) and np.isfinite(b)) or a >= b:
            raise ValueError(f"degenerate range for covariate {j}: ({a}, {b})")
    if r < m + 1:
        raise ValueError(f"anchor needs r >= m + 1 = {m + 1} rows, got {r}")
    lo, hi = np.array(ranges).T
    X = _rng.make_rng(seed, _rng.ANCHOR).uniform(lo, hi, size=(r, m))
    X.setflags(write=False)
    return AnchorDataset(X, ranges, int(seed))


# ------------------------------------------------------------ stage 1: user


@dataclass(frozen=True)
class IntermediateShare:
    party_id: int
    B: np.ndarray
    B_anc: np.ndarray
    Z: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        B = np.asarray(self.B, dtype=float)
        B_anc = np.asarray(self.B_anc, dtype=float)
        if B.ndim != 2 or B_anc.ndim != 2 or B.shape[1] != B_anc.shape[1]:
            raise MessageError("B and B_anc must be matrices with equal column counts")
        if not (np.all(B[:, 0] == 1.0) and np.all(B_anc[:, 0] == 1.0)):
            raise MessageError("column 0 of B and B_anc must be ones")
        if len(self.Z) != B.shape[0] or len(self.Y) != B.shape[0]:
            raise MessageError("Z and Y must have one entry per row of B")
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "B_anc", B_anc)
        object.__setattr__(self, "Z", np.asarray(self.Z, dtype=float))
        object.__setattr__(self, "Y", np.asarray(self.Y, dtype=float))

    @property
    def r(self) -> int:
        return self.B_anc.shape[0]

    @property
    def m_tilde(self) -> int:
        return self.B.shape[1] - 1

    def to_message(self) -> dict:
        return {
            "version": VERSION,
            "party_id": int(self.party_id),
            "r": self.r,
            "m_tilde": self.m_tilde,
            "B": _mat(self.B),
            "B_anc": _mat(self.B_anc),
            "Z": [int(z) for z in self.Z],
            "Y": _mat(self.Y),
        }

    @classmethod
    def from_message(cls, msg: dict) -> "IntermediateShare":
        validate_message(msg, SHARE_SCHEMA)
        share = cls(msg["party_id"], np.array(msg["B"]), np.array(msg["B_anc"]),
                    np.array(msg["Z"], dtype=float), np.array(msg["Y"]))
        if share.r != msg["r"] or share.m_tilde != msg["m_tilde"]:
            raise MessageError("declared r / m_tilde disagree with the matrices")
        return share


def make_intermediate(party: PartyData, reducer: DimReducer, anchor: AnchorDataset) -> IntermediateShare:
    if reducer.m != party.data.m or anchor.m != party.data.m:
        raise ValueError(
            f"dimension mismatch: data m={party.data.m}, reducer m={reducer.m}, anchor m={anchor.m}"
        )
    B = augment(apply(reducer, party.data.X))
    B_anc = augment(apply(reducer, anchor.X_anc))
    return IntermediateShare(party.party_id, B, B_anc, party.data.Z.copy(), party.data.Y.copy())


# -------------------------------------------------------- stage 2: analyst


@dataclass(frozen=True)
class CollabSession:
    """Analyst-side alignment of all shares.

    ``G[k]`` maps party ``k``'s share into the common coordinates; ``X_check``
    stacks ``B_k G_k`` in party order. ``alignment_error`` is the largest
    pairwise Frobenius distance between the aligned anchors.
    """

    G: tuple[np.ndarray, ...]
    X_check: np.ndarray
    m_check: int
    svd_residual: float
    singular_values: np.ndarray
    party_ids: tuple[int, ...]
    party_sizes: tuple[int, ...]
    X_check_anc: tuple[np.ndarray, ...]
    Z: np.ndarray
    Y: np.ndarray
    alignment_error: float

    def index_of(self, party_id: int) -> int:
        try:
            return self.party_ids.index(party_id)
        except ValueError:
            raise KeyError(f"party {party_id} is not in this session") from None

    def rows_of(self, party_id: int) -> slice:
        k = self.index_of(party_id)
        start = sum(self.party_sizes[:k])
        return slice(start, start + self.party_sizes[k])

    def alignment_bound(self) -> float:
        return 2.0 * self.svd_residual * np.sqrt(self.m_check)


def aggregate(shares: Sequence[IntermediateShare], m_check: int | None = None) -> CollabSession:
    """Build the collaborative representation.

    ``m_check`` defaults to the largest ``m_tilde + 1`` among the shares. It is
    truncated, with a warning, to the numerical rank of the concatenated
    anchor representations.
    """
    if not shares:
        raise ValueError("no shares to aggregate")
    ids = [s.party_id for s in shares]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate party ids: {ids}")
    r = shares[0].r
    if any(s.r != r for s in shares):
        raise ValueError(f"shares disagree on anchor size r: {[s.r for s in shares]}")
    if m_check is None:
        m_check = max(s.m_tilde + 1 for s in shares)
    if m_check < 1:
        raise ValueError("m_check must be positive")
    concat = np.hstack([s.B_anc for s in shares])
    U, sv, _ = np.linalg.svd(concat, full_matrices=False)
    rank = int(np.sum(sv > RANK_RTOL * sv[0]))
    if m_check > rank:
        warnings.warn(f"m_check={m_check} exceeds the numerical rank {rank}; truncating", stacklevel=2)
        m_check = rank
    U1 = U[:, :m_check]
    residual = float(sv[m_check]) if m_check < rank else 0.0
    G = tuple(np.linalg.pinv(s.B_anc, rcond=PINV_RCOND) @ U1 for s in shares)
    X_check = np.vstack([s.B @ g for s, g in zip(shares, G)])
    X_anc = tuple(s.B_anc @ g for s, g in zip(shares, G))
    align = max(
        (np.linalg.norm(a - b) for i, a in enumerate(X_anc) for b in X_anc[i + 1:]),
        default=0.0,
    )
    for a in (X_check, sv, *G, *X_anc):
        a.setflags(write=False)
    return CollabSession(
        G, X_check, m_check, residual, sv, tuple(ids), tuple(s.B.shape[0] for s in shares),
        X_anc, np.concatenate([s.Z for s in shares]), np.concatenate([s.Y for s in shares]),
        float(align),
    )


@dataclass(frozen=True)
class AnalystFit:
    gamma_check: np.ndarray
    cov_gamma_check: np.ndarray
    crossfit: CrossFitResult
    rank_deficient: bool
    q_spec: LearnerSpec
    h_spec: LearnerSpec
    seed: int

    def moment_sum(self, session: CollabSession) -> np.ndarray:
        return score_matrix(session.X_check, self.crossfit, self.gamma_check).sum(axis=0)

    def as_dml_fit(self, session: CollabSession) -> DmlFit:
        return DmlFit(self.gamma_check, self.cov_gamma_check, session.X_check.shape[0],
                      self.crossfit, session.X_check, self.rank_deficient)


def analyst_fit(
    session: CollabSession,
    Z=None,
    Y=None,
    q_spec: LearnerSpec | None = None,
    h_spec: LearnerSpec | None = None,
    seed: int = 0,
    n_folds: int = 2,
    fold_of=None,
) -> AnalystFit:
    """DML on the collaborative coordinates, with no extra ones column."""
    Z = session.Z if Z is None else np.asarray(Z, dtype=float)
    Y = session.Y if Y is None else np.asarray(Y, dtype=float)
    q_spec = q_spec or LearnerSpec.random_forest()
    h_spec = h_spec or LearnerSpec.random_forest()
    if len(Z) != session.X_check.shape[0] or len(Y) != len(Z):
        raise ValueError("Z and Y must have one entry per collaborative row")
    data = Dataset(session.X_check, Z, Y)
    if not data.has_both_arms():
        raise ValueError("pooled shares must contain both treated and control rows")
    gamma, cov, cf, rank = fit_linear_cate(session.X_check, data, q_spec, h_spec, seed, n_folds, fold_of)
    gamma.setflags(write=False)
    cov.setflags(write=False)
    return AnalystFit(gamma, cov, cf, rank < session.m_check, q_spec, h_spec, int(seed))


@dataclass(frozen=True)
class ReturnPackage:
    party_id: int
    R_point: np.ndarray
    R_var: np.ndarray

    def to_message(self) -> dict:
        return {"version": VERSION, "party_id": int(self.party_id),
                "R_point": _mat(self.R_point), "R_var": _mat(self.R_var)}

    @classmethod
    def from_message(cls, msg: dict) -> "ReturnPackage":
        validate_message(msg, RETURN_SCHEMA)
        return cls(msg["party_id"], np.array(msg["R_point"], dtype=float),
                   np.array(msg["R_var"], dtype=float))


def make_return(fit: AnalystFit, session: CollabSession, party_id: int) -> ReturnPackage:
    G = session.G[session.index_of(party_id)]
    R_var = G @ fit.cov_gamma_check @ G.T
    return ReturnPackage(party_id, G @ fit.gamma_check, 0.5 * (R_var + R_var.T))


# --------------------------------------------------------------- stage 3: user


@dataclass(frozen=True)
class UserCateModel:
    """A user's CATE model ``theta(x) = [1, x'] beta`` in original covariates.

    ``gamma`` holds the coefficients on the shifted features ``[1, x - mu]``;
    ``beta`` equals ``gamma`` except for the intercept
    ``alpha = gamma_0 - mu' gamma_1:``.
    """

    beta: np.ndarray
    cov_gamma: np.ndarray
    var_alpha: float
    mu: np.ndarray
    gamma: np.ndarray
    names: tuple[str, ...] = ()

    @property
    def coef(self) -> np.ndarray:
        return self.beta

    @property
    def cov_beta(self) -> np.ndarray:
        T = _shift_matrix(self.mu)
        cov = T @ self.cov_gamma @ T.T
        return 0.5 * (cov + cov.T)

    @property
    def std_errors(self) -> np.ndarray:
        var = np.diag(self.cov_gamma).copy()
        var[0] = self.var_alpha
        return np.sqrt(np.clip(var, 0.0, None))

    def cate(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        w = augment(X - self.mu)
        return w @ self.gamma, _quad_rows(w, self.cov_gamma)

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "std_errors": self.std_errors.tolist(),
            "var_alpha": self.var_alpha,
            "cov_gamma": self.cov_gamma.tolist(),
            "gamma": self.gamma.tolist(),
            "mu": self.mu.tolist(),
            "names": list(self.names),
        }

    @classmethod
    def from_dict(cls, d) -> "UserCateModel":
        return cls(np.array(d["beta"]), np.array(d["cov_gamma"]), float(d["var_alpha"]),
                   np.array(d["mu"]), np.array(d["gamma"]), tuple(d.get("names", ())))


def _shift_matrix(mu) -> np.ndarray:
    """``T`` with ``beta = T gamma``: first row ``[1, -mu']``, identity below."""
    m = len(mu)
    T = np.eye(m + 1)
    T[0, 1:] = -np.asarray(mu)
    return T


def model_from_gamma(gamma, cov_gamma, mu, names=()) -> UserCateModel:
    gamma = np.asarray(gamma, dtype=float)
    cov_gamma = np.asarray(cov_gamma, dtype=float)
    cov_gamma = 0.5 * (cov_gamma + cov_gamma.T)
    mu = np.asarray(mu, dtype=float)
    a = np.concatenate([[1.0], -mu])
    alpha = float(a @ gamma)
    var_alpha = max(float(a @ cov_gamma @ a), 0.0)
    beta = np.concatenate([[alpha], gamma[1:]])
    return UserCateModel(beta, cov_gamma, var_alpha, mu, gamma, tuple(names))


def user_finalize(reducer: DimReducer, pkg: ReturnPackage, names=()) -> UserCateModel:
    F_bar = reducer.F_bar
    if pkg.R_point.shape != (F_bar.shape[1],) or pkg.R_var.shape != (F_bar.shape[1],) * 2:
        raise ValueError(
            f"return package has dimension {pkg.R_point.shape[0]}, reducer expects {F_bar.shape[1]}"
        )
    return model_from_gamma(F_bar @ pkg.R_point, F_bar @ pkg.R_var @ F_bar.T, reducer.mu, names)


# ------------------------------------------------------------ orchestration


class Channel:
    """Serializes every message to JSON text and back, counting traffic."""

    def __init__(self):
        self.count = 0
        self.log: list[tuple[str, int]] = []

    def send(self, kind: str, party_id: int, msg: dict) -> dict:
        self.count += 1
        self.log.append((kind, party_id))
        return json.loads(json.dumps(msg))


@dataclass(frozen=True)
class DcConfig:
    """Settings for an in-process protocol run.

    ``reducer`` may be one config for all parties or a per-party sequence.
    ``anchor_r`` defaults to the total row count and ``m_check`` to ``m``.
    """

    reducer: ReducerConfig | Sequence[ReducerConfig] = field(default_factory=ReducerConfig)
    q_spec: LearnerSpec = field(default_factory=LearnerSpec.random_forest)
    h_spec: LearnerSpec = field(default_factory=LearnerSpec.random_forest)
    seed: int = 0
    m_check: int | None = None
    anchor_r: int | None = None
    anchor_ranges: tuple | None = None
    n_folds: int = 2
    fold_of: np.ndarray | None = None
    ni: bool = False
    ni_mix: bool = True
    ni_permute: bool = True
    reducers: Sequence[DimReducer] | None = None  # precomputed, bypasses ``reducer``

    def reducer_for(self, index: int) -> ReducerConfig:
        if isinstance(self.reducer, ReducerConfig):
            return self.reducer
        return self.reducer[index]


@dataclass(frozen=True)
class DcRun:
    models: list[UserCateModel]
    analyst_fit: AnalystFit
    session: CollabSession
    n_messages: int
    anchor: AnchorDataset
    reducers: list[DimReducer]

    def __iter__(self):
        return iter((self.models, self.analyst_fit, self.session))


def session_anchor(parties: Sequence[PartyData], config: DcConfig) -> AnchorDataset:
    ranges = config.anchor_ranges or anchor_ranges(parties)
    r = config.anchor_r or sum(p.data.n for p in parties)
    return gen_anchor(ranges, r, _rng.child_seed(config.seed, _rng.ANCHOR))


def party_reducer(party: PartyData, config: ReducerConfig, seed: int) -> DimReducer:
    return build_reducer(party, config, _rng.child_seed(seed, _rng.REDUCER, party.party_id))


def analyst_seed(seed: int) -> int:
    return _rng.child_seed(seed, _rng.ANALYST)


def run_dc_dml(parties: Sequence[PartyData], config: DcConfig | None = None) -> DcRun:
    """Run all three stages, passing each wire message through JSON."""
    from . import ni  # local import: ni builds on this module

    config = config or DcConfig()
    if not parties:
        raise ValueError("need at least one party")
    anchor = session_anchor(parties, config)
    if config.reducers is not None:
        reducers = list(config.reducers)
    else:
        reducers = [party_reducer(p, config.reducer_for(i), config.seed) for i, p in enumerate(parties)]
    channel = Channel()
    shares = []
    for party, red in zip(parties, reducers):
        if config.ni:
            share = ni.make_ni_intermediate(party, red, anchor, config.seed,
                                            mix=config.ni_mix, permute=config.ni_permute)
        else:
            share = make_intermediate(party, red, anchor)
        shares.append(IntermediateShare.from_message(channel.send("share", party.party_id, share.to_message())))

    m = parties[0].data.m
    session = aggregate(shares, config.m_check if config.m_check is not None else m)
    fit = analyst_fit(session, q_spec=config.q_spec, h_spec=config.h_spec,
                      seed=analyst_seed(config.seed), n_folds=config.n_folds, fold_of=config.fold_of)

    models = []
    for party, red in zip(parties, reducers):
        names = ("const", *party.data.covariate_names)
        if config.ni:
            pkg = ni.make_ni_return(fit, session, party.party_id)
            pkg = ni.NiReturnPackage.from_message(channel.send("return", party.party_id, pkg.to_message()))
            models.append(ni.ni_user_finalize(anchor, pkg, red.mu, names))
        else:
            pkg = make_return(fit, session, party.party_id)
            pkg = ReturnPackage.from_message(channel.send("return", party.party_id, pkg.to_message()))
            models.append(user_finalize(red, pkg, names))
    if channel.count != 2 * len(parties):
        raise AssertionError(f"protocol sent {channel.count} messages for {len(parties)} parties")
    return DcRun(models, fit, session, channel.count, anchor, reducers)
