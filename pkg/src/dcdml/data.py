"""Datasets, horizontal partitioning, CSV ingestion and simulation designs."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import _rng


class DataError(ValueError):
    """Raised when input data violates a dataset contract."""


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Dataset:
    """Covariates ``X`` (n x m), binary treatment ``Z`` and outcome ``Y``."""

    X: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2:
            raise DataError(f"X must be a matrix, got shape {X.shape}")
        Z = np.asarray(self.Z, dtype=float).ravel()
        Y = np.asarray(self.Y, dtype=float).ravel()
        n = X.shape[0]
        if n < 1:
            raise DataError("dataset must have at least one row")
        if Z.shape[0] != n or Y.shape[0] != n:
            raise DataError(
                f"row counts differ: X has {n}, Z has {Z.shape[0]}, Y has {Y.shape[0]}"
            )
        if not np.isin(Z, (0.0, 1.0)).all():
            raise DataError("non-binary treatment: Z entries must be 0 or 1")
        for name, arr in (("X", X), ("Y", Y)):
            if not np.isfinite(arr).all():
                raise DataError(f"non-finite entries in {name}")
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise DataError(f"{len(names)} covariate names for {X.shape[1]} columns")
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "Z", _frozen(Z))
        object.__setattr__(self, "Y", _frozen(Y))
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m(self) -> int:
        return self.X.shape[1]

    @property
    def n_treated(self) -> int:
        return int(self.Z.sum())

    def has_both_arms(self) -> bool:
        return 0 < self.n_treated < self.n

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.X[rows], self.Z[rows], self.Y[rows], self.covariate_names)

    def with_outcome(self, Y) -> "Dataset":
        return Dataset(self.X, self.Z, Y, self.covariate_names)


@dataclass(frozen=True)
class PartyData:
    party_id: int
    data: Dataset

    def __post_init__(self):
        if int(self.party_id) < 1:
            raise DataError(f"party_id must be >= 1, got {self.party_id}")


@dataclass(frozen=True)
class OracleTruth:
    """Ground truth for a simulated design.

    ``true_cate`` is stacked in party order; ``true_beta`` is ``[const, x1..xm]``.
    """

    true_cate: np.ndarray
    true_beta: np.ndarray
    true_ate: float
    party_slices: tuple[slice, ...] = field(default=())

    def cate_for(self, k: int) -> np.ndarray:
        """True CATEs of the k-th party (0-based position)."""
        return self.true_cate[self.party_slices[k]]


# ---------------------------------------------------------------- ingestion


def load_csv(path, schema: Mapping) -> Dataset:
    """Read a dataset from a headed CSV file.

    ``schema`` names the ``treatment`` and ``outcome`` columns and optionally
    a ``covariates`` list; without one every remaining column is a covariate.
    Row order is preserved.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such data file: {path}")
    t_col = schema.get("treatment")
    y_col = schema.get("outcome")
    if not t_col or not y_col:
        raise DataError("schema must name a treatment and an outcome column")

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}:{lineno}: inconsistent row length "
                    f"({len(row)} cells, header has {len(header)})"
                )
            rows.append(row)

    covariates = list(schema.get("covariates") or [c for c in header if c not in (t_col, y_col)])
    if not covariates:
        raise DataError("schema selects no covariate columns")
    missing = [c for c in [t_col, y_col, *covariates] if c not in header]
    if missing:
        raise DataError(f"columns not found in {path}: {missing}")
    if not rows:
        raise DataError(f"{path} has a header but no data rows")

    col = {name: i for i, name in enumerate(header)}
    wanted = [t_col, y_col, *covariates]
    values = np.empty((len(rows), len(wanted)))
    for r, row in enumerate(rows):
        for c, name in enumerate(wanted):
            cell = row[col[name]].strip()
            try:
                values[r, c] = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}:{r + 2}: non-numeric cell {cell!r} in column {name!r}"
                ) from None
    Z = values[:, 0]
    if not np.isin(Z, (0.0, 1.0)).all():
        bad = Z[~np.isin(Z, (0.0, 1.0))][0]
        raise DataError(f"non-binary treatment value {bad:g} in column {t_col!r}")
    return Dataset(values[:, 2:], Z, values[:, 1], tuple(covariates))


# ------------------------------------------------------------- partitioning


def pool(parties: Sequence[PartyData]) -> Dataset:
    """Stack party datasets in the given order (the centralized view)."""
    if not parties:
        raise DataError("no parties to pool")
    names = parties[0].data.covariate_names
    for p in parties[1:]:
        if p.data.covariate_names != names:
            raise DataError("parties disagree on covariates")
    return Dataset(
        np.vstack([p.data.X for p in parties]),
        np.concatenate([p.data.Z for p in parties]),
        np.concatenate([p.data.Y for p in parties]),
        names,
    )


def party_slices(parties: Sequence[PartyData]) -> tuple[slice, ...]:
    out, start = [], 0
    for p in parties:
        out.append(slice(start, start + p.data.n))
        start += p.data.n
    return tuple(out)


def partition(dataset: Dataset, sizes: Sequence[int], seed: int) -> list[PartyData]:
    """Randomly split rows into disjoint parties of the given sizes."""
    sizes = [int(s) for s in sizes]
    if any(s < 1 for s in sizes):
        raise DataError(f"party sizes must be >= 1, got {sizes}")
    if sum(sizes) != dataset.n:
        raise DataError(f"sizes sum to {sum(sizes)} but dataset has {dataset.n} rows")
    perm = _rng.make_rng(seed, _rng.PARTITION).permutation(dataset.n)
    bounds = np.cumsum([0, *sizes])
    return [
        PartyData(k + 1, dataset.take(perm[bounds[k]:bounds[k + 1]]))
        for k in range(len(sizes))
    ]


def stratified_partition(dataset: Dataset, n_parties: int, seed: int) -> list[PartyData]:
    """Split into ``n_parties`` of near-equal size, each keeping the global
    treated share up to rounding."""
    rng = _rng.make_rng(seed, _rng.PARTITION)
    treated = rng.permutation(np.flatnonzero(dataset.Z == 1))
    control = rng.permutation(np.flatnonzero(dataset.Z == 0))
    sizes = [len(a) for a in np.array_split(np.arange(dataset.n), n_parties)]
    n_t = [len(a) for a in np.array_split(treated, n_parties)]
    # larger treated chunks go to the parties with the most room
    order = np.argsort(-np.asarray(sizes), kind="stable")
    t_counts = np.empty(n_parties, dtype=int)
    t_counts[order] = sorted(n_t, reverse=True)
    c_counts = np.asarray(sizes) - t_counts
    table = [(int(s), int(t), int(c)) for s, t, c in zip(sizes, t_counts, c_counts)]
    return _split_by_counts(dataset, treated, control, table)


def _split_by_counts(dataset, treated, control, table) -> list[PartyData]:
    parties, ti, ci = [], 0, 0
    for k, (_, n_t, n_c) in enumerate(table):
        rows = np.concatenate([treated[ti:ti + n_t], control[ci:ci + n_c]])
        ti, ci = ti + n_t, ci + n_c
        parties.append(PartyData(k + 1, dataset.take(np.sort(rows))))
    return parties


# per-party (all, treated, controlled) counts
SIM3_SIZES: dict[str, dict[str, list[tuple[int, int, int]]]] = {
    "financial": {
        "A": [(3304, 1227, 2077)] * 3,
        "B": [(3304, 2549, 755), (3304, 849, 2455), (3304, 283, 3021)],
        "C": [(6864, 2549, 4315), (2287, 849, 1438), (762, 283, 479)],
    },
    "jobs": {
        "A": [(891, 61, 830)] * 3,
        "B": [(891, 92, 799), (891, 61, 830), (891, 30, 861)],
        "C": [(1337, 92, 1245), (891, 61, 830), (445, 30, 415)],
    },
}


def gen_sim3_partition(
    dataset: Dataset,
    setting: str,
    sizes_table: Mapping[str, Sequence[tuple[int, int, int]]],
    seed: int,
) -> list[PartyData]:
    """Draw parties with exact treated/controlled counts per party."""
    if setting not in sizes_table:
        raise DataError(f"unknown setting {setting!r}; expected one of {sorted(sizes_table)}")
    table = [tuple(int(v) for v in row) for row in sizes_table[setting]]
    for k, (n_all, n_t, n_c) in enumerate(table):
        if n_t + n_c != n_all:
            raise DataError(f"party {k + 1}: treated + controlled != all ({n_t}+{n_c}!={n_all})")
        if n_t < 1 or n_c < 1:
            raise DataError(f"party {k + 1} needs both treated and controlled rows")
    need_t = sum(r[1] for r in table)
    need_c = sum(r[2] for r in table)
    have_t = dataset.n_treated
    have_c = dataset.n - have_t
    if need_t > have_t or need_c > have_c:
        raise DataError(
            f"requested counts exceed availability: treated {need_t}/{have_t}, "
            f"controlled {need_c}/{have_c}"
        )
    rng = _rng.make_rng(seed, _rng.SIM3)
    treated = rng.permutation(np.flatnonzero(dataset.Z == 1))
    control = rng.permutation(np.flatnonzero(dataset.Z == 0))
    return _split_by_counts(dataset, treated, control, table)


# ------------------------------------------------------------ Simulation I

SIM1_M = 10
SIM1_BETA = np.array([1.0, 1.0, 1.0] + [0.0] * (SIM1_M - 2))
NOISE_SD = math.sqrt(0.1)  # N(0, 0.1) read as variance 0.1


def sim1_theta(X: np.ndarray) -> np.ndarray:
    return 1.0 + X[:, 0] + X[:, 1]


def sim1_u(X: np.ndarray) -> np.ndarray:
    return np.abs(X[:, 0]) + np.abs(X[:, 1])


def sim1_propensity(X: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-X[:, 0] - X[:, 1]))


def sim1_outcome_mean(X: np.ndarray) -> np.ndarray:
    """E[y | x] = theta(x) h(x) + u(x)."""
    return sim1_theta(X) * sim1_propensity(X) + sim1_u(X)


def _sim1_covariates(rng: np.random.Generator, n: int, party: int) -> np.ndarray:
    broad = rng.uniform(-3.0, 3.0, n)
    narrow = rng.uniform(-0.5, 0.5, n)
    rest = rng.standard_normal((n, SIM1_M - 2))
    first, second = (broad, narrow) if party == 1 else (narrow, broad)
    return np.column_stack([first, second, rest])


def sample_sim1(rng: np.random.Generator, n: int, party: int | None = None):
    """Draw ``(X, Z, Y, eps)`` from the Simulation I design.

    With ``party=None`` each row comes from party 1 or 2 with equal
    probability (the pooled population).
    """
    if party is None:
        which = rng.integers(1, 3, n)
        X = np.where((which == 1)[:, None], _sim1_covariates(rng, n, 1), _sim1_covariates(rng, n, 2))
    else:
        X = _sim1_covariates(rng, n, party)
    h = sim1_propensity(X)
    Z = (rng.random(n) < h).astype(float)
    eps = rng.normal(0.0, NOISE_SD, n)
    Y = sim1_theta(X) * Z + sim1_u(X) + eps
    return X, Z, Y, eps


def gen_sim1(seed: int, n_per_party: int = 300) -> tuple[list[PartyData], OracleTruth]:
    """Two parties, 10 covariates, CATE ``1 + x1 + x2``.

    Party 1 draws x1 ~ U(-3, 3) and x2 ~ U(-0.5, 0.5); party 2 the reverse.
    """
    if n_per_party < 20:
        raise DataError(f"n_per_party must be >= 20, got {n_per_party}")
    rng = _rng.make_rng(seed, _rng.SIM1)
    names = tuple(f"x{j + 1}" for j in range(SIM1_M))
    parties = []
    for k in (1, 2):
        X, Z, Y, _ = sample_sim1(rng, n_per_party, party=k)
        parties.append(PartyData(k, Dataset(X, Z, Y, names)))
    X_all = np.vstack([p.data.X for p in parties])
    cate = sim1_theta(X_all)
    truth = OracleTruth(_frozen(cate), _frozen(SIM1_BETA), float(cate.mean()), party_slices(parties))
    return parties, truth


# ----------------------------------------------------------- Simulation II


def semi_synthetic_weights(m: int) -> np.ndarray:
    """Sign pattern 1, 0, -1 repeated over the covariates."""
    return np.resize(np.array([1.0, 0.0, -1.0]), m)


def gen_semi_synthetic_outcomes(X, Z, seed: int) -> tuple[np.ndarray, OracleTruth]:
    """Synthesize outcomes on real covariates and treatments.

    theta(x) = const + x'beta with beta_j = w_j / sd_j, const = -mean(x)'beta,
    u(x) = sum_j |x_j - mean_j| / sd_j and Gaussian noise of variance 0.1.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    Z = np.asarray(Z, dtype=float).ravel()
    n, m = X.shape
    if m < 1:
        raise DataError("need at least one covariate")
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    if n > 1 and np.any(sd == 0):
        bad = np.flatnonzero(sd == 0).tolist()
        raise DataError(f"zero-variance covariate column(s) {bad}")
    if n == 1:
        sd = np.ones(m)
    beta = semi_synthetic_weights(m) / sd
    const = -float(mean @ beta)
    theta = const + X @ beta
    u = np.abs((X - mean) / sd).sum(axis=1)
    eps = _rng.make_rng(seed, _rng.SEMI_SYNTH).normal(0.0, NOISE_SD, n)
    Y = theta * Z + u + eps
    truth = OracleTruth(_frozen(theta), _frozen(np.concatenate([[const], beta])), float(theta.mean()))
    return Y, truth


# ------------------------------------------------ real data and fallbacks

IHDP_NAMES = (
    "bw", "b.head", "preterm", "birth.o", "nnhealth", "momage",
    "sex", "twin", "b.marr", "mom.lths", "mom.hs", "mom.scoll", "cig", "first",
    "booze", "drugs", "work.dur", "prenatal", "ark", "ein", "har", "mia", "pen",
    "tex", "was",
)
FINANCIAL_NAMES = ("age", "inc", "educ", "fsize", "marr", "twoearn", "db", "pira", "hown")
JOBS_NAMES = ("age", "black", "hispanic", "married", "nodegree", "re74")

DATASET_FILES = {
    "ihdp": ("ihdp.csv", {"treatment": "treatment", "outcome": "y_factual",
                          "covariates": [f"x{j}" for j in range(1, 26)]}),
    "financial": ("financial.csv", {"treatment": "e401", "outcome": "net_tfa",
                                    "covariates": list(FINANCIAL_NAMES)}),
    "jobs": ("jobs.csv", {"treatment": "treat", "outcome": "re78",
                          "covariates": list(JOBS_NAMES)}),
}


def _choose_exactly(rng, propensity: np.ndarray, k: int) -> np.ndarray:
    """Treatment vector with exactly ``k`` ones, drawn proportionally to
    ``propensity`` without replacement (Gumbel top-k)."""
    keys = np.log(propensity) + rng.gumbel(size=propensity.shape[0])
    Z = np.zeros(propensity.shape[0])
    Z[np.argsort(-keys)[:k]] = 1.0
    return Z


def _binary(rng, n, p):
    while True:
        col = (rng.random(n) < p).astype(float)
        if 0 < col.sum() < n:
            return col


def synthetic_ihdp(seed: int = 0) -> Dataset:
    """IHDP-shaped stand-in: 747 rows, 6 continuous + 19 binary covariates,
    139 treated. Outcome is a placeholder zero vector."""
    rng = _rng.make_rng(seed, _rng.FALLBACK, 1)
    n = 747
    cont = rng.standard_normal((n, 6))
    prevalences = [0.51, 0.09, 0.52, 0.38, 0.35, 0.21, 0.48, 0.35, 0.45, 0.14,
                   0.17, 0.58, 0.96, 0.08, 0.11, 0.15, 0.14, 0.16, 0.15]
    binary = np.column_stack([_binary(rng, n, p) for p in prevalences])
    X = np.column_stack([cont, binary])
    score = -1.2 + 0.6 * X[:, 0] - 0.4 * X[:, 5] + 0.8 * X[:, 8] - 0.7 * X[:, 9]
    Z = _choose_exactly(rng, 1.0 / (1.0 + np.exp(-score)), 139)
    return Dataset(X, Z, np.zeros(n), IHDP_NAMES)


def synthetic_financial(seed: int = 0) -> Dataset:
    """SIPP-shaped stand-in: 9915 rows, 9 covariates, 3682 treated, and a
    linear-CATE outcome in dollars."""
    rng = _rng.make_rng(seed, _rng.FALLBACK, 2)
    n = 9915
    age = rng.integers(25, 65, n).astype(float)
    inc = np.round(np.exp(rng.normal(10.4, 0.6, n)))
    educ = np.clip(np.round(rng.normal(13.2, 2.8, n)), 1, 18)
    fsize = 1.0 + rng.poisson(1.9, n)
    marr = _binary(rng, n, 0.60)
    twoearn = marr * _binary(rng, n, 0.63)
    db = _binary(rng, n, 0.27)
    pira = _binary(rng, n, 0.24)
    hown = _binary(rng, n, 0.63)
    X = np.column_stack([age, inc, educ, fsize, marr, twoearn, db, pira, hown])
    score = -3.0 + 4e-5 * inc + 0.02 * (age - 40) + 0.3 * db + 0.2 * hown
    Z = _choose_exactly(rng, 1.0 / (1.0 + np.exp(-score)), 3682)
    beta = np.array([172.0, -0.13, 643.0, -1003.0, 1103.0, 5607.0, 5658.0, -1032.0, 5324.0])
    theta = -9705.0 + X @ beta
    u = -25000.0 + 0.45 * inc + 250.0 * age + 9000.0 * pira + 4000.0 * hown
    Y = theta * Z + u + rng.normal(0.0, 30000.0, n)
    return Dataset(X, Z, Y, FINANCIAL_NAMES)


def synthetic_jobs(seed: int = 0) -> Dataset:
    """Jobs-shaped stand-in: 2675 rows, 6 covariates, 185 treated."""
    rng = _rng.make_rng(seed, _rng.FALLBACK, 3)
    n = 2675
    age = rng.integers(17, 56, n).astype(float)
    black = _binary(rng, n, 0.29)
    hispanic = (1 - black) * _binary(rng, n, 0.05)
    married = _binary(rng, n, 0.82)
    nodegree = _binary(rng, n, 0.33)
    re74 = np.where(rng.random(n) < 0.15, 0.0, np.exp(rng.normal(9.6, 0.8, n)))
    X = np.column_stack([age, black, hispanic, married, nodegree, re74])
    score = -1.0 - 0.05 * (age - 30) + 2.0 * black - 1.5 * married + 1.0 * nodegree - 1e-4 * re74
    Z = _choose_exactly(rng, 1.0 / (1.0 + np.exp(-score)), 185)
    beta = np.array([226.0, 2494.0, 1519.0, -2216.0, -859.0, -0.335])
    theta = -7534.0 + X @ beta
    u = 2000.0 + 0.8 * re74 + 100.0 * age - 1500.0 * nodegree
    Y = theta * Z + u + rng.normal(0.0, 8000.0, n)
    return Dataset(X, Z, Y, JOBS_NAMES)


_FALLBACKS = {"ihdp": synthetic_ihdp, "financial": synthetic_financial, "jobs": synthetic_jobs}


def resolve_dataset(
    name: str, data_dir=None, allow_fallback: bool = True, seed: int = 0
) -> tuple[Dataset, str]:
    """Load a named dataset from ``data_dir`` (or ``$DCDML_DATA_DIR``).

    Returns the dataset and its source: the file path, or ``"synthetic"``
    when the file is absent and the structural fallback was generated.
    """
    if name not in DATASET_FILES:
        raise DataError(f"unknown dataset {name!r}; expected one of {sorted(DATASET_FILES)}")
    fname, schema = DATASET_FILES[name]
    data_dir = data_dir or os.environ.get("DCDML_DATA_DIR")
    if data_dir:
        path = Path(data_dir) / fname
        if path.is_file():
            return load_csv(path, schema), str(path)
    if not allow_fallback:
        raise FileNotFoundError(f"dataset {name!r} not found (looked for {fname} in {data_dir!r})")
    return _FALLBACKS[name](seed), "synthetic"
