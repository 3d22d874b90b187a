"""Protocol variant whose shares cannot be matched back to individual records.

Each user mixes its reduction with a random invertible matrix ``E`` and
shuffles its rows before sharing; neither ``E`` nor the permutation leaves
the call that builds the share. Since the user no longer knows the map
used for its own share, the analyst returns predictions on the (unshuffled)
anchor instead, and the user recovers its coefficients by least squares on
the anchor covariates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _rng
from .data import PartyData
from .dimred import DimReducer, apply
from .dml import augment
from .protocol import (
    NI_RETURN_SCHEMA,
    VERSION,
    AnalystFit,
    AnchorDataset,
    CollabSession,
    IntermediateShare,
    UserCateModel,
    _mat,
    model_from_gamma,
    validate_message,
)

MAX_MIX_COND = 1e6


class NiShare(IntermediateShare):
    """Share with mixed columns and shuffled rows; the anchor rows keep their order."""

    @property
    def Z_perm(self) -> np.ndarray:
        return self.Z

    @property
    def Y_perm(self) -> np.ndarray:
        return self.Y


def _mixing_matrix(rng: np.random.Generator, k: int) -> np.ndarray:
    while True:
        E = rng.standard_normal((k, k))
        if np.linalg.cond(E) < MAX_MIX_COND:
            return E


def make_ni_intermediate(
    party: PartyData,
    reducer: DimReducer,
    anchor: AnchorDataset,
    seed: int,
    mix: bool = True,
    permute: bool = True,
) -> NiShare:
    """Share ``[1, P (X - mu) F E]`` and ``[1, (X_anc - mu) F E]``.

    ``mix=False`` / ``permute=False`` use the identity for ``E`` / ``P``.
    """
    data = party.data
    if reducer.m != data.m or anchor.m != data.m:
        raise ValueError(
            f"dimension mismatch: data m={data.m}, reducer m={reducer.m}, anchor m={anchor.m}"
        )
    pid = party.party_id
    if mix:
        E = _mixing_matrix(_rng.make_rng(seed, _rng.NI_MIX, pid), reducer.m_tilde)
        mixed = DimReducer(reducer.F @ E, reducer.mu, reducer.method_tag)
    else:
        mixed = reducer
    order = (_rng.make_rng(seed, _rng.NI_PERM, pid).permutation(data.n)
             if permute else np.arange(data.n))
    B = augment(apply(mixed, data.X[order]))
    B_anc = augment(apply(mixed, anchor.X_anc))
    return NiShare(pid, B, B_anc, data.Z[order], data.Y[order])


@dataclass(frozen=True)
class NiReturnPackage:
    party_id: int
    R_point_anc: np.ndarray
    R_var_anc: np.ndarray

    def to_message(self) -> dict:
        return {"version": VERSION, "party_id": int(self.party_id),
                "R_point_anc": _mat(self.R_point_anc), "R_var_anc": _mat(self.R_var_anc)}

    @classmethod
    def from_message(cls, msg: dict) -> "NiReturnPackage":
        validate_message(msg, NI_RETURN_SCHEMA)
        return cls(msg["party_id"], np.array(msg["R_point_anc"], dtype=float),
                   np.array(msg["R_var_anc"], dtype=float))


def make_ni_return(fit: AnalystFit, session: CollabSession, party_id: int) -> NiReturnPackage:
    """Anchor-level predictions ``X_anc_check gamma`` and their covariance."""
    A = session.X_check_anc[session.index_of(party_id)]
    R_var = A @ fit.cov_gamma_check @ A.T
    return NiReturnPackage(party_id, A @ fit.gamma_check, 0.5 * (R_var + R_var.T))


def anchor_design(anchor: AnchorDataset, mu) -> np.ndarray:
    """``[1, X_anc - mu]``, the features the returned predictions are linear in."""
    return augment(anchor.X_anc - np.asarray(mu, dtype=float))


def recovery_map(anchor: AnchorDataset, mu) -> np.ndarray:
    """Left inverse ``(A'A)^-1 A'`` of the anchor design ``A``."""
    A = anchor_design(anchor, mu)
    if np.linalg.matrix_rank(A) < A.shape[1]:
        raise np.linalg.LinAlgError("anchor design is rank deficient; need r >= m + 1 generic rows")
    return np.linalg.lstsq(A, np.eye(A.shape[0]), rcond=None)[0]


def ni_user_finalize(anchor: AnchorDataset, pkg: NiReturnPackage, mu, names=()) -> UserCateModel:
    if pkg.R_point_anc.shape != (anchor.r,) or pkg.R_var_anc.shape != (anchor.r, anchor.r):
        raise ValueError(f"return package is not sized for an anchor of {anchor.r} rows")
    L = recovery_map(anchor, mu)
    return model_from_gamma(L @ pkg.R_point_anc, L @ pkg.R_var_anc @ L.T, mu, names)
