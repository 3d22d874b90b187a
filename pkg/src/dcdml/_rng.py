"""Seed handling shared by every stochastic routine.

All randomness flows through :func:`make_rng`, which builds a PCG64
generator from a base seed plus a tuple of integer stream keys. Two calls
with the same arguments always produce the same stream, on any platform.
"""

from __future__ import annotations

import numpy as np

# stream keys; values are arbitrary but must never change
PARTITION = 11
SIM1 = 12
SEMI_SYNTH = 13
SIM3 = 14
FALLBACK = 15
FOLDS = 21
LEARNER = 22
SELECT = 23
BOOTSTRAP = 31
ANCHOR = 41
ANALYST = 42
REDUCER = 43
NI_MIX = 51
NI_PERM = 52
ORTHO = 61
TRIAL = 71


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    seed = int(seed)
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.default_rng([seed, *(int(k) for k in keys)])


def child_seed(seed: int, *keys: int) -> int:
    """Draw a derived integer seed, for handing to APIs that take an int."""
    return int(make_rng(seed, *keys).integers(0, 2**31 - 1))
