"""Evaluation measures against a benchmark, and a between-method t-flag."""

from __future__ import annotations

import warnings
from typing import Sequence

import numpy as np
from scipy import stats

from .dml import TestResult

_SIGN_ALIASES = {
    "positive": "positive", "+": "positive", 1: "positive",
    "negative": "negative", "-": "negative", -1: "negative",
    "not_significant": "not_significant", "0": "not_significant", 0: "not_significant",
}


def sign_label(value) -> str:
    if isinstance(value, TestResult):
        return value.sign_class
    if isinstance(value, (float, np.floating, np.integer)):
        value = int(np.sign(value))
    try:
        return _SIGN_ALIASES[value]
    except (KeyError, TypeError):
        raise ValueError(f"unrecognized sign {value!r}") from None


def rmse_cate(estimated, benchmark) -> float:
    est = np.asarray(estimated, dtype=float)
    bm = np.asarray(benchmark, dtype=float)
    if est.shape != bm.shape or est.size == 0:
        raise ValueError("estimates and benchmark must be non-empty and equally shaped")
    return float(np.sqrt(np.mean((est - bm) ** 2)))


def rmse_coef(beta_est, beta_bm) -> float:
    """Root mean squared coefficient error over all ``m + 1`` entries."""
    return rmse_cate(beta_est, beta_bm)


def _agreement(tests: Sequence, benchmark_signs: Sequence) -> float:
    if len(tests) != len(benchmark_signs) or not len(tests):
        raise ValueError("tests and benchmark signs must be non-empty and equally long")
    hits = sum(sign_label(t) == sign_label(b) for t, b in zip(tests, benchmark_signs))
    return hits / len(tests)


def sig_consistency_cate(tests: Sequence, benchmark_signs: Sequence) -> float:
    """Share of subjects whose test outcome (+, -, not significant) matches the benchmark."""
    return _agreement(tests, benchmark_signs)


def sig_consistency_coef(tests: Sequence, benchmark_signs: Sequence) -> float:
    return _agreement(tests, benchmark_signs)


def ate(cates) -> float:
    cates = np.asarray(cates, dtype=float)
    if cates.size == 0:
        raise ValueError("no CATEs to average")
    return float(cates.mean())


def welch_flag(values, reference, higher_is_better: bool = False, alpha: float = 0.05) -> str:
    """``+`` if ``values`` are significantly better than ``reference``
    (unpaired Welch t-test), ``-`` if significantly worse, else ``0``."""
    a = np.asarray(values, dtype=float)
    b = np.asarray(reference, dtype=float)
    if a.size < 2 or b.size < 2:
        return "0"
    if np.ptp(a) == 0.0 and np.ptp(b) == 0.0:
        if a[0] == b[0]:
            return "0"
        better = a[0] > b[0] if higher_is_better else a[0] < b[0]
        return "+" if better else "-"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # near-identical samples
        res = stats.ttest_ind(a, b, equal_var=False)
    if not np.isfinite(res.pvalue) or res.pvalue >= alpha:
        return "0"
    better = res.statistic > 0 if higher_is_better else res.statistic < 0
    return "+" if better else "-"
