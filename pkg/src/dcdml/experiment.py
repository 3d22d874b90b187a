"""Monte-Carlo comparison of the collaborative estimator with its references."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _rng
from .baselines import fit_ca_dml, fit_ia_dml, fit_sr
from .data import PartyData, gen_sim1, gen_semi_synthetic_outcomes, gen_sim3_partition, resolve_dataset, stratified_partition, SIM3_SIZES
from .dimred import ReducerConfig
from .dml import augment, significance_test, test_cates, test_coefficients
from .metrics import ate, rmse_cate, rmse_coef, sig_consistency_cate, sig_consistency_coef, welch_flag
from .nuisance import LearnerSpec
from .protocol import DcConfig, run_dc_dml

METHODS = ("CA-DML", "IA-DML", "DC-DML(PCA)", "DC-DML(B)", "DC-DML(PCA+B)", "NI-DC-DML(PCA+B)", "SR")
DEFAULT_METHODS = ("CA-DML", "IA-DML", "DC-DML(PCA+B)")
METRICS = ("rmse_cate", "sig_consistency_cate", "rmse_coef", "sig_consistency_coef", "ate")
_HIGHER_IS_BETTER = {"sig_consistency_cate": True, "sig_consistency_coef": True}
_DC_REDUCERS = {"DC-DML(PCA)": "pca", "DC-DML(B)": "bootstrap", "DC-DML(PCA+B)": "pca+b",
                "NI-DC-DML(PCA+B)": "pca+b"}


@dataclass(frozen=True)
class Scenario:
    """``sim1``, ``sim2`` or ``sim3`` with a dataset and party setting."""

    name: str
    dataset: str | None = None
    setting: str | None = None

    @classmethod
    def parse(cls, text: str) -> "Scenario":
        parts = text.lower().split(":")
        name = parts[0]
        if name == "sim1" and len(parts) == 1:
            return cls("sim1")
        if name == "sim2" and len(parts) == 1:
            return cls("sim2", "ihdp")
        if name == "sim3" and len(parts) == 3 and parts[1] in SIM3_SIZES:
            return cls("sim3", parts[1], parts[2].upper())
        raise ValueError(f"unknown scenario {text!r}; use sim1, sim2 or sim3:<financial|jobs>:<A|B|C>")

    @property
    def label(self) -> str:
        return ":".join(p for p in (self.name, self.dataset, self.setting) if p)

    def default_learners(self) -> tuple[LearnerSpec, LearnerSpec]:
        if self.name in ("sim1", "sim2"):
            return LearnerSpec.random_forest(), LearnerSpec.random_forest()
        if self.dataset == "financial":
            return LearnerSpec.ols(), LearnerSpec.logistic()
        return LearnerSpec.ols(), LearnerSpec.random_forest()

    def default_bs_dim(self, m: int) -> int:
        return 3 if self.name == "sim1" else max(1, math.ceil(0.1 * m))


@dataclass(frozen=True)
class Trial:
    parties: list[PartyData]
    true_beta: np.ndarray | None  # None when the benchmark is estimated


def make_trial(scenario: Scenario, seed: int, data_dir=None, allow_fallback: bool = True) -> Trial:
    if scenario.name == "sim1":
        parties, truth = gen_sim1(seed)
        return Trial(parties, truth.true_beta)
    data, _ = resolve_dataset(scenario.dataset, data_dir, allow_fallback)
    if scenario.name == "sim2":
        Y, truth = gen_semi_synthetic_outcomes(data.X, data.Z, seed)
        return Trial(stratified_partition(data.with_outcome(Y), 3, seed), truth.true_beta)
    return Trial(gen_sim3_partition(data, scenario.setting, SIM3_SIZES[scenario.dataset], seed), None)


@dataclass(frozen=True)
class Benchmark:
    beta: np.ndarray
    cov: np.ndarray | None  # None: exact truth, signs taken from the values

    def cate(self, X) -> np.ndarray:
        return augment(X) @ self.beta

    def coef_signs(self, alpha=0.05) -> list[str]:
        if self.cov is None:
            return [_sign(b) for b in self.beta]
        se = np.sqrt(np.diag(self.cov))
        return [significance_test(b, s, alpha).sign_class for b, s in zip(self.beta, se)]

    def cate_signs(self, X, alpha=0.05) -> list[str]:
        tau = self.cate(X)
        if self.cov is None:
            return [_sign(t) for t in tau]
        w = augment(X)
        se = np.sqrt(np.einsum("ij,jk,ik->i", w, self.cov, w))
        return [significance_test(t, s, alpha).sign_class for t, s in zip(tau, se)]


def _sign(v: float) -> str:
    return "positive" if v > 0 else "negative" if v < 0 else "not_significant"


def _fit_methods(parties, methods, q_spec, h_spec, seed, bs_dim) -> dict[str, list]:
    """Per method, one fitted model per party (in party order)."""
    out: dict[str, list] = {}
    for method in methods:
        if method == "CA-DML":
            fit = fit_ca_dml(parties, q_spec, h_spec, seed=_rng.child_seed(seed, 1))
            out[method] = [fit] * len(parties)
        elif method == "IA-DML":
            out[method] = [fit_ia_dml(p, q_spec, h_spec, seed=_rng.child_seed(seed, 2, p.party_id))
                           for p in parties]
        elif method == "SR":
            out[method] = [fit_sr(parties)] * len(parties)
        elif method in _DC_REDUCERS:
            reducer = ReducerConfig(_DC_REDUCERS[method], bs_dim=bs_dim, q_spec=q_spec, h_spec=h_spec)
            config = DcConfig(reducer, q_spec, h_spec, seed=_rng.child_seed(seed, 3),
                              ni=method.startswith("NI-"))
            out[method] = run_dc_dml(parties, config).models
        else:
            raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    return out


def evaluate(model, X, benchmark: Benchmark, alpha: float = 0.05) -> dict:
    tau, _ = model.cate(X)
    tau_bm = benchmark.cate(X)
    coef_tests = test_coefficients(model, alpha)
    return {
        "rmse_cate": rmse_cate(tau, tau_bm),
        "sig_consistency_cate": sig_consistency_cate(test_cates(model, X, alpha), benchmark.cate_signs(X, alpha)),
        "rmse_coef": rmse_coef(model.coef, benchmark.beta),
        "sig_consistency_coef": sig_consistency_coef(coef_tests, benchmark.coef_signs(alpha)),
        "ate": ate(tau),
        "ate_benchmark": ate(tau_bm),
        "beta": [float(b) for b in model.coef],
        "std_errors": [float(s) for s in model.std_errors],
        "signs": [t.sign_class for t in coef_tests],
    }


def summarize(values) -> dict:
    v = np.asarray(values, dtype=float)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if v.size > 1 else 0.0,
            "min": float(v.min()), "q1": float(q1), "median": float(med), "q3": float(q3),
            "max": float(v.max())}


@dataclass
class EvalReport:
    scenario: str
    methods: list[str]
    trials: int
    base_seed: int
    seeds: list[int]
    learners: dict
    records: list[dict] = field(default_factory=list)
    names: list[str] = field(default_factory=list)

    def parties(self) -> list[int]:
        return sorted({r["party"] for r in self.records})

    def values(self, method: str, party: int, metric: str) -> np.ndarray:
        return np.array([r[metric] for r in self.records if r["method"] == method and r["party"] == party])

    def ate_error(self, method: str, party: int) -> np.ndarray:
        rows = [r for r in self.records if r["method"] == method and r["party"] == party]
        return np.array([abs(r["ate"] - r["ate_benchmark"]) for r in rows])

    def summary(self) -> dict:
        out = {}
        for method in self.methods:
            for party in self.parties():
                key = f"{method}|party{party}"
                rows = [r for r in self.records if r["method"] == method and r["party"] == party]
                entry = {m: summarize([r[m] for r in rows]) for m in METRICS}
                betas = np.array([r["beta"] for r in rows])
                entry["beta_mean"] = betas.mean(axis=0).tolist()
                entry["n_positive"] = [sum(r["signs"][j] == "positive" for r in rows) for j in range(betas.shape[1])]
                entry["n_negative"] = [sum(r["signs"][j] == "negative" for r in rows) for j in range(betas.shape[1])]
                if method != "IA-DML" and "IA-DML" in self.methods:
                    entry["welch_vs_ia"] = self.welch_flags(method, party)
                out[key] = entry
        return out

    def welch_flags(self, method: str, party: int, alpha: float = 0.05) -> dict:
        flags = {m: welch_flag(self.values(method, party, m), self.values("IA-DML", party, m),
                               _HIGHER_IS_BETTER.get(m, False), alpha)
                 for m in METRICS if m != "ate"}
        flags["ate"] = welch_flag(self.ate_error(method, party), self.ate_error("IA-DML", party), False, alpha)
        return flags

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "methods": self.methods, "trials": self.trials,
                "base_seed": self.base_seed, "seeds": self.seeds, "learners": self.learners,
                "names": self.names, "welch_test": "unpaired Welch t-test, alpha 0.05",
                "records": self.records, "summary": self.summary()}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["scenario"], list(d["methods"]), d["trials"], d["base_seed"], list(d["seeds"]),
                   dict(d["learners"]), list(d["records"]), list(d["names"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["method", "party", "trial", "seed", *METRICS, "ate_benchmark"]
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols + [f"beta_{n}" for n in self.names])
        for r in self.records:
            writer.writerow([r[c] for c in cols] + r["beta"])
        return buf.getvalue()

    def to_markdown(self) -> str:
        summ = self.summary()
        lines = [f"## {self.scenario}: {self.trials} trial(s), base seed {self.base_seed}", "",
                 "| method | party | " + " | ".join(METRICS) + " |",
                 "|---|---|" + "---|" * len(METRICS)]
        for key, entry in summ.items():
            method, party = key.split("|")
            flags = entry.get("welch_vs_ia", {})
            cells = [f"{entry[m]['mean']:.4f} ({entry[m]['std']:.4f}){flags.get(m, '')}" for m in METRICS]
            lines.append(f"| {method} | {party[5:]} | " + " | ".join(cells) + " |")
        lines += ["", "Coefficient means (positive/negative significant counts):", "",
                  "| method | party | " + " | ".join(self.names) + " |",
                  "|---|---|" + "---|" * len(self.names)]
        for key, entry in summ.items():
            method, party = key.split("|")
            cells = [f"{b:.4f} ({p}/{n})" for b, p, n in
                     zip(entry["beta_mean"], entry["n_positive"], entry["n_negative"])]
            lines.append(f"| {method} | {party[5:]} | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def run_experiment(
    scenario: Scenario | str,
    methods: Sequence[str] = DEFAULT_METHODS,
    trials: int = 10,
    base_seed: int = 0,
    q_spec: LearnerSpec | None = None,
    h_spec: LearnerSpec | None = None,
    bs_dim: int | None = None,
    data_dir=None,
    allow_fallback: bool = True,
    alpha: float = 0.05,
) -> EvalReport:
    """Fit every method on ``trials`` replications (seed ``base_seed + t``).

    Simulated scenarios are scored against the true coefficients. For real
    data the benchmark is the CA-DML coefficient vector averaged over the
    trials, with signs from testing it with the averaged covariance.
    """
    if isinstance(scenario, str):
        scenario = Scenario.parse(scenario)
    if trials < 1:
        raise ValueError("trials must be >= 1")
    methods = list(methods)
    for method in methods:
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    dq, dh = scenario.default_learners()
    q_spec, h_spec = q_spec or dq, h_spec or dh
    seeds = [base_seed + t for t in range(trials)]
    fitted = []
    needs_ca = scenario.name == "sim3" and "CA-DML" not in methods
    for seed in seeds:
        trial = make_trial(scenario, seed, data_dir, allow_fallback)
        m = trial.parties[0].data.m
        bs = bs_dim if bs_dim is not None else scenario.default_bs_dim(m)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            models = _fit_methods(trial.parties, methods + (["CA-DML"] if needs_ca else []),
                                  q_spec, h_spec, seed, bs)
        fitted.append((seed, trial, models))

    estimated = None
    if scenario.name == "sim3":
        cas = [models["CA-DML"][0] for _, _, models in fitted]
        estimated = Benchmark(np.mean([f.beta_hat for f in cas], axis=0),
                              np.mean([f.cov_beta for f in cas], axis=0))

    report = EvalReport(scenario.label, methods, trials, base_seed, seeds,
                        {"q": q_spec.label(), "h": h_spec.label()})
    for t, (seed, trial, models) in enumerate(fitted):
        benchmark = estimated or Benchmark(np.asarray(trial.true_beta), None)
        report.names = ["const", *trial.parties[0].data.covariate_names]
        for method in methods:
            for party, model in zip(trial.parties, models[method]):
                row = {"method": method, "party": party.party_id, "trial": t, "seed": seed}
                row.update(evaluate(model, party.data.X, benchmark, alpha))
                report.records.append(row)
    return report
