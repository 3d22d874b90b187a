"""Command-line entry point: file-based protocol steps and experiments.

Typical session::

    dcdml init --data a.csv b.csv --schema schema.json --seed 1 --out manifest.json
    dcdml prepare --data a.csv --schema schema.json --manifest manifest.json \\
        --party-id 1 --out share1.json --state private1.json
    dcdml aggregate share1.json share2.json --manifest manifest.json --out-dir returns
    dcdml finalize --return returns/return_1.json --state private1.json --out model1.json
"""

from __future__ import annotations

import argparse
import json
import sys
import uuid
from pathlib import Path

import numpy as np

from . import _rng, protocol
from .data import Dataset, PartyData, load_csv
from .dimred import DimReducer, ReducerConfig
from .dml import test_coefficients
from .experiment import DEFAULT_METHODS, METHODS, EvalReport, Scenario, run_experiment
from .ni import NiReturnPackage, make_ni_intermediate, make_ni_return, ni_user_finalize
from .nuisance import parse_learner

PRIVATE_MARKER = "private - do not share"


class CliError(Exception):
    pass


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CliError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path} is not valid JSON: {exc}") from None


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj), encoding="utf-8")


def _schema(args) -> dict:
    if args.schema:
        return _read_json(args.schema)
    if not (args.treatment and args.outcome):
        raise CliError("give --schema or both --treatment and --outcome")
    schema = {"treatment": args.treatment, "outcome": args.outcome}
    if args.covariates:
        schema["covariates"] = args.covariates.split(",")
    return schema


def _load(path, args) -> Dataset:
    return load_csv(path, _schema(args))


def _manifest_anchor(manifest: dict) -> protocol.AnchorDataset:
    return protocol.gen_anchor(manifest["anchor"]["ranges"], manifest["r"], manifest["anchor"]["seed"])


def _seed(args, manifest: dict) -> int:
    return manifest["seed"] if args.seed is None else args.seed


# ---------------------------------------------------------------- commands


def cmd_init(args) -> int:
    datasets = [_load(p, args) for p in args.data]
    parties = [PartyData(k + 1, d) for k, d in enumerate(datasets)]
    m = datasets[0].m
    if any(d.m != m for d in datasets):
        raise CliError("data files disagree on the number of covariates")
    seed = 0 if args.seed is None else args.seed
    manifest = {
        "version": protocol.VERSION,
        "session_id": args.session_id or uuid.uuid5(uuid.NAMESPACE_OID, f"dcdml-{seed}-{m}").hex,
        "seed": seed,
        "m": m,
        "m_check": args.m_check or m,
        "r": args.anchor_r or sum(d.n for d in datasets),
        "anchor": {"ranges": [list(r) for r in protocol.anchor_ranges(parties)],
                   "seed": _rng.child_seed(seed, _rng.ANCHOR)},
        "parties": [p.party_id for p in parties],
        "schemas": {"share": protocol.VERSION, "return": protocol.VERSION},
    }
    _write_json(args.out, manifest)
    print(f"wrote manifest for {len(parties)} parties, m={m}, r={manifest['r']} to {args.out}")
    return 0


def cmd_prepare(args) -> int:
    manifest = _read_json(args.manifest)
    data = _load(args.data, args)
    if data.m != manifest["m"]:
        raise CliError(f"data has {data.m} covariates, manifest expects {manifest['m']}")
    if args.party_id not in manifest["parties"]:
        raise CliError(f"party {args.party_id} is not listed in the manifest")
    party = PartyData(args.party_id, data)
    seed = _seed(args, manifest)
    config = ReducerConfig(args.reducer, args.dim, args.bs_dim, args.p,
                           parse_learner(args.q) if args.q else None,
                           parse_learner(args.h) if args.h else None)
    reducer = protocol.party_reducer(party, config, seed)
    anchor = _manifest_anchor(manifest)
    if args.ni:
        share = make_ni_intermediate(party, reducer, anchor, seed)
    else:
        share = protocol.make_intermediate(party, reducer, anchor)
    msg = share.to_message()
    protocol.validate_message(msg, protocol.SHARE_SCHEMA)
    _write_json(args.out, msg)
    state = {"marker": PRIVATE_MARKER, "party_id": party.party_id, "ni": bool(args.ni),
             "reducer": reducer.to_dict(), "names": ["const", *data.covariate_names]}
    _write_json(args.state, state)
    print(f"wrote share ({share.B.shape[0]} x {share.B.shape[1]}) to {args.out}; "
          f"private reducer state ({PRIVATE_MARKER}) to {args.state}")
    return 0


def cmd_aggregate(args) -> int:
    manifest = _read_json(args.manifest)
    try:
        shares = [protocol.IntermediateShare.from_message(_read_json(p)) for p in args.shares]
    except protocol.MessageError as exc:
        raise CliError(str(exc)) from None
    shares.sort(key=lambda s: s.party_id)
    for s in shares:
        if s.r != manifest["r"]:
            raise CliError(f"share of party {s.party_id} has r={s.r}, manifest says {manifest['r']}")
    seed = _seed(args, manifest)
    session = protocol.aggregate(shares, args.m_check or manifest["m_check"])
    fit = protocol.analyst_fit(session, q_spec=parse_learner(args.q), h_spec=parse_learner(args.h),
                               seed=protocol.analyst_seed(seed))
    out = Path(args.out_dir)
    for s in shares:
        if args.ni:
            msg = make_ni_return(fit, session, s.party_id).to_message()
            protocol.validate_message(msg, protocol.NI_RETURN_SCHEMA)
        else:
            msg = protocol.make_return(fit, session, s.party_id).to_message()
            protocol.validate_message(msg, protocol.RETURN_SCHEMA)
        _write_json(out / f"return_{s.party_id}.json", msg)
    _write_json(out / "analyst_fit.json", {
        "gamma_check": fit.gamma_check.tolist(),
        "cov_gamma_check": fit.cov_gamma_check.tolist(),
        "m_check": session.m_check,
        "svd_residual": session.svd_residual,
        "alignment_error": session.alignment_error,
        "q": fit.q_spec.label(),
        "h": fit.h_spec.label(),
        "seed": fit.seed,
        "parties": list(session.party_ids),
    })
    print(f"wrote {len(shares)} return packages and analyst_fit.json to {out}")
    return 0


def format_model(model, alpha: float = 0.05) -> str:
    tests = test_coefficients(model, alpha)
    names = model.names or tuple(f"b{j}" for j in range(len(tests)))
    width = max(len(n) for n in names)
    lines = [f"{'':{width}}  {'estimate':>12} {'std.err':>12} {'p':>8}"]
    for name, t in zip(names, tests):
        lines.append(f"{name:{width}}  {t.estimate:12.4f} {t.std_error:12.4f} {t.p_value:8.4f} {t.stars}")
    lines.append("** p < 0.01, * p < 0.05")
    return "\n".join(lines)


def cmd_finalize(args) -> int:
    state = _read_json(args.state)
    reducer = DimReducer.from_dict(state["reducer"])
    names = tuple(state.get("names", ()))
    msg = _read_json(args.return_path)
    try:
        if args.ni or state.get("ni"):
            if not args.manifest:
                raise CliError("--manifest is required to finalize a non-identifiable session")
            pkg = NiReturnPackage.from_message(msg)
            model = ni_user_finalize(_manifest_anchor(_read_json(args.manifest)), pkg, reducer.mu, names)
        else:
            pkg = protocol.ReturnPackage.from_message(msg)
            model = protocol.user_finalize(reducer, pkg, names)
    except protocol.MessageError as exc:
        raise CliError(str(exc)) from None
    if pkg.party_id != state["party_id"]:
        raise CliError(f"return package is for party {pkg.party_id}, state is party {state['party_id']}")
    _write_json(args.out, model.to_dict())
    print(format_model(model))
    return 0


def _write_report(report: EvalReport, out: str) -> list[Path]:
    base = Path(out)
    if base.suffix:
        base = base.with_suffix("")
    base.parent.mkdir(parents=True, exist_ok=True)
    paths = [base.with_suffix(".json"), base.with_suffix(".csv"), base.with_suffix(".md")]
    paths[0].write_text(report.to_json(), encoding="utf-8")
    paths[1].write_text(report.to_csv(), encoding="utf-8")
    paths[2].write_text(report.to_markdown(), encoding="utf-8")
    return paths


def cmd_simulate(args) -> int:
    scenario = Scenario.parse(args.scenario)
    methods = args.methods.split(",") if args.methods else list(DEFAULT_METHODS)
    report = run_experiment(
        scenario, methods, args.trials, 0 if args.seed is None else args.seed,
        parse_learner(args.q) if args.q else None, parse_learner(args.h) if args.h else None,
        args.bs_dim, args.data_dir, not args.no_fallback,
    )
    paths = _write_report(report, args.out)
    print(report.to_markdown())
    print("wrote " + ", ".join(str(p) for p in paths))
    return 0


def cmd_report(args) -> int:
    report = EvalReport.from_dict(_read_json(args.report))
    print(report.to_markdown())
    return 0


# ------------------------------------------------------------------ parser


def _data_flags(p) -> None:
    p.add_argument("--schema", help="JSON file with treatment, outcome and optional covariates")
    p.add_argument("--treatment", help="treatment column (alternative to --schema)")
    p.add_argument("--outcome", help="outcome column (alternative to --schema)")
    p.add_argument("--covariates", help="comma-separated covariate columns (default: all others)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcdml", description="Collaborative double machine learning.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="write a session manifest (anchor ranges, r, m_check)")
    p.add_argument("--data", nargs="+", required=True)
    _data_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--m-check", type=int)
    p.add_argument("--anchor-r", type=int)
    p.add_argument("--session-id")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("prepare", help="user: build the share for the analyst")
    p.add_argument("--data", required=True)
    _data_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--party-id", type=int, required=True)
    p.add_argument("--reducer", choices=("pca", "bootstrap", "pca+b"), default="pca+b")
    p.add_argument("--dim", type=int, help="reduced dimension (default m - 1)")
    p.add_argument("--bs-dim", type=int, help="bootstrap columns in pca+b (default ceil(0.1 m))")
    p.add_argument("--p", type=float, default=0.5, help="subsample fraction for the bootstrap reducer")
    p.add_argument("--q", help="outcome learner for the bootstrap reducer (default ols)")
    p.add_argument("--h", help="propensity learner for the bootstrap reducer (default logistic)")
    p.add_argument("--seed", type=int, help="override the manifest seed")
    p.add_argument("--ni", action="store_true", help="mix columns and shuffle rows")
    p.add_argument("--out", required=True)
    p.add_argument("--state", required=True, help="where to keep the private reducer")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("aggregate", help="analyst: fit on all shares and write return packages")
    p.add_argument("shares", nargs="+")
    p.add_argument("--manifest", required=True)
    p.add_argument("--q", default="rf", help="ols | ridge[:lam] | rf[:trees]")
    p.add_argument("--h", default="rf", help="logistic[:lam] | rf[:trees] | ols")
    p.add_argument("--m-check", type=int)
    p.add_argument("--seed", type=int, help="override the manifest seed")
    p.add_argument("--ni", action="store_true", help="return anchor-level packages")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("finalize", help="user: recover the CATE model from a return package")
    p.add_argument("--return", dest="return_path", required=True)
    p.add_argument("--state", required=True)
    p.add_argument("--manifest", help="needed with --ni")
    p.add_argument("--ni", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finalize)

    p = sub.add_parser("simulate", help="run a Monte-Carlo comparison")
    p.add_argument("scenario", help="sim1 | sim2 | sim3:<financial|jobs>:<A|B|C>")
    p.add_argument("--methods", help="comma-separated subset of " + ",".join(METHODS))
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int)
    p.add_argument("--q")
    p.add_argument("--h")
    p.add_argument("--bs-dim", type=int)
    p.add_argument("--data-dir", help="directory with dataset CSVs (default $DCDML_DATA_DIR)")
    p.add_argument("--no-fallback", action="store_true", help="fail instead of using synthetic stand-ins")
    p.add_argument("--out", default="report")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="print the summary of a saved report")
    p.add_argument("report")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "simulate":
        try:
            Scenario.parse(args.scenario)
        except ValueError as exc:
            parser.error(str(exc))
    try:
        return args.func(args)
    except (CliError, ValueError, FileNotFoundError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
