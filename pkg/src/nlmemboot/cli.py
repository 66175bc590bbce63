"""Command-line interface: ``nlmemboot {simulate,fit,bootstrap,study,report}``.

Exit codes: 0 success, 2 invalid input or configuration, 3 estimation
failure, 4 missing prerequisite artifact.  Output goes to ``--out``, else to
``$NLMEMBOOT_OUT``, else to ``./nlmemboot_out``.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bootstrap import BootstrapConfig, Scheme, run_bootstrap
from .errors import (
    EstimationError,
    InvalidConfigError,
    InvalidInputError,
    MissingPrerequisiteError,
    SamplerError,
)
from .model import PopulationParams, dataset_to_csv, read_dataset_csv, sig_emax_spec, simulate_dataset
from .report import (
    bootstrap_csv,
    bootstrap_summary_json,
    fit_to_json,
    load_conditional,
    save_conditional,
    theta_from_fit_json,
    write_study_figures,
)
from .saem import PopulationEstimate, SaemSettings, fit_saem, sample_conditional
from .study import (
    LONG_RUN_PROFILE,
    atomic_write_text,
    bias_csv,
    coverage_csv,
    load_scenario,
    read_table_csv,
    run_study,
    scenario_names,
)

EXIT_OK, EXIT_INPUT, EXIT_ESTIMATION, EXIT_MISSING = 0, 2, 3, 4
MODEL_GAMMA = {"emax": 1.0, "hill": 3.0}


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("NLMEMBOOT_OUT") or "nlmemboot_out"
    p = Path(out)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InvalidInputError(f"cannot create output directory {p}: {exc}") from None
    if not os.access(p, os.W_OK):
        raise InvalidInputError(f"output directory {p} is not writable")
    return p


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg, file=sys.stderr)


def _initial_theta(model: str) -> PopulationParams:
    return PopulationParams([5.0, 30.0, 500.0, MODEL_GAMMA[model]],
                            [[0.09, 0, 0], [0, 0.49, 0.245], [0, 0.245, 0.49]], [0.1])


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario or f"rich_{args.model}")
    out = _out_dir(args)
    ds = simulate_dataset(scenario.spec, scenario.theta_true, scenario.design, seed=args.seed)
    path = out / (args.name or "data.csv")
    atomic_write_text(path, dataset_to_csv(ds, digits=10))
    _say(args, f"wrote {path} ({ds.n_subjects} subjects, scenario {scenario.name})")
    return EXIT_OK


def _do_fit(args, out: Path) -> dict:
    if not args.data:
        raise InvalidInputError("--data is required to fit")
    try:
        ds = read_dataset_csv(args.data)
    except OSError as exc:
        raise InvalidInputError(f"cannot read {args.data}: {exc}") from None
    spec = sig_emax_spec()
    settings = SaemSettings(seed=args.seed)
    est = fit_saem(spec, ds, _initial_theta(args.model), settings, compute_se=True)
    atomic_write_text(out / "data.csv", dataset_to_csv(ds, digits=17))
    cond_name = None
    if not args.no_conditional:
        draws = sample_conditional(spec, ds, est.theta_hat, args.M, settings.mh, seed=args.seed)
        save_conditional(out / "conditional.npz", draws)
        cond_name = "conditional.npz"
    doc = json.loads(fit_to_json(est, {"model_choice": args.model, "data": "data.csv",
                                       "conditional": cond_name, "M": args.M if cond_name else None}))
    atomic_write_text(out / "fit.json", json.dumps(doc, indent=1, sort_keys=True) + "\n")
    _say(args, "fit: " + ", ".join(f"{n}={v:.4g}" for n, v in zip(doc["names"], est.vector)))
    return doc


def cmd_fit(args) -> int:
    _do_fit(args, _out_dir(args))
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    out = _out_dir(args)
    fit_path = out / "fit.json"
    if args.fit_first:
        _do_fit(args, out)
    if not fit_path.exists():
        raise MissingPrerequisiteError(f"no fit results in {out}; run `nlmemboot fit --data ...` "
                                       "first or pass --fit-first")
    doc = json.loads(fit_path.read_text(encoding="utf-8"))
    spec = sig_emax_spec()
    ds = read_dataset_csv(out / doc["data"])
    settings = SaemSettings.from_dict(doc["settings"])
    theta = theta_from_fit_json(spec, doc)
    est = PopulationEstimate(spec, theta, None, None, np.empty((0, spec.n_theta)), settings.seed, settings)
    schemes = [Scheme.parse(s) for s in args.scheme]
    conditional = None
    if any(s in (Scheme.NP, Scheme.CNP) for s in schemes):
        if not doc.get("conditional"):
            raise MissingPrerequisiteError(
                "the NP and cNP bootstraps need conditional draws; rerun `nlmemboot fit` "
                "without --no-conditional (optionally with --M)")
        conditional = load_conditional(out / doc["conditional"])
    for scheme in schemes:
        M = args.M if scheme is Scheme.CNP else 100
        if scheme is Scheme.CNP and conditional.n_draws < M:
            _say(args, f"note: only {conditional.n_draws} conditional draws stored; cNP uses all of them")
            M = conditional.n_draws
        cfg = BootstrapConfig(scheme, args.B, stratify_by=args.stratify, M=M, seed=args.seed)
        _say(args, f"bootstrap {scheme.value}: B={args.B}")
        run = run_bootstrap(spec, ds, est, conditional, cfg, settings, parallelism=args.parallelism)
        tag = scheme.value.lower()
        atomic_write_text(out / f"bootstrap_{tag}.csv", bootstrap_csv(run))
        atomic_write_text(out / f"bootstrap_{tag}_summary.json", bootstrap_summary_json(run))
        if run.unreliable:
            _say(args, f"warning: {run.n_failed} of {args.B} refits failed")
    return EXIT_OK


def cmd_study(args) -> int:
    out = _out_dir(args)
    names = args.scenario or ["rich_emax"]
    reports = []
    for name in names:
        sc = load_scenario(name)
        over = {}
        if args.long_run:
            over.update(LONG_RUN_PROFILE)
        for key in ("K", "B", "M"):
            if getattr(args, key) is not None:
                over[key] = getattr(args, key)
        if args.methods:
            over["methods"] = tuple(args.methods)
        if args.alpha:
            over["alphas"] = tuple(args.alpha)
        if over:
            sc = replace(sc, **over)
        _say(args, f"study {sc.name}: K={sc.K}, B={sc.B}, methods={','.join(sc.methods)}")

        def progress(rec, _name=sc.name):
            _say(args, f"  {_name} replicate {rec['k'] + 1}: {rec['status']}")

        rep = run_study(sc, args.seed, args.parallelism, out_dir=out / "replicates",
                        progress=None if args.quiet else progress)
        reports.append(rep)
        atomic_write_text(out / f"study_{sc.name}.json", json.dumps({
            "scenario": sc.to_dict(), "seed": args.seed, "K": rep.K, "n_failed": rep.n_failed,
            "flagged": rep.flagged, "notes": list(rep.notes)}, indent=1, sort_keys=True) + "\n")
        if rep.flagged:
            _say(args, f"warning: {rep.n_failed} of {rep.K} replicates failed; report flagged")
    cov, bias = coverage_csv(reports), bias_csv(reports)
    atomic_write_text(out / "coverage.csv", cov)
    atomic_write_text(out / "bias.csv", bias)
    write_study_figures(out, read_table_csv(cov), read_table_csv(bias))
    _say(args, f"wrote {out / 'coverage.csv'} and {out / 'bias.csv'}")
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.input) if args.input else _out_dir(args)
    try:
        cov = read_table_csv((src / "coverage.csv").read_text(encoding="utf-8"))
        bias = read_table_csv((src / "bias.csv").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise MissingPrerequisiteError(f"{exc.filename} not found; run `nlmemboot study` first") from None
    written = write_study_figures(_out_dir(args) if args.out else src, cov, bias)
    _say(args, f"wrote {len(written)} figures")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _alpha(text: str) -> float:
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError("alpha must lie in (0, 1)")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (default: $NLMEMBOOT_OUT or ./nlmemboot_out)")
    common.add_argument("--seed", type=int, default=0, help="master seed")
    common.add_argument("-q", "--quiet", action="store_true", help="no progress messages")

    p = argparse.ArgumentParser(prog="nlmemboot", description="SAEM fitting, bootstrap intervals and coverage studies for sigmoid Emax mixed models.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate a dataset from a scenario")
    s.add_argument("--model", choices=sorted(MODEL_GAMMA), default="emax")
    s.add_argument("--scenario", help="preset name or TOML file (default rich_<model>)")
    s.add_argument("--name", help="output file name (default data.csv)")
    s.set_defaults(func=cmd_simulate)

    fit_opts = argparse.ArgumentParser(add_help=False)
    fit_opts.add_argument("--data", help="dataset CSV with columns id,x,y[,group]")
    fit_opts.add_argument("--model", choices=sorted(MODEL_GAMMA), default="emax",
                          help="starting gamma: emax=1, hill=3")
    fit_opts.add_argument("--M", type=_positive_int, default=100, help="conditional draws per subject")
    fit_opts.add_argument("--no-conditional", action="store_true", help="skip conditional sampling")

    f = sub.add_parser("fit", parents=[common, fit_opts], help="fit a dataset by SAEM")
    f.set_defaults(func=cmd_fit)

    b = sub.add_parser("bootstrap", parents=[common, fit_opts], help="bootstrap a previous fit")
    b.add_argument("--scheme", action="append", choices=["case", "par", "np", "cnp"], required=True,
                   help="resampling scheme (repeatable)")
    b.add_argument("--B", type=_positive_int, default=200)
    b.add_argument("--stratify", choices=["group"], help="stratify Case resampling by design group")
    b.add_argument("--parallelism", type=_positive_int, default=1)
    b.add_argument("--fit-first", action="store_true", help="run `fit` on --data before bootstrapping")
    b.set_defaults(func=cmd_bootstrap)

    st = sub.add_parser("study", parents=[common], help="run a coverage simulation study")
    st.add_argument("--scenario", action="append",
                    help=f"preset or TOML file (repeatable); presets: {', '.join(scenario_names())}")
    st.add_argument("--K", type=_positive_int)
    st.add_argument("--B", type=_positive_int)
    st.add_argument("--M", type=_positive_int)
    st.add_argument("--methods", nargs="+", help="subset of Asymptotic Case Par NP CNP")
    st.add_argument("--alpha", type=_alpha, action="append", help="alpha level (repeatable)")
    st.add_argument("--parallelism", type=_positive_int, default=1)
    st.add_argument("--long-run", action="store_true", help="K=200, B=200 unless --K/--B are given")
    st.set_defaults(func=cmd_study)

    r = sub.add_parser("report", parents=[common], help="redraw figures from coverage.csv and bias.csv")
    r.add_argument("--in", dest="input", help="directory holding the CSVs (default: output directory)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MissingPrerequisiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (InvalidInputError, InvalidConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (EstimationError, SamplerError) as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
