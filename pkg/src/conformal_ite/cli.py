"""Command-line entry point.

Subcommands::

    generate  dump one synthetic dataset (with ground truth) as CSV
    run       run an experiment and write one metrics row per cell/learner/alpha
    sweep-c   repeat ``run`` over a grid of noise-mixing coefficients
    pit       like ``run`` (or ``sweep-c`` with --c-grid) but dump raw PIT values

Exit codes: 0 success, 1 at least one failed cell, 2 invalid configuration.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys

from . import datagen
from .experiment import (
    ConfigError,
    ExperimentConfig,
    LearnerConfig,
    default_jobs,
    load_config,
    run_experiment,
    sweep_correlation,
)


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _names(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML experiment file")
    p.add_argument("--dgp", type=_names, help="comma-separated DGP families")
    p.add_argument("--n", type=int, help="rows per dataset")
    p.add_argument("--alpha", type=_floats, help="comma-separated miscoverage levels")
    p.add_argument("--seeds", type=int, help="number of simulations (seeds base_seed .. base_seed+N-1)")
    p.add_argument("--base-seed", type=int)
    p.add_argument("--learners", type=_names, help="comma-separated learner kinds")
    p.add_argument("--n-mc", type=int, help="Monte Carlo samples per calibration row")
    p.add_argument("--measure", choices=("residual", "normalized"))
    p.add_argument("--propensity", choices=("oracle", "logistic"))
    p.add_argument("--jobs", type=int, help="worker processes (default: $CONFORMAL_ITE_JOBS or 1)")
    p.add_argument("--timing", action="store_true", help="record wall_time (makes output non-reproducible)")
    p.add_argument("--out", required=False, help="output CSV path")


def _build_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig(jobs=default_jobs())
    over = {}
    if args.dgp:
        over["families"] = args.dgp
    if args.n is not None:
        over["n"] = args.n
    if args.alpha:
        over["alphas"] = args.alpha
    if args.seeds is not None:
        over["n_sims"] = args.seeds
    if args.base_seed is not None:
        over["base_seed"] = args.base_seed
    if args.learners:
        over["learners"] = tuple(LearnerConfig(n, n) for n in args.learners)
    if args.n_mc is not None:
        over["n_mc"] = args.n_mc
    if args.measure:
        over["measure"] = args.measure
    if args.propensity:
        over["propensity"] = args.propensity
    if args.jobs is not None:
        over["jobs"] = args.jobs
    if args.timing:
        over["timing"] = True
    if args.out:
        over["out"] = args.out
    if getattr(args, "c_grid", None):
        over["c_grid"] = args.c_grid
    if getattr(args, "covariates", None):
        over["covariates"] = args.covariates
    if getattr(args, "treatment", None):
        over["treatment_column"] = args.treatment
    try:
        return dataclasses.replace(config, **over)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _cmd_generate(args) -> int:
    if args.family == datagen.IHDP:
        if not args.covariates or not args.treatment:
            raise ConfigError("IHDPOverlay needs --covariates and --treatment")
        table = datagen.load_covariates_csv(args.covariates, None, args.treatment)
        ds = datagen.gen_ihdp_overlay(table.X, table.treatment, args.seed)
    else:
        try:
            spec = datagen.DGPSpec(args.family, n=args.n, d=args.d, sigma=args.sigma, c=args.c, seed=args.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        ds = datagen.generate(spec)
    ds.to_csv(args.out)
    return 0


def _cmd_run(args) -> int:
    config = _build_config(args)
    if config.out is None:
        raise ConfigError("an output path is required (--out or [experiment] out)")
    outcome = run_experiment(config)
    return 0 if outcome.ok else 1


def _cmd_sweep(args) -> int:
    config = _build_config(args)
    if config.out is None:
        raise ConfigError("an output path is required (--out or [experiment] out)")
    outcome = sweep_correlation(config)
    return 0 if outcome.ok else 1


def _cmd_pit(args) -> int:
    config = _build_config(args)
    if config.out is None:
        raise ConfigError("an output path is required (--out or [experiment] out)")
    if config.c_grid:
        outcome = sweep_correlation(config, out=None, pit_out=config.out)
    else:
        outcome = run_experiment(dataclasses.replace(config, out=None), pit_out=config.out)
    return 0 if outcome.ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="conformal-ite",
        description="Conformal predictive distributions for individual treatment effects.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset with ground truth to CSV")
    g.add_argument("--dgp", dest="family", required=True, choices=datagen.FAMILIES)
    g.add_argument("--n", type=int, default=datagen.DEFAULT_N)
    g.add_argument("--d", type=int)
    g.add_argument("--sigma", type=float, default=1.0)
    g.add_argument("--c", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--covariates", help="covariate CSV (IHDPOverlay)")
    g.add_argument("--treatment", help="treatment column name (IHDPOverlay)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_generate)

    r = sub.add_parser("run", help="run an experiment")
    _experiment_args(r)
    r.add_argument("--covariates", help="covariate CSV (IHDPOverlay)")
    r.add_argument("--treatment", help="treatment column name (IHDPOverlay)")
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("sweep-c", help="run an experiment for every c in a grid")
    _experiment_args(s)
    s.add_argument("--c-grid", type=_floats, help="comma-separated c values")
    s.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("pit", help="dump raw PIT values per cell")
    _experiment_args(p)
    p.add_argument("--c-grid", type=_floats, help="comma-separated c values (sweep)")
    p.add_argument("--covariates", help="covariate CSV (IHDPOverlay)")
    p.add_argument("--treatment", help="treatment column name (IHDPOverlay)")
    p.set_defaults(func=_cmd_pit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, datagen.CSVFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
