"""Declarative simulation experiments over (setup x learner x alpha x seed).

A *cell* is one (setup, c, seed) triple: one dataset, one train/test split
and one fit per learner.  Cells are independent, own their random streams
and may run in a process pool; results are sorted by a fixed key before
they are written, so serial and parallel runs give identical files.
"""
from __future__ import annotations

import csv
import dataclasses
import os
import sys
import time
import traceback
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import datagen
from .conformal import ConformityMeasure
from .datagen import DGPSpec, SyntheticDataset
from .distributions import Tail
from .evaluation import RESULT_COLUMNS, RunResult, efficiency, format_value, ks_uniform
from .learners import (
    MC,
    PMC,
    CCTLearner,
    fit_cmc_s,
    fit_cmc_t,
    fit_cmc_x,
    fit_cps_oracle,
    fit_nuisance_t,
    naive_wcp_intervals,
)
from .models import OraclePropensity, RegressorSpec, fit_propensity
from .rng import stream

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

LEARNER_KINDS = ("cct", "cmc_t_mc", "cmc_t_pmc", "cmc_s", "cmc_x", "naive_wcp", "cps_oracle")
PROPENSITY_MODES = ("oracle", "logistic")
JOBS_ENV = "CONFORMAL_ITE_JOBS"

# options each learner kind accepts in its config table
_COMMON_OPTIONS = {"kind", "weighted", "measure", "split_fraction"}
_LEARNER_OPTIONS = {
    "cct": _COMMON_OPTIONS,
    "naive_wcp": _COMMON_OPTIONS,
    "cmc_t_mc": _COMMON_OPTIONS | {"n_mc", "mc_source"},
    "cmc_t_pmc": _COMMON_OPTIONS | {"n_mc", "mc_source"},
    "cmc_s": _COMMON_OPTIONS | {"n_mc", "mode", "mc_source"},
    "cmc_x": _COMMON_OPTIONS | {"n_mc", "mode", "cate_features"},
    "cps_oracle": {"kind", "measure", "split_fraction"},
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LearnerConfig:
    name: str
    kind: str
    options: tuple = ()

    def option(self, key, default=None):
        return dict(self.options).get(key, default)


@dataclass(frozen=True)
class ExperimentConfig:
    families: tuple[str, ...] = ("NieB",)
    n: int = 2000
    d: int | None = None
    sigma: float = 1.0
    c: float = 0.0
    covariates: str | None = None
    covariate_columns: tuple[str, ...] | None = None
    treatment_column: str | None = None
    test_fraction: float | None = None
    learners: tuple[LearnerConfig, ...] = (LearnerConfig("cct", "cct"),)
    alphas: tuple[float, ...] = (0.1,)
    n_sims: int = 100
    n_mc: int = 100
    measure: str = "normalized"
    regressor: RegressorSpec = field(default_factory=RegressorSpec)
    propensity: str = "oracle"
    propensity_clip: float = 0.01
    base_seed: int = 0
    jobs: int = 1
    out: str | None = None
    c_grid: tuple[float, ...] = ()
    timing: bool = False

    def __post_init__(self):
        if self.n_sims < 1:
            raise ConfigError("n_sims must be >= 1")
        if not self.alphas:
            raise ConfigError("at least one alpha is required")
        for a in self.alphas:
            if not 0 < a < 1:
                raise ConfigError(f"alpha must lie in (0, 1), got {a}")
        for fam in self.families:
            if fam not in datagen.FAMILIES:
                raise ConfigError(f"unknown DGP family {fam!r}")
        if not self.families:
            raise ConfigError("at least one DGP family is required")
        if datagen.IHDP in self.families and self.covariates is None:
            raise ConfigError("IHDPOverlay needs a covariates CSV")
        if datagen.IHDP in self.families and self.treatment_column is None:
            raise ConfigError("IHDPOverlay needs a treatment column")
        if self.propensity not in PROPENSITY_MODES:
            raise ConfigError(f"propensity must be one of {PROPENSITY_MODES}")
        if self.propensity == "oracle" and datagen.IHDP in self.families:
            raise ConfigError("oracle propensity is unavailable for IHDPOverlay; use logistic")
        if self.measure not in ("residual", "normalized"):
            raise ConfigError("measure must be 'residual' or 'normalized'")
        if self.n_mc < 1:
            raise ConfigError("n_mc must be >= 1")
        if self.test_fraction is not None and not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if not self.learners:
            raise ConfigError("at least one learner is required")
        names = [lc.name for lc in self.learners]
        if len(set(names)) != len(names):
            raise ConfigError("learner names must be unique")
        for lc in self.learners:
            if lc.kind not in LEARNER_KINDS:
                raise ConfigError(f"unknown learner kind {lc.kind!r} for {lc.name!r}")
            unknown = set(dict(lc.options)) - _LEARNER_OPTIONS[lc.kind]
            if unknown:
                raise ConfigError(f"learner {lc.name!r}: unknown option(s) {sorted(unknown)}")
        for c in self.c_grid:
            if not -1 <= c <= 1:
                raise ConfigError(f"c must lie in [-1, 1], got {c}")
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if not -1 <= self.c <= 1:
            raise ConfigError(f"c must lie in [-1, 1], got {self.c}")

    def test_fraction_for(self, family: str) -> float:
        if self.test_fraction is not None:
            return self.test_fraction
        return 0.5 if family in datagen.NIE else 0.2


# -- config parsing --------------------------------------------------------------


def _as_tuple(v):
    if v is None:
        return None
    return tuple(v) if isinstance(v, (list, tuple)) else (v,)


def _learners_from(table, names) -> tuple[LearnerConfig, ...]:
    out = []
    if table:
        for name, opts in table.items():
            if not isinstance(opts, dict):
                raise ConfigError(f"[learners.{name}] must be a table")
            kind = opts.get("kind", name)
            items = tuple(sorted((k, tuple(v) if isinstance(v, list) else v) for k, v in opts.items()))
            out.append(LearnerConfig(name, kind, items))
    elif names:
        out = [LearnerConfig(n, n) for n in names]
    return tuple(out)


def config_from_mapping(doc: dict) -> ExperimentConfig:
    known = {"dgp", "experiment", "regressor", "learners"}
    extra = set(doc) - known
    if extra:
        raise ConfigError(f"unknown config section(s): {sorted(extra)}")
    dgp = dict(doc.get("dgp", {}))
    exp = dict(doc.get("experiment", {}))
    kwargs = {}
    if "family" in dgp:
        kwargs["families"] = _as_tuple(dgp.pop("family"))
    for key in ("n", "d", "sigma", "c", "covariates", "test_fraction"):
        if key in dgp:
            kwargs[key] = dgp.pop(key)
    if "columns" in dgp:
        kwargs["covariate_columns"] = _as_tuple(dgp.pop("columns"))
    if "treatment" in dgp:
        kwargs["treatment_column"] = dgp.pop("treatment")
    if dgp:
        raise ConfigError(f"unknown [dgp] key(s): {sorted(dgp)}")
    learner_names = _as_tuple(exp.pop("learners", None))
    if "alpha" in exp:
        kwargs["alphas"] = _as_tuple(exp.pop("alpha"))
    if "c_grid" in exp:
        kwargs["c_grid"] = _as_tuple(exp.pop("c_grid"))
    for key in ("n_sims", "n_mc", "measure", "propensity", "propensity_clip", "base_seed", "jobs", "out", "timing"):
        if key in exp:
            kwargs[key] = exp.pop(key)
    if exp:
        raise ConfigError(f"unknown [experiment] key(s): {sorted(exp)}")
    if "regressor" in doc:
        try:
            kwargs["regressor"] = RegressorSpec(**doc["regressor"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[regressor]: {exc}") from None
    learners = _learners_from(doc.get("learners"), learner_names)
    if learners:
        kwargs["learners"] = learners
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_mapping(doc)


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        return 1


# -- one cell ----------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    setup: str
    c: float
    seed: int
    setup_index: int


@dataclass
class CellOutput:
    cell: Cell
    results: list[RunResult]
    pits: dict
    errors: list[str]


def make_dataset(config: ExperimentConfig, family: str, c: float, seed: int) -> SyntheticDataset:
    if family == datagen.IHDP:
        table = datagen.load_covariates_csv(config.covariates, config.covariate_columns, config.treatment_column)
        return datagen.gen_ihdp_overlay(table.X, table.treatment, seed)
    spec = DGPSpec(family, n=config.n, d=config.d, sigma=config.sigma, c=c, seed=seed)
    return datagen.generate(spec)


def train_test_split(ds: SyntheticDataset, test_fraction: float, seed: int):
    n = len(ds)
    n_test = min(max(int(round(test_fraction * n)), 1), n - 1)
    perm = stream(seed, "test_split").permutation(n)
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


def _propensity(config, train: SyntheticDataset):
    if config.propensity == "oracle":
        if train.propensity_fn is None:
            raise ConfigError("oracle propensity requested but the DGP has no known propensity")
        return OraclePropensity(train.propensity_fn)
    return fit_propensity(train.X, train.w, clip=config.propensity_clip)


def _learner_stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class _Fitter:
    """Fits learners for one cell, sharing T-learner nuisances where possible."""

    def __init__(self, config, train: SyntheticDataset, propensity, seed):
        self.config = config
        self.train = train
        self.data = train.causal()
        self.propensity = propensity
        self.seed = seed
        self._nuisance = {}

    def measure(self, lc: LearnerConfig) -> ConformityMeasure:
        return ConformityMeasure(lc.option("measure", self.config.measure))

    def common(self, lc):
        return dict(
            measure=self.measure(lc),
            regressor_spec=self.config.regressor,
            split_fraction=lc.option("split_fraction", 0.5),
            weighted=bool(lc.option("weighted", True)),
            seed=self.seed,
        )

    def nuisance(self, lc):
        kw = self.common(lc)
        key = (kw["measure"], kw["split_fraction"], kw["weighted"])
        if key not in self._nuisance:
            self._nuisance[key] = fit_nuisance_t(self.data, self.propensity, **kw)
        return self._nuisance[key]

    def predictor(self, lc: LearnerConfig, X_test):
        """Return ``("cpd", iterator)`` or ``("interval", list)`` for the test rows."""
        kind = lc.kind
        n_mc = int(lc.option("n_mc", self.config.n_mc))
        if kind == "cps_oracle":
            cps = fit_cps_oracle(
                self.train.X, self.train.ite_true, self.measure(lc), self.config.regressor,
                lc.option("split_fraction", 0.5), self.seed,
            )
            return "cpd", cps.predict_cpds(X_test)
        if kind in ("cct", "naive_wcp"):
            nu = self.nuisance(lc)
            learner = CCTLearner(nu, {"proper": nu.proper_idx, "calibration": nu.cal_idx})
            if kind == "naive_wcp":
                return "interval", learner
            return "cpd", learner.predict_distributions(X_test)
        if kind in ("cmc_t_mc", "cmc_t_pmc"):
            mode = MC if kind == "cmc_t_mc" else PMC
            source = lc.option("mc_source", "calibration")
            shared = self.nuisance(lc) if source == "calibration" else None
            learner = fit_cmc_t(
                self.data, self.propensity, n_mc=n_mc, mode=mode, nuisance=shared, mc_source=source,
                **self.common(lc),
            )
            return "cpd", learner.predict_distributions(X_test)
        if kind == "cmc_s":
            learner = fit_cmc_s(
                self.data, self.propensity, n_mc=n_mc, mode=lc.option("mode", MC),
                mc_source=lc.option("mc_source", "calibration"), **self.common(lc),
            )
            return "cpd", learner.predict_distributions(X_test)
        if kind == "cmc_x":
            learner = fit_cmc_x(
                self.data, self.propensity, n_mc=n_mc, mode=lc.option("mode", MC),
                cate_features=lc.option("cate_features"), nuisance=self.nuisance(lc), **self.common(lc),
            )
            return "cpd", learner.predict_distributions(X_test)
        raise ConfigError(f"unknown learner kind {kind!r}")


def _evaluate_cpds(cpds, test: SyntheticDataset, alphas, phi):
    """Stream over CPDs once, collecting interval ends, PIT values and medians."""
    n = len(test)
    lo = np.empty((len(alphas), n))
    hi = np.empty((len(alphas), n))
    pit = np.empty(n)
    med = np.empty(n)
    ite = test.ite_true
    count = 0
    for i, cpd in enumerate(cpds):
        for k, a in enumerate(alphas):
            lo[k, i] = cpd.quantile(a / 2, Tail.DEFERRED_LOW)
            hi[k, i] = cpd.quantile(1 - a / 2, Tail.DEFERRED_HIGH)
        pit[i] = cpd.cdf(ite[i], phi[i])
        med[i] = cpd.quantile(0.5, Tail.DEFERRED_HIGH)
        count += 1
    if count != n:
        raise RuntimeError(f"learner produced {count} distributions for {n} test rows")
    return lo, hi, pit, med


class _Bounds:
    __slots__ = ("lo", "hi")

    def __init__(self, lo, hi):
        self.lo = lo
        self.hi = hi


def _interval_metrics(lo, hi, ite):
    covered = float(np.mean((lo <= ite) & (ite <= hi)))
    width, frac_unb = efficiency([_Bounds(a, b) for a, b in zip(lo, hi)])
    return covered, width, frac_unb


def run_cell(config: ExperimentConfig, cell: Cell, keep_pit: bool = False) -> CellOutput:
    results, errors, pits = [], [], {}

    def failed(lc):
        for a in config.alphas:
            results.append(RunResult(cell.setup, lc.name, a, cell.seed, None, None, None, None, None, None))

    try:
        ds = make_dataset(config, cell.setup, cell.c, cell.seed)
        train, test = train_test_split(ds, config.test_fraction_for(cell.setup), cell.seed)
        propensity = _propensity(config, train)
        fitter = _Fitter(config, train, propensity, cell.seed)
    except Exception:
        errors.append(_format_error(cell, None))
        for lc in config.learners:
            failed(lc)
        return CellOutput(cell, results, pits, errors)

    ite = test.ite_true
    for lc in config.learners:
        t0 = time.perf_counter()
        try:
            kind, pred = fitter.predictor(lc, test.X)
            if kind == "interval":
                rows = []
                for a in config.alphas:
                    ivs = naive_wcp_intervals(pred, test.X, a)
                    lo = np.array([iv.lo for iv in ivs])
                    hi = np.array([iv.hi for iv in ivs])
                    rows.append((a, *_interval_metrics(lo, hi, ite), None, None))
            else:
                phi = stream(cell.seed, "pit", _learner_stream_key(lc.name)).random(len(test))
                lo, hi, pit, med = _evaluate_cpds(pred, test, config.alphas, phi)
                ks = ks_uniform(pit)
                rmse = float(np.sqrt(np.mean((med - test.tau_true) ** 2)))
                if keep_pit:
                    pits[lc.name] = pit
                rows = [(a, *_interval_metrics(lo[k], hi[k], ite), ks, rmse) for k, a in enumerate(config.alphas)]
            elapsed = time.perf_counter() - t0 if config.timing else None
            for a, cov, width, frac_unb, ks, rmse in rows:
                results.append(RunResult(cell.setup, lc.name, a, cell.seed, cov, width, frac_unb, ks, rmse, elapsed))
        except Exception:
            errors.append(_format_error(cell, lc.name))
            failed(lc)
    return CellOutput(cell, results, pits, errors)


def _format_error(cell: Cell, learner: str | None) -> str:
    where = f"setup={cell.setup} c={cell.c!r} seed={cell.seed}"
    if learner is not None:
        where += f" learner={learner}"
    return f"cell failed ({where}):\n{traceback.format_exc()}"


# -- many cells ----------------------------------------------------------------------


def cells_for(config: ExperimentConfig, c_values: Sequence[float] | None = None) -> list[Cell]:
    cs = list(c_values) if c_values is not None else [config.c]
    return [
        Cell(family, float(c), config.base_seed + i, k)
        for k, family in enumerate(config.families)
        for c in cs
        for i in range(config.n_sims)
    ]


def _run_cell_star(args):
    return run_cell(*args)


def run_cells(config: ExperimentConfig, cells: Sequence[Cell], keep_pit: bool = False) -> list[CellOutput]:
    jobs = min(config.jobs, len(cells))
    if jobs <= 1:
        outputs = [run_cell(config, cell, keep_pit) for cell in cells]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(_run_cell_star, [(config, cell, keep_pit) for cell in cells]))
    return sorted(outputs, key=lambda o: (o.cell.setup_index, o.cell.c, o.cell.seed))


def _ordered_results(config, outputs):
    learner_pos = {lc.name: i for i, lc in enumerate(config.learners)}
    alpha_pos = {a: i for i, a in enumerate(config.alphas)}
    rows = []
    for out in outputs:
        for r in out.results:
            rows.append((out.cell, r))
    rows.sort(key=lambda cr: (cr[0].setup_index, cr[0].c, cr[0].seed, learner_pos[cr[1].learner], alpha_pos[cr[1].alpha]))
    return rows


def results_header(with_c: bool) -> list[str]:
    cols = list(RESULT_COLUMNS)
    if with_c:
        cols.insert(1, "c")
    return cols


def write_results(path, config, outputs, with_c: bool) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(results_header(with_c))
        for cell, r in _ordered_results(config, outputs):
            cells = r.csv_cells()
            if with_c:
                cells.insert(1, format_value(cell.c))
            writer.writerow(cells)
    os.replace(tmp, path)


def write_pits(path, config, outputs, with_c: bool) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["setup"] + (["c"] if with_c else []) + ["learner", "seed", "index", "pit"])
        for out in outputs:
            for lc in config.learners:
                values = out.pits.get(lc.name)
                if values is None:
                    continue
                prefix = [out.cell.setup] + ([format_value(out.cell.c)] if with_c else [])
                for i, v in enumerate(values):
                    writer.writerow(prefix + [lc.name, str(out.cell.seed), str(i), format_value(v)])
    os.replace(tmp, path)


@dataclass
class ExperimentOutcome:
    outputs: list[CellOutput]
    errors: list[str]

    @property
    def results(self) -> list[RunResult]:
        return [r for out in self.outputs for r in out.results]

    @property
    def ok(self) -> bool:
        return not self.errors


def _report(outputs) -> list[str]:
    errors = [e for out in outputs for e in out.errors]
    for e in errors:
        print(e, file=sys.stderr)
    return errors


def run_experiment(config: ExperimentConfig, out=None, pit_out=None) -> ExperimentOutcome:
    """Run every (setup, seed) cell at ``config.c`` and write one row per learner and alpha."""
    outputs = run_cells(config, cells_for(config), keep_pit=pit_out is not None)
    out = out or config.out
    if out is not None:
        write_results(out, config, outputs, with_c=False)
    if pit_out is not None:
        write_pits(pit_out, config, outputs, with_c=False)
    return ExperimentOutcome(outputs, _report(outputs))


def sweep_correlation(config: ExperimentConfig, c_grid: Sequence[float] | None = None, out=None, pit_out=None) -> ExperimentOutcome:
    """Repeat the experiment for every noise-mixing coefficient in ``c_grid``."""
    grid = tuple(c_grid) if c_grid is not None else config.c_grid
    if not grid:
        raise ConfigError("empty c grid")
    bad = [f for f in config.families if f not in datagen.NIE]
    if bad:
        raise ConfigError(f"the correlation sweep needs Nie setups, got {bad}")
    config = dataclasses.replace(config, c_grid=tuple(float(c) for c in grid))
    outputs = run_cells(config, cells_for(config, config.c_grid), keep_pit=pit_out is not None)
    out = out or config.out
    if out is not None:
        write_results(out, config, outputs, with_c=True)
    if pit_out is not None:
        write_pits(pit_out, config, outputs, with_c=True)
    return ExperimentOutcome(outputs, _report(outputs))
