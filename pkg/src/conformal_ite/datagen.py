"""Synthetic data-generating processes with known ground truth.

Families
--------
``AlaaA`` / ``AlaaB``
    Sigmoid-product CATE on uniform covariates; A has no treatment effect.
``NieA`` .. ``NieD``
    The four Nie & Wager settings, with a noise-mixing coefficient ``c`` that
    builds the treated noise as ``c * eps0 + (1 - c) * fresh_noise``.
``IHDPOverlay``
    Response surfaces laid over user-supplied covariates and treatment.

Every random quantity has its own named stream (see :mod:`conformal_ite.rng`).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats
from scipy.special import expit

from .learners import CausalDataset
from .rng import stream

ALAA = ("AlaaA", "AlaaB")
NIE = ("NieA", "NieB", "NieC", "NieD")
IHDP = "IHDPOverlay"
FAMILIES = ALAA + NIE + (IHDP,)

DEFAULT_N = 5000
DEFAULT_D = {"AlaaA": 10, "AlaaB": 10, "NieA": 5, "NieB": 5, "NieC": 5, "NieD": 5}


class CSVFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DGPSpec:
    family: str
    n: int = DEFAULT_N
    d: int | None = None
    sigma: float = 1.0
    c: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown DGP family {self.family!r}; expected one of {FAMILIES}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not -1 <= self.c <= 1:
            raise ValueError("c must lie in [-1, 1]")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.d is not None:
            if self.family in NIE and self.d < 5:
                raise ValueError("Nie setups need d >= 5")
            if self.family in ALAA and self.d < 2:
                raise ValueError("Alaa setups need d >= 2")

    @property
    def dim(self) -> int:
        return self.d if self.d is not None else DEFAULT_D.get(self.family, 0)


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    """Observed data plus hidden ground truth, all in outcome units.

    ``pi_true`` is ``None`` when the assignment mechanism is unknown
    (covariate overlays that keep a real treatment column).
    """

    X: np.ndarray
    w: np.ndarray
    y: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    pi_true: np.ndarray | None
    tau_true: np.ndarray
    family: str = ""
    propensity_fn: Callable[[np.ndarray], np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        n = self.X.shape[0]
        for name in ("w", "y", "y0", "y1", "tau_true"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")
        if not np.all((self.w == 0) | (self.w == 1)):
            raise ValueError("w must be binary")
        if self.pi_true is not None and not np.all((self.pi_true > 0) & (self.pi_true < 1)):
            raise ValueError("pi_true must lie in (0, 1)")

    @property
    def ite_true(self) -> np.ndarray:
        return self.y1 - self.y0

    def __len__(self) -> int:
        return self.X.shape[0]

    def subset(self, idx) -> "SyntheticDataset":
        pi = None if self.pi_true is None else self.pi_true[idx]
        return SyntheticDataset(
            self.X[idx], self.w[idx], self.y[idx], self.y0[idx], self.y1[idx], pi,
            self.tau_true[idx], self.family, self.propensity_fn,
        )

    def causal(self) -> CausalDataset:
        return CausalDataset(self.X, self.w, self.y)

    def to_csv(self, path) -> None:
        d = self.X.shape[1]
        header = [f"x{j}" for j in range(d)] + ["w", "y", "y0", "y1", "pi", "tau", "ite"]
        pi = self.pi_true if self.pi_true is not None else np.full(len(self), np.nan)
        cols = np.column_stack([self.X, self.w, self.y, self.y0, self.y1, pi, self.tau_true, self.ite_true])
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in cols:
                writer.writerow([_fmt(v) for v in row[:d]] + [str(int(row[d]))] + [_fmt(v) for v in row[d + 1:]])


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def _compose(X, w, y0, y1, pi, tau, family, pi_fn) -> SyntheticDataset:
    w = w.astype(np.float64)
    y = w * y1 + (1 - w) * y0
    return SyntheticDataset(X, w, y, y0, y1, pi, tau, family, pi_fn)


# -- Alaa et al. ---------------------------------------------------------------


def alaa_cate(X) -> np.ndarray:
    X = np.atleast_2d(X)
    return (2 / (1 + np.exp(-12 * (X[:, 0] - 0.5)))) * (2 / (1 + np.exp(-12 * (X[:, 1] - 0.5))))


def alaa_propensity(X) -> np.ndarray:
    # "Beta(x0, 2, 4)" read as the Beta(2, 4) CDF at x0, so pi lies in [0.25, 0.5]
    return (1 + stats.beta.cdf(np.atleast_2d(X)[:, 0], 2, 4)) / 4


def gen_alaa(spec: DGPSpec) -> SyntheticDataset:
    if spec.family not in ALAA:
        raise ValueError(f"{spec.family!r} is not an Alaa setup")
    gamma = 1.0 if spec.family == "AlaaA" else 0.0
    n, d = spec.n, spec.dim
    X = stream(spec.seed, "covariates").uniform(0, 1, size=(n, d))
    tau = alaa_cate(X)
    pi = alaa_propensity(X)
    eps0 = stream(spec.seed, "noise0").standard_normal(n)
    eps1 = stream(spec.seed, "noise1").standard_normal(n)
    y0 = gamma * tau + eps0
    y1 = tau + eps1
    w = stream(spec.seed, "treatment").uniform(0, 1, size=n) < pi
    return _compose(X, w, y0, y1, pi, tau - gamma * tau, spec.family, alaa_propensity)


# -- Nie & Wager ---------------------------------------------------------------


def _relu(v):
    return np.maximum(0.0, v)


def _softplus(v):
    return np.logaddexp(0.0, v)


def nie_functions(family: str):
    """Return ``(baseline, propensity, cate)`` callables of ``X`` for a Nie setup."""
    if family == "NieA":
        def b(X):
            return np.sin(np.pi * X[:, 0] * X[:, 1]) + 2 * (X[:, 2] - 0.5) ** 2 + X[:, 3] + 0.5 * X[:, 4]

        def pi(X):
            return np.clip(np.sin(np.pi * X[:, 0] * X[:, 1]), 0.1, 0.9)

        def tau(X):
            return (X[:, 0] + X[:, 1]) / 2
    elif family == "NieB":
        def b(X):
            return _relu(X[:, 0] + X[:, 1] + X[:, 2]) + _relu(X[:, 3] + X[:, 4])

        def pi(X):
            return np.full(X.shape[0], 0.5)

        def tau(X):
            return X[:, 0] + _softplus(X[:, 0])
    elif family == "NieC":
        def b(X):
            # 2 log(1 + exp(.)) keeps the baseline defined for Gaussian covariates
            return 2 * _softplus(X[:, 0] + X[:, 1] + X[:, 2])

        def pi(X):
            return expit(-(X[:, 0] + X[:, 1] + X[:, 2]))

        def tau(X):
            return np.ones(X.shape[0])
    elif family == "NieD":
        def b(X):
            return (_relu(X[:, 0] + X[:, 1] + X[:, 2]) + _relu(X[:, 3] + X[:, 4])) / 2

        def pi(X):
            return 1 / (1 + np.exp(-X[:, 0]) + np.exp(-X[:, 1]))

        def tau(X):
            return _relu(X[:, 0] + X[:, 1] + X[:, 2]) - _relu(X[:, 3] + X[:, 4])
    else:
        raise ValueError(f"{family!r} is not a Nie setup")

    def wrap(f):
        return lambda X: f(np.atleast_2d(np.asarray(X, dtype=np.float64)))

    return wrap(b), wrap(pi), wrap(tau)


def gen_nie(spec: DGPSpec) -> SyntheticDataset:
    if spec.family not in NIE:
        raise ValueError(f"{spec.family!r} is not a Nie setup")
    n, d, sigma, c = spec.n, spec.dim, spec.sigma, spec.c
    cov = stream(spec.seed, "covariates")
    X = cov.uniform(0, 1, size=(n, d)) if spec.family == "NieA" else cov.standard_normal((n, d))
    b_fn, pi_fn, tau_fn = nie_functions(spec.family)
    b, pi, tau = b_fn(X), pi_fn(X), tau_fn(X)
    eps0 = sigma * stream(spec.seed, "noise0").standard_normal(n)
    eps1 = c * eps0 + (1 - c) * sigma * stream(spec.seed, "noise1").standard_normal(n)
    y0 = b - 0.5 * tau + eps0
    y1 = b + 0.5 * tau + eps1
    w = stream(spec.seed, "treatment").uniform(0, 1, size=n) < pi
    return _compose(X, w, y0, y1, pi, tau, spec.family, pi_fn)


# -- semi-synthetic overlay ------------------------------------------------------

IHDP_COEF_VALUES = np.array([0.0, 0.1, 0.2, 0.3, 0.4])
IHDP_COEF_PROBS = np.array([0.6, 0.1, 0.1, 0.1, 0.1])
IHDP_OFFSET = 0.5
IHDP_ATT = 4.0


def ihdp_surfaces(X, w, beta):
    """Mean control/treated surfaces and the shift that pins the ATT."""
    X = np.asarray(X, dtype=np.float64)
    mu0 = np.exp((X + IHDP_OFFSET) @ beta)
    lin = X @ beta
    treated = w == 1
    omega = float(np.mean(lin[treated] - mu0[treated]) - IHDP_ATT)
    return mu0, lin - omega, omega


def gen_ihdp_overlay(covariates, treatment, seed: int = 0) -> SyntheticDataset:
    X = np.atleast_2d(np.asarray(covariates, dtype=np.float64))
    if treatment is None:
        raise ValueError("a treatment column is required")
    w = np.asarray(treatment, dtype=np.float64).reshape(-1)
    if w.size != X.shape[0]:
        raise ValueError("treatment length does not match covariate rows")
    if not np.all((w == 0) | (w == 1)):
        raise ValueError("treatment column must be binary")
    if not np.any(w == 1):
        raise ValueError("treatment column has no treated rows")
    n, d = X.shape
    beta = stream(seed, "coefficients").choice(IHDP_COEF_VALUES, size=d, p=IHDP_COEF_PROBS)
    mu0, mu1, omega = ihdp_surfaces(X, w, beta)
    y0 = mu0 + stream(seed, "noise0").standard_normal(n)
    y1 = mu1 + stream(seed, "noise1").standard_normal(n)
    ds = _compose(X, w, y0, y1, None, mu1 - mu0, IHDP, None)
    object.__setattr__(ds, "beta", beta)
    object.__setattr__(ds, "omega", omega)
    return ds


def generate(spec: DGPSpec, covariates=None, treatment=None) -> SyntheticDataset:
    if spec.family in ALAA:
        return gen_alaa(spec)
    if spec.family in NIE:
        return gen_nie(spec)
    if covariates is None:
        raise ValueError("IHDPOverlay needs covariates (see load_covariates_csv)")
    return gen_ihdp_overlay(covariates, treatment, spec.seed)


# -- CSV ingestion ----------------------------------------------------------------


@dataclass(frozen=True)
class CovariateTable:
    X: np.ndarray
    columns: tuple[str, ...]
    treatment: np.ndarray | None = None


def load_covariates_csv(path, columns: Sequence[str] | None = None, treatment: str | None = None) -> CovariateTable:
    """Read a numeric covariate table (header row required).

    ``columns`` selects and orders covariates (default: every column except
    ``treatment``).  Missing or non-numeric cells raise :class:`CSVFormatError`
    naming the 1-based data row and the column.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CSVFormatError(f"{path}: empty file, header row required")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise CSVFormatError(f"{path}: duplicate column names in header")
    if treatment is not None and treatment not in header:
        raise CSVFormatError(f"{path}: treatment column {treatment!r} not found")
    wanted = list(columns) if columns is not None else [h for h in header if h != treatment]
    for name in wanted:
        if name not in header:
            raise CSVFormatError(f"{path}: column {name!r} not found")
    pos = {h: i for i, h in enumerate(header)}
    data = rows[1:]
    X = np.empty((len(data), len(wanted)))
    w = np.empty(len(data)) if treatment is not None else None
    for r, row in enumerate(data, start=1):
        if len(row) != len(header):
            raise CSVFormatError(f"{path}: row {r} has {len(row)} fields, header has {len(header)}")
        for j, name in enumerate(wanted):
            X[r - 1, j] = _parse_cell(row[pos[name]], path, r, name)
        if treatment is not None:
            w[r - 1] = _parse_cell(row[pos[treatment]], path, r, treatment)
    return CovariateTable(X, tuple(wanted), w)


def _parse_cell(text: str, path, row: int, col: str) -> float:
    text = text.strip()
    if text == "":
        raise CSVFormatError(f"{path}: missing value at (row {row}, col {col})")
    try:
        return float(text)
    except ValueError:
        raise CSVFormatError(f"{path}: non-numeric value {text!r} at (row {row}, col {col})") from None


def write_covariates_csv(path, table: CovariateTable, treatment_name: str = "w") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = list(table.columns) + ([treatment_name] if table.treatment is not None else [])
        writer.writerow(header)
        for i, row in enumerate(table.X):
            cells = [repr(float(v)) for v in row]
            if table.treatment is not None:
                cells.append(repr(float(table.treatment[i])))
            writer.writerow(cells)
