"""Metrics for predicted ITE distributions and intervals against ground truth."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
from scipy import stats

from .distributions import Tail

RESULT_COLUMNS = (
    "setup", "learner", "alpha", "seed", "coverage", "mean_finite_width",
    "frac_unbounded", "ks_pit", "rmse_cate", "wall_time",
)


@dataclass(frozen=True)
class RunResult:
    """One row of metrics for a (setup, learner, alpha, seed) cell.

    Missing metrics are ``None``: ``mean_finite_width`` when every interval
    is unbounded, ``wall_time`` unless timing was requested, and everything
    when the cell failed.
    """

    setup: str
    learner: str
    alpha: float
    seed: int
    coverage: float | None
    mean_finite_width: float | None
    frac_unbounded: float | None
    ks_pit: float | None
    rmse_cate: float | None
    wall_time: float | None = None

    def __post_init__(self):
        for name in ("coverage", "frac_unbounded", "ks_pit"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.mean_finite_width is not None and self.mean_finite_width < 0:
            raise ValueError("mean_finite_width must be non-negative")

    def csv_cells(self) -> list[str]:
        return [format_value(getattr(self, f.name)) for f in fields(self)]


def format_value(v) -> str:
    """Shortest round-trip text for floats; empty string for missing values."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "" if math.isnan(v) else repr(v)
    return str(v)


def _check_lengths(a, b):
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} predictions vs {len(b)} targets")


def coverage(intervals: Sequence, ite_true) -> float:
    """Fraction of targets inside their closed interval; infinite ends always cover."""
    ite_true = np.asarray(ite_true, dtype=np.float64).reshape(-1)
    _check_lengths(intervals, ite_true)
    if len(intervals) == 0:
        raise ValueError("no intervals")
    lo = np.array([iv.lo for iv in intervals], dtype=np.float64)
    hi = np.array([iv.hi for iv in intervals], dtype=np.float64)
    return float(np.mean((lo <= ite_true) & (ite_true <= hi)))


def efficiency(intervals: Sequence) -> tuple[float | None, float]:
    """``(mean width of fully bounded intervals, fraction with an infinite end)``.

    The mean is ``None`` when no interval is bounded.
    """
    if len(intervals) == 0:
        raise ValueError("no intervals")
    lo = np.array([iv.lo for iv in intervals], dtype=np.float64)
    hi = np.array([iv.hi for iv in intervals], dtype=np.float64)
    finite = np.isfinite(lo) & np.isfinite(hi)
    mean = float(np.mean(hi[finite] - lo[finite])) if finite.any() else None
    return mean, float(1 - finite.mean())


def pit_values(cpds, ite_true, rng: np.random.Generator) -> np.ndarray:
    """Randomised PIT: ``cdf_i(ite_i, phi_i)`` with independent uniform ``phi_i``."""
    cpds = list(cpds)
    ite_true = np.asarray(ite_true, dtype=np.float64).reshape(-1)
    _check_lengths(cpds, ite_true)
    phi = rng.random(len(cpds))
    return np.array([float(c.cdf(y, p)) for c, y, p in zip(cpds, ite_true, phi)])


def ks_uniform(values) -> float:
    """Kolmogorov-Smirnov distance between the sample and Uniform(0, 1)."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ValueError("no values")
    if np.any((values < 0) | (values > 1)):
        raise ValueError("values must lie in [0, 1]")
    return float(stats.kstest(values, "uniform").statistic)


def medians(cpds) -> np.ndarray:
    return np.array([float(c.quantile(0.5, Tail.DEFERRED_HIGH)) for c in cpds])


def rmse_cate(cpds, tau_true) -> float:
    """RMSE of the predictive medians against the CATE."""
    cpds = list(cpds)
    tau_true = np.asarray(tau_true, dtype=np.float64).reshape(-1)
    _check_lengths(cpds, tau_true)
    err = medians(cpds) - tau_true
    return float(np.sqrt(np.mean(err * err)))


def crps(cpd, y: float) -> float:
    """Continuous ranked probability score of the finite part (diagnostic only).

    Deferred mass is dropped and the rest renormalised.
    """
    support = np.asarray(cpd.support, dtype=np.float64)
    p = np.asarray(cpd.masses, dtype=np.float64)
    p = p / p.sum()
    # E|X - y| - 0.5 E|X - X'|
    first = np.sum(p * np.abs(support - y))
    cum = np.cumsum(p)
    gaps = np.diff(support)
    second = 2 * np.sum(cum[:-1] * (1 - cum[:-1]) * gaps)
    return float(first - 0.5 * second)
