"""Discrete conformal predictive distributions.

A conformal predictive distribution (CPD) produced by a split conformal
transducer is a finite set of weighted support points plus one extra chunk of
mass that belongs to the test object itself.  The test object's conformity
score is unknown, so that chunk (the *deferred* mass) enters the CDF only
through the randomisation variable ``phi``::

    Q(y, phi) = sum_{q_i < y} p_i + phi * sum_{q_i = y} p_i + phi * u

Quantiles are reported as floats; ``-inf`` / ``+inf`` mean that the requested
tail is absorbed by deferred mass and the bound is unbounded.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Any

import numba
import numpy as np

MASS_TOL = 1e-9
# slack used when comparing cumulative masses to a requested level
LEVEL_TOL = 1e-12


class Tail(enum.Enum):
    """Where deferred mass is placed when reading off a quantile."""

    DEFERRED_LOW = "low"
    DEFERRED_HIGH = "high"


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class DiscreteCPD:
    """Finite weighted support plus deferred (test-point) mass.

    ``support`` must be non-decreasing; equal values are allowed but
    :meth:`canonical` merges them.  Instances are immutable.
    """

    support: np.ndarray
    masses: np.ndarray
    deferred: float = 0.0
    meta: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        support = np.array(self.support, dtype=np.float64).reshape(-1)
        masses = np.array(self.masses, dtype=np.float64).reshape(-1)
        deferred = float(self.deferred)
        if support.shape != masses.shape:
            raise ValueError("support and masses must have equal length")
        if np.isnan(support).any() or np.isnan(masses).any():
            raise ValueError("NaN in support or masses")
        if support.size > 1 and np.any(support[1:] < support[:-1]):
            raise ValueError("support must be non-decreasing")
        if np.any(masses < 0) or not 0.0 <= deferred <= 1.0:
            raise ValueError("masses must be non-negative and deferred mass in [0, 1]")
        total = masses.sum() + deferred
        if abs(total - 1.0) > MASS_TOL:
            raise ValueError(f"total mass is {total!r}, expected 1")
        object.__setattr__(self, "support", _readonly(support))
        object.__setattr__(self, "masses", _readonly(masses))
        object.__setattr__(self, "deferred", deferred)

    @classmethod
    def from_points(cls, values, masses, deferred: float = 0.0, meta=None) -> "DiscreteCPD":
        """Build a canonical CPD from unsorted, possibly repeated points."""
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        masses = np.asarray(masses, dtype=np.float64).reshape(-1)
        order = np.argsort(values, kind="stable")
        support, merged = _merge_ties(values[order], masses[order])
        return cls(support, merged, deferred, meta or {})

    @classmethod
    def point_mass(cls, value: float) -> "DiscreteCPD":
        return cls(np.array([value]), np.array([1.0]), 0.0)

    def __len__(self) -> int:
        return self.support.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, DiscreteCPD):
            return NotImplemented
        return (
            self.deferred == other.deferred
            and np.array_equal(self.support, other.support)
            and np.array_equal(self.masses, other.masses)
        )

    __hash__ = None

    @property
    def finite_mass(self) -> float:
        return float(self.masses.sum())

    def canonical(self) -> "DiscreteCPD":
        """Merge equal support values by summing their masses."""
        if self.support.size < 2 or np.all(self.support[1:] > self.support[:-1]):
            return self
        support, masses = _merge_ties(self.support, self.masses)
        return DiscreteCPD(support, masses, self.deferred, dict(self.meta))

    def cdf(self, y, phi=1.0):
        """Randomised CDF ``Q(y, phi)``; vectorised over ``y`` and ``phi``."""
        y = np.asarray(y, dtype=np.float64)
        phi = np.asarray(phi, dtype=np.float64)
        if np.any((phi < 0) | (phi > 1)):
            raise ValueError("phi must lie in [0, 1]")
        cum = np.concatenate(([0.0], np.cumsum(self.masses)))
        below = cum[np.searchsorted(self.support, y, side="left")]
        upto = cum[np.searchsorted(self.support, y, side="right")]
        out = below + phi * (upto - below) + phi * self.deferred
        return float(out) if out.ndim == 0 else out

    def quantile(self, level, tail: Tail = Tail.DEFERRED_HIGH):
        """Smallest support value whose cumulative mass reaches ``level``.

        Deferred mass counts below all support under ``DEFERRED_LOW`` and
        above it under ``DEFERRED_HIGH``.  Returns ``-inf`` when the level is
        already reached by deferred mass placed low and ``+inf`` when the
        finite support cannot reach it with deferred mass placed high.
        """
        level = np.asarray(level, dtype=np.float64)
        _check_levels(level)
        offset = self.deferred if tail is Tail.DEFERRED_LOW else 0.0
        cum = np.cumsum(self.masses) + offset
        idx = np.searchsorted(cum, level - LEVEL_TOL, side="left")
        if self.support.size:
            out = np.where(idx < self.support.size, self.support[np.minimum(idx, self.support.size - 1)], np.inf)
        else:
            out = np.full(level.shape, np.inf)
        if tail is Tail.DEFERRED_LOW:
            out = np.where(offset >= level - LEVEL_TOL, -np.inf, out)
        return float(out) if out.ndim == 0 else out

    def negate(self) -> "DiscreteCPD":
        return DiscreteCPD(-self.support[::-1], self.masses[::-1], self.deferred, dict(self.meta))

    def to_dict(self) -> dict:
        return {
            "support": self.support.tolist(),
            "masses": self.masses.tolist(),
            "deferred": self.deferred,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "DiscreteCPD":
        d = json.loads(text)
        return cls(np.asarray(d["support"]), np.asarray(d["masses"]), d["deferred"])


def _check_levels(level: np.ndarray) -> None:
    if np.any((level <= 0) | (level >= 1)) or np.isnan(level).any():
        raise ValueError("quantile level must lie in the open interval (0, 1)")


def _merge_ties(support: np.ndarray, masses: np.ndarray):
    if support.size == 0:
        return support, masses
    starts = np.flatnonzero(np.concatenate(([True], support[1:] != support[:-1])))
    return support[starts], np.add.reduceat(masses, starts)


# -- module-level API --------------------------------------------------------


def cdf(dist, y, phi=1.0):
    return dist.cdf(y, phi)


def quantile(dist, level, tail: Tail = Tail.DEFERRED_HIGH):
    return dist.quantile(level, tail)


def negate(dist: DiscreteCPD) -> DiscreteCPD:
    return dist.negate()


def convolve_difference(q1: DiscreteCPD, q0: DiscreteCPD, max_pairs: int | None = None, rng=None) -> DiscreteCPD:
    """Distribution of ``Y1 - Y0`` for independent CPDs ``q1`` and ``q0``.

    Every pair ``(i, j)`` contributes the point ``q1_i - q0_j`` with mass
    ``p1_i * p0_j``; the deferred mass is ``1 - (1 - u1)(1 - u0)``.

    With ``max_pairs`` set and ``len(q1) * len(q0)`` above it, both supports
    are uniformly subsampled (masses rescaled to preserve each side's finite
    mass) and the sizes used are recorded in ``meta["subsampled"]``.
    """
    s1, p1, s0, p0 = q1.support, q1.masses, q0.support, q0.masses
    meta = {}
    if max_pairs is not None and s1.size * s0.size > max_pairs:
        if rng is None:
            raise ValueError("subsampling the convolution needs an rng")
        ratio = math.sqrt(max_pairs / (s1.size * s0.size))
        k1 = max(1, min(s1.size, int(s1.size * ratio)))
        k0 = max(1, min(s0.size, max_pairs // k1))
        s1, p1 = _subsample(s1, p1, k1, rng)
        s0, p0 = _subsample(s0, p0, k0, rng)
        meta["subsampled"] = (k1, k0)
    values = (s1[:, None] - s0[None, :]).ravel()
    masses = (p1[:, None] * p0[None, :]).ravel()
    deferred = 1.0 - (1.0 - q1.deferred) * (1.0 - q0.deferred)
    return DiscreteCPD.from_points(values, masses, deferred, meta)


def _subsample(support, masses, k, rng):
    keep = np.sort(rng.choice(support.size, size=k, replace=False))
    total = masses.sum()
    kept = masses[keep]
    scale = total / kept.sum() if kept.sum() > 0 else 0.0
    return support[keep], kept * scale


class DifferenceCPD:
    """Lazy, exact view of ``convolve_difference(q1, q0)``.

    CDF evaluations cost ``O(N1 + N0)`` and quantiles a bisection over that,
    instead of materialising and sorting all ``N1 * N0`` pairwise points.
    Results agree with the materialised convolution up to floating-point
    summation order.
    """

    def __init__(self, q1: DiscreteCPD, q0: DiscreteCPD):
        self.q1 = q1
        self.q0 = q0
        self.deferred = 1.0 - (1.0 - q1.deferred) * (1.0 - q0.deferred)
        # suffix sums: tail0[k] = sum_{j >= k} p0_j
        self._tail0 = np.concatenate((np.cumsum(q0.masses[::-1])[::-1], [0.0]))

    @property
    def finite_mass(self) -> float:
        return 1.0 - self.deferred

    def materialize(self) -> DiscreteCPD:
        return convolve_difference(self.q1, self.q0)

    def cdf(self, y, phi=1.0):
        y = np.asarray(y, dtype=np.float64)
        phi = np.asarray(phi, dtype=np.float64)
        if np.any((phi < 0) | (phi > 1)):
            raise ValueError("phi must lie in [0, 1]")
        yb, phib = np.broadcast_arrays(y, phi)
        out = np.empty(yb.shape)
        a = (self.q1.support, self.q1.masses, self.q0.support, self._tail0)
        for idx in np.ndindex(yb.shape):
            lt = _mass_below(*a, yb[idx], True)
            le = _mass_below(*a, yb[idx], False)
            out[idx] = lt + phib[idx] * (le - lt) + phib[idx] * self.deferred
        return float(out) if out.ndim == 0 else out

    def quantile(self, level, tail: Tail = Tail.DEFERRED_HIGH):
        level = np.asarray(level, dtype=np.float64)
        _check_levels(level)
        offset = self.deferred if tail is Tail.DEFERRED_LOW else 0.0
        out = np.empty(level.shape)
        for idx in np.ndindex(level.shape):
            target = level[idx] - LEVEL_TOL
            if tail is Tail.DEFERRED_LOW and offset >= target:
                out[idx] = -np.inf
            else:
                out[idx] = _difference_quantile(
                    self.q1.support, self.q1.masses, self.q0.support, self._tail0, target - offset
                )
        return float(out) if out.ndim == 0 else out


@numba.njit(cache=True)
def _mass_below(s1, p1, s0, tail0, y, strict):
    """Mass of pairs with ``s1[i] - s0[j] < y`` (strict) or ``<= y``."""
    n0 = s0.size
    total = 0.0
    # for fixed i the differences fall as j grows, so the qualifying j form a
    # suffix [k, n0); k only moves right as i grows.
    k = 0
    for i in range(s1.size):
        while k < n0:
            d = s1[i] - s0[k]
            if (d < y) if strict else (d <= y):
                break
            k += 1
        total += p1[i] * tail0[k]
    return total


@numba.njit(cache=True)
def _next_above(s1, s0, lo):
    """Smallest pairwise difference strictly greater than ``lo``."""
    n0 = s0.size
    best = np.inf
    k = 0
    for i in range(s1.size):
        while k < n0 and s1[i] - s0[k] > lo:
            k += 1
        if k > 0:
            d = s1[i] - s0[k - 1]
            if d < best:
                best = d
    return best


@numba.njit(cache=True)
def _difference_quantile(s1, p1, s0, tail0, target):
    hi = s1[-1] - s0[0]
    if _mass_below(s1, p1, s0, tail0, hi, False) < target:
        return np.inf
    lo = s1[0] - s0[-1]
    if _mass_below(s1, p1, s0, tail0, lo, False) >= target:
        return lo
    # invariant: mass(<= lo) < target <= mass(<= hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if _mass_below(s1, p1, s0, tail0, mid, False) >= target:
            hi = mid
        else:
            lo = mid
    # walk support points above lo until the target is reached
    while True:
        cand = _next_above(s1, s0, lo)
        if _mass_below(s1, p1, s0, tail0, cand, False) >= target:
            return cand
        lo = cand
