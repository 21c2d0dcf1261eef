"""Split conformal predictive systems, optionally weighted for covariate shift.

A fitted :class:`SplitCPS` holds a point model, an optional difficulty model
and the signed conformity scores of a calibration split.  For a test object
``x`` the predictive distribution places mass ``p_i`` on
``yhat(x) + s(x) * R_i`` and keeps ``p_test`` as deferred mass, where::

    p_i    = w(x_i)    / (sum_j w(x_j) + w(x))
    p_test = w(x)      / (sum_j w(x_j) + w(x))

Without a weight function every ``w`` is 1.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .distributions import DiscreteCPD
from .models import RegressorSpec, fit_regressor

RESIDUAL = "residual"
NORMALIZED = "normalized"

WeightFunction = Callable[[np.ndarray], np.ndarray]


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ConformityMeasure:
    kind: str = RESIDUAL
    floor: float = 1e-6

    def __post_init__(self):
        if self.kind not in (RESIDUAL, NORMALIZED):
            raise ValueError(f"unknown conformity measure {self.kind!r}")
        if not self.floor > 0:
            raise ValueError("floor must be positive")

    @property
    def normalized(self) -> bool:
        return self.kind == NORMALIZED

    @classmethod
    def residual(cls) -> "ConformityMeasure":
        return cls(RESIDUAL)

    @classmethod
    def normalized_residual(cls, floor: float = 1e-6) -> "ConformityMeasure":
        return cls(NORMALIZED, floor)


@dataclass(frozen=True, eq=False)
class SplitCPS:
    point_model: object
    difficulty_model: object | None
    cal_scores: np.ndarray
    cal_covariates: np.ndarray
    measure: ConformityMeasure = field(default_factory=ConformityMeasure)

    def __post_init__(self):
        scores = np.asarray(self.cal_scores, dtype=np.float64).reshape(-1)
        cov = np.asarray(self.cal_covariates, dtype=np.float64)
        if scores.size < 1 or cov.shape[0] != scores.size:
            raise ConfigurationError("need at least one calibration score with matching covariates")
        if self.measure.normalized and self.difficulty_model is None:
            raise ConfigurationError("normalized conformity needs a difficulty model")
        object.__setattr__(self, "cal_scores", scores)
        object.__setattr__(self, "cal_covariates", cov)
        order = np.argsort(scores, kind="stable")
        sorted_scores = scores[order]
        starts = np.flatnonzero(np.concatenate(([True], sorted_scores[1:] != sorted_scores[:-1])))
        object.__setattr__(self, "_order", order)
        object.__setattr__(self, "_starts", starts)
        object.__setattr__(self, "_unique_scores", sorted_scores[starts])
        object.__setattr__(self, "_sorted_scores", sorted_scores)

    @property
    def n_cal(self) -> int:
        return self.cal_scores.size

    @property
    def sorted_scores(self) -> np.ndarray:
        return self._sorted_scores

    def point(self, X) -> np.ndarray:
        return np.asarray(self.point_model.predict(np.atleast_2d(X)), dtype=np.float64)

    def scale(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        if not self.measure.normalized:
            return np.ones(X.shape[0])
        return np.maximum(np.asarray(self.difficulty_model.predict(X), dtype=np.float64), self.measure.floor)

    def predict_cpd(self, x, weights: WeightFunction | None = None) -> DiscreteCPD:
        return next(self.predict_cpds(np.atleast_2d(x), weights))

    def predict_cpds(self, X, weights: WeightFunction | None = None) -> Iterator[DiscreteCPD]:
        """Yield one CPD per row of ``X``; models are evaluated once per batch."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        loc = self.point(X)
        scale = self.scale(X)
        w_cal, w_test = _evaluate_weights(weights, self.cal_covariates, X)
        w_sorted = w_cal[self._order]
        shared = None
        if weights is None:
            shared = _normalised_masses(w_sorted, 1.0, self._starts)
        for i in range(X.shape[0]):
            if shared is None:
                masses, deferred = _normalised_masses(w_sorted, w_test[i], self._starts)
            else:
                masses, deferred = shared
            support = loc[i] + scale[i] * self._unique_scores
            yield DiscreteCPD(support, masses, deferred).canonical()

    def finite_sampler(self, weights: WeightFunction | None = None):
        """Cumulative masses of the finite support with deferred mass dropped.

        Renormalising the finite part removes the test weight, so the result
        does not depend on the test object; only the support moves with it.
        """
        w_cal, _ = _evaluate_weights(weights, self.cal_covariates, self.cal_covariates[:0])
        w_sorted = w_cal[self._order]
        cum = np.cumsum(w_sorted)
        return cum / cum[-1]


def _evaluate_weights(weights, cal_X, test_X):
    if weights is None:
        return np.ones(cal_X.shape[0]), np.ones(test_X.shape[0])
    w_cal = np.asarray(weights(cal_X), dtype=np.float64).reshape(-1)
    w_test = np.asarray(weights(test_X), dtype=np.float64).reshape(-1) if test_X.shape[0] else np.empty(0)
    if not (np.all(w_cal > 0) and np.all(w_test > 0)) or not np.all(np.isfinite(w_cal)):
        raise ValueError("weight function must be strictly positive and finite")
    return w_cal, w_test


def _normalised_masses(w_sorted, w_test, starts):
    # dividing by the largest weight first makes any constant weight function
    # produce exactly the unweighted masses
    top = max(w_sorted.max(), w_test)
    w = w_sorted / top
    wt = w_test / top
    denom = w.sum() + wt
    masses = np.add.reduceat(w, starts) / denom
    return masses, wt / denom


# -- fitting -------------------------------------------------------------------


def conformity_scores(y, yhat, scale=None) -> np.ndarray:
    r = np.asarray(y, dtype=np.float64) - np.asarray(yhat, dtype=np.float64)
    return r if scale is None else r / scale


def calibrate_scps(point_model, difficulty_model, cal_X, cal_y, measure: ConformityMeasure) -> SplitCPS:
    cal_X = np.atleast_2d(np.asarray(cal_X, dtype=np.float64))
    cal_y = np.asarray(cal_y, dtype=np.float64).reshape(-1)
    if cal_y.size == 0:
        raise ConfigurationError("calibration split is empty")
    yhat = point_model.predict(cal_X)
    scale = None
    if measure.normalized:
        scale = np.maximum(difficulty_model.predict(cal_X), measure.floor)
    return SplitCPS(point_model, difficulty_model, conformity_scores(cal_y, yhat, scale), cal_X, measure)


def out_of_sample_predictions(model, X, y, spec: RegressorSpec, n_folds: int = 5) -> np.ndarray:
    """Out-of-bag predictions when the model has them, else K-fold cross-fits."""
    oob = getattr(model, "oob_prediction_", None)
    if oob is not None:
        return np.where(np.isnan(oob), model.predict(X), oob)
    n = X.shape[0]
    folds = np.arange(n) % min(n_folds, n)
    out = np.empty(n)
    for k in np.unique(folds):
        held = folds == k
        if held.all():
            out[held] = model.predict(X[held])
            continue
        sub = spec.with_seed(spec.seed + 1000 + int(k))
        out[held] = fit_regressor(X[~held], y[~held], sub).predict(X[held])
    return out


def fit_difficulty(X, y, point_model, spec: RegressorSpec):
    """Regressor of the absolute out-of-sample residuals of ``point_model``."""
    resid = np.abs(y - out_of_sample_predictions(point_model, X, y, spec))
    return fit_regressor(X, resid, spec.with_seed(spec.seed + 1))


def fit_scps(proper_train, cal, measure: ConformityMeasure, regressor_spec: RegressorSpec) -> SplitCPS:
    """Fit the point (and difficulty) model on ``proper_train`` and calibrate on ``cal``.

    Both splits are ``(X, y)`` pairs.
    """
    X_tr, y_tr = (np.asarray(a, dtype=np.float64) for a in proper_train)
    X_cal, y_cal = (np.asarray(a, dtype=np.float64) for a in cal)
    X_tr = np.atleast_2d(X_tr)
    if y_tr.size == 0 or y_cal.size == 0:
        raise ConfigurationError("proper-training and calibration splits must be non-empty")
    point_model = fit_regressor(X_tr, y_tr, regressor_spec)
    difficulty = None
    if measure.normalized:
        difficulty = fit_difficulty(X_tr, y_tr, point_model, regressor_spec)
    return calibrate_scps(point_model, difficulty, X_cal, y_cal, measure)


def predict_cpd(scps: SplitCPS, x_test, weights: WeightFunction | None = None) -> DiscreteCPD:
    return scps.predict_cpd(x_test, weights)
