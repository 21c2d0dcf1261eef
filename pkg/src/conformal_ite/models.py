"""Base learners: a CART random forest, k-NN regression and propensity models.

All regressors expose ``fit(X, y)`` / ``predict(X)``; propensity models expose
``predict_proba(X)`` returning ``P(W = 1 | X)``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit

from . import _tree
from .rng import stream

RANDOM_FOREST = "random_forest"
KNN = "knn"


class DegenerateDataError(ValueError):
    """Raised when data cannot support the requested fit."""


@dataclass(frozen=True)
class RegressorSpec:
    """Which base regressor to fit and with what hyperparameters.

    Random-forest defaults follow the usual library defaults for regression:
    100 fully grown trees on bootstrap samples, every feature considered at
    every split.
    """

    kind: str = RANDOM_FOREST
    n_trees: int = 100
    max_depth: int | None = None
    min_samples_leaf: int = 1
    min_samples_split: int = 2
    feature_fraction: float = 1.0
    bootstrap: bool = True
    k: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (RANDOM_FOREST, KNN):
            raise ValueError(f"unknown regressor kind {self.kind!r}")
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if not 0 < self.feature_fraction <= 1:
            raise ValueError("feature_fraction must lie in (0, 1]")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.min_samples_leaf < 1 or self.min_samples_split < 2:
            raise ValueError("min_samples_leaf >= 1 and min_samples_split >= 2 required")

    def with_seed(self, seed: int) -> "RegressorSpec":
        return dataclasses.replace(self, seed=int(seed))

    @property
    def min_rows(self) -> int:
        return self.k if self.kind == KNN else self.min_samples_split


def _check_xy(X, y):
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64).reshape(-1)
    if X.ndim != 2:
        raise ValueError("X must be a 2-D array")
    if X.shape[0] != y.size:
        raise ValueError(f"X has {X.shape[0]} rows but y has {y.size} entries")
    return X, y


class RandomForestRegressor:
    """Bagged CART regression trees with variance-reduction splits.

    Thresholds are midpoints between consecutive distinct values; equal gains
    go to the lowest feature index, then the lowest threshold.
    """

    def __init__(self, spec: RegressorSpec | None = None):
        self.spec = spec or RegressorSpec()
        self._forest = None
        self.oob_prediction_ = None
        self.n_features_ = None

    def fit(self, X, y) -> "RandomForestRegressor":
        X, y = _check_xy(X, y)
        spec = self.spec
        n, d = X.shape
        if n < max(spec.min_samples_split, 1):
            raise DegenerateDataError(f"need at least {spec.min_samples_split} rows, got {n}")
        rng = stream(spec.seed, "models")
        n_try = max(1, int(spec.feature_fraction * d))
        max_depth = -1 if spec.max_depth is None else int(spec.max_depth)
        # collapse duplicate covariate rows; splits only see per-row sums
        Xu, group = np.unique(X, axis=0, return_inverse=True)
        group = group.reshape(-1)
        n_unique = Xu.shape[0]
        parts = []
        inbag = np.zeros((spec.n_trees, n), dtype=np.int64)
        for t in range(spec.n_trees):
            if spec.bootstrap:
                counts = np.bincount(rng.integers(0, n, size=n), minlength=n)
            else:
                counts = np.ones(n, dtype=np.int64)
            inbag[t] = counts
            w = np.bincount(group, weights=counts, minlength=n_unique)
            wy = np.bincount(group, weights=counts * y, minlength=n_unique)
            wyy = np.bincount(group, weights=counts * y * y, minlength=n_unique)
            keep = w > 0
            tree_seed = int(rng.integers(0, 2**31 - 1))
            parts.append(
                _tree.build_tree(
                    Xu[keep], w[keep], wy[keep], wyy[keep],
                    max_depth, spec.min_samples_leaf, spec.min_samples_split, n_try, tree_seed,
                )
            )
        self._forest = _concat_trees(parts)
        self.n_features_ = d
        if spec.bootstrap:
            self.oob_prediction_ = _tree.oob_predict(X, *self._forest, inbag)
        return self

    def _check_fitted(self, X):
        if self._forest is None:
            raise RuntimeError("model is not fitted")
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features_:
            raise ValueError(f"expected {self.n_features_} features, got shape {X.shape}")
        return X

    def predict(self, X) -> np.ndarray:
        return _tree.predict_forest(self._check_fitted(X), *self._forest)

    def predict_trees(self, X) -> np.ndarray:
        return _tree.predict_trees(self._check_fitted(X), *self._forest)

    @property
    def n_trees(self) -> int:
        return 0 if self._forest is None else self._forest[-1].size


def _concat_trees(parts):
    offsets = np.cumsum([0] + [p[0].size for p in parts])
    feature = np.concatenate([p[0] for p in parts])
    threshold = np.concatenate([p[1] for p in parts])
    left = np.concatenate([np.where(p[2] >= 0, p[2] + o, -1) for p, o in zip(parts, offsets)])
    right = np.concatenate([np.where(p[3] >= 0, p[3] + o, -1) for p, o in zip(parts, offsets)])
    value = np.concatenate([p[4] for p in parts])
    roots = offsets[:-1].astype(np.int64)
    return feature, threshold, left, right, value, roots


class KNNRegressor:
    """Mean target of the ``k`` nearest training rows (Euclidean)."""

    def __init__(self, k: int = 5):
        self.k = k
        self._tree = None

    def fit(self, X, y) -> "KNNRegressor":
        X, y = _check_xy(X, y)
        if X.shape[0] < self.k:
            raise DegenerateDataError(f"need at least k={self.k} rows, got {X.shape[0]}")
        self._tree = cKDTree(X)
        self._y = y
        self.n_features_ = X.shape[1]
        return self

    def predict(self, X) -> np.ndarray:
        if self._tree is None:
            raise RuntimeError("model is not fitted")
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features_:
            raise ValueError(f"expected {self.n_features_} features, got shape {X.shape}")
        _, nn = self._tree.query(X, k=self.k)
        nn = nn.reshape(X.shape[0], self.k)
        return self._y[nn].mean(axis=1)


def fit_regressor(X, y, spec: RegressorSpec):
    if spec.kind == KNN:
        return KNNRegressor(spec.k).fit(X, y)
    return RandomForestRegressor(spec).fit(X, y)


def predict(model, X) -> np.ndarray:
    return model.predict(np.atleast_2d(X))


# -- propensity ---------------------------------------------------------------


class LogisticPropensity:
    """L2-penalised logistic regression fitted by Newton/IRLS.

    The intercept is not penalised.  Predictions are clipped to
    ``[clip, 1 - clip]`` so that inverse-propensity weights stay finite.
    """

    def __init__(self, penalty: float = 1.0, clip: float = 0.01, max_iter: int = 100, tol: float = 1e-8):
        if not 0 < clip < 0.5:
            raise ValueError("clip must lie in (0, 0.5)")
        self.penalty = penalty
        self.clip = clip
        self.max_iter = max_iter
        self.tol = tol
        self.intercept_ = None
        self.coef_ = None

    def fit(self, X, w) -> "LogisticPropensity":
        X, w = _check_xy(X, w)
        if not np.all((w == 0) | (w == 1)):
            raise ValueError("treatments must be binary")
        if w.min() == w.max():
            raise DegenerateDataError("both treatment classes must be present")
        Z = np.hstack([np.ones((X.shape[0], 1)), X])
        ridge = np.full(Z.shape[1], self.penalty)
        ridge[0] = 0.0
        beta = np.zeros(Z.shape[1])

        def objective(b):
            eta = Z @ b
            return np.sum(np.logaddexp(0, eta) - w * eta) + 0.5 * np.sum(ridge * b * b)

        self.n_iter_ = 0
        for it in range(self.max_iter):
            p = expit(Z @ beta)
            grad = Z.T @ (w - p) - ridge * beta
            if np.linalg.norm(grad) < self.tol:
                break
            hess = (Z * (p * (1 - p))[:, None]).T @ Z + np.diag(ridge) + 1e-12 * np.eye(Z.shape[1])
            step = np.linalg.solve(hess, grad)
            f0 = objective(beta)
            t = 1.0
            while objective(beta + t * step) > f0 and t > 1e-10:
                t *= 0.5
            beta = beta + t * step
            self.n_iter_ = it + 1
        self.intercept_ = float(beta[0])
        self.coef_ = beta[1:]
        return self

    def predict_proba(self, X) -> np.ndarray:
        if self.coef_ is None:
            raise RuntimeError("model is not fitted")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        p = expit(self.intercept_ + X @ self.coef_)
        return np.clip(p, self.clip, 1 - self.clip)


class OraclePropensity:
    """Pass-through of a known propensity function (synthetic data only)."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray]):
        self.fn = fn

    def predict_proba(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.asarray(self.fn(X), dtype=np.float64).reshape(-1)


class ConstantPropensity(OraclePropensity):
    def __init__(self, value: float):
        if not 0 < value < 1:
            raise ValueError("propensity must lie in (0, 1)")
        self.value = value
        super().__init__(lambda X: np.full(X.shape[0], value))


def fit_propensity(X, w, clip: float = 0.01, penalty: float = 1.0) -> LogisticPropensity:
    return LogisticPropensity(penalty=penalty, clip=clip).fit(X, w)


def predict_proba(model, X) -> np.ndarray:
    return model.predict_proba(X)
