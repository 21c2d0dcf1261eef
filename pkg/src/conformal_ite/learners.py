"""Conformal meta-learners for individual treatment effects.

* :func:`fit_cct` -- per-arm weighted CPS whose predictive distributions are
  combined by a difference convolution at prediction time.
* :func:`fit_cmc_t`, :func:`fit_cmc_s`, :func:`fit_cmc_x` -- Monte Carlo ITE
  pseudo-targets drawn from per-arm CPS, then an ordinary split CPS around a
  CATE estimator.
* :func:`naive_wcp_interval` and :func:`fit_cps_oracle` -- baselines.

Every learner records the row indices of its splits in ``splits`` so that
split hygiene can be audited.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .conformal import (
    ConformityMeasure,
    SplitCPS,
    calibrate_scps,
    fit_difficulty,
    fit_scps,
)
from .distributions import DifferenceCPD, DiscreteCPD, Tail, convolve_difference
from .models import RegressorSpec, fit_regressor
from .rng import stream

MC = "mc"
PMC = "pmc"

DEFAULT_MEASURE = ConformityMeasure.normalized_residual()


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CausalDataset:
    X: np.ndarray
    w: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if not (X.shape[0] == w.size == y.size):
            raise ValueError("X, w and y must have the same number of rows")
        if not np.all((w == 0) | (w == 1)):
            raise ValueError("w must be binary")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.y.size

    def subset(self, idx) -> "CausalDataset":
        return CausalDataset(self.X[idx], self.w[idx], self.y[idx])


# -- weights -----------------------------------------------------------------------


class PropensityWeights:
    """Likelihood-ratio weights built from a propensity model.

    ``kind`` selects the ratio:

    ``"arm1"``  1 / pi          (treated outcomes, target: all units)
    ``"arm0"``  1 / (1 - pi)    (control outcomes, target: all units)
    ``"cf1"``   (1 - pi) / pi   (treated outcomes, target: control units)
    ``"cf0"``   pi / (1 - pi)   (control outcomes, target: treated units)
    """

    def __init__(self, propensity, kind: str):
        if kind not in ("arm0", "arm1", "cf0", "cf1"):
            raise ValueError(f"unknown weight kind {kind!r}")
        self.propensity = propensity
        self.kind = kind

    def __call__(self, X) -> np.ndarray:
        pi = self.propensity.predict_proba(X)
        if self.kind == "arm1":
            return 1.0 / pi
        if self.kind == "arm0":
            return 1.0 / (1.0 - pi)
        if self.kind == "cf1":
            return (1.0 - pi) / pi
        return pi / (1.0 - pi)


def _weights(propensity, kind, weighted):
    return PropensityWeights(propensity, kind) if weighted and propensity is not None else None


# -- splitting -----------------------------------------------------------------------


def _component_seed(seed: int, component: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(component)]).generate_state(1)[0])


# model component ids for seed derivation
_ARM0, _ARM1, _S_MODEL, _X_MODEL, _ORACLE = 0, 2, 4, 6, 8


def split_by_arm(w: np.ndarray, fraction: float, rng: np.random.Generator, min_per_side: int = 2):
    """Stratified random split: ``fraction`` of each arm goes to the first part."""
    if not 0 < fraction < 1:
        raise ValueError("split fraction must lie in (0, 1)")
    first, second = [], []
    for arm in (0, 1):
        rows = np.flatnonzero(w == arm)
        if rows.size < 2 * min_per_side:
            raise InsufficientDataError(
                f"arm {arm} has {rows.size} rows; need at least {2 * min_per_side} to split"
            )
        rows = rng.permutation(rows)
        k = int(round(fraction * rows.size))
        k = min(max(k, min_per_side), rows.size - min_per_side)
        first.append(rows[:k])
        second.append(rows[k:])
    return np.sort(np.concatenate(first)), np.sort(np.concatenate(second))


# -- nuisance CPS pair ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NuisancePair:
    """Per-arm outcome CPS plus the weight functions used at prediction time."""

    q0: SplitCPS
    q1: SplitCPS
    propensity: object | None
    weighted: bool
    proper_idx: np.ndarray
    cal_idx: np.ndarray

    @property
    def w0(self):
        return _weights(self.propensity, "arm0", self.weighted)

    @property
    def w1(self):
        return _weights(self.propensity, "arm1", self.weighted)

    def arm_cpds(self, X) -> Iterator[tuple[DiscreteCPD, DiscreteCPD]]:
        """Yield ``(Q_Y1(x), Q_Y0(x))`` per row."""
        return zip(self.q1.predict_cpds(X, self.w1), self.q0.predict_cpds(X, self.w0))

    def cate(self, X) -> np.ndarray:
        return self.q1.point(X) - self.q0.point(X)


def fit_nuisance_t(
    data: CausalDataset,
    propensity,
    measure: ConformityMeasure = DEFAULT_MEASURE,
    regressor_spec: RegressorSpec = RegressorSpec(),
    split_fraction: float = 0.5,
    weighted: bool = True,
    seed: int = 0,
) -> NuisancePair:
    """Two arm-specific CPS, each trained on its arm's proper-training rows."""
    proper, cal = split_by_arm(data.w, split_fraction, stream(seed, "split"))
    cps = {}
    for arm, comp in ((0, _ARM0), (1, _ARM1)):
        tr = proper[data.w[proper] == arm]
        ca = cal[data.w[cal] == arm]
        spec = regressor_spec.with_seed(_component_seed(seed, comp))
        cps[arm] = fit_scps((data.X[tr], data.y[tr]), (data.X[ca], data.y[ca]), measure, spec)
    return NuisancePair(cps[0], cps[1], propensity, weighted, proper, cal)


class _ArmView:
    """Fix the treatment column of an S-learner model."""

    def __init__(self, model, arm: int):
        self.model = model
        self.arm = float(arm)

    def predict(self, X):
        X = np.atleast_2d(X)
        return self.model.predict(np.column_stack([X, np.full(X.shape[0], self.arm)]))


def fit_nuisance_s(
    data: CausalDataset,
    propensity,
    measure: ConformityMeasure = DEFAULT_MEASURE,
    regressor_spec: RegressorSpec = RegressorSpec(),
    split_fraction: float = 0.5,
    weighted: bool = True,
    seed: int = 0,
) -> NuisancePair:
    """One model on ``[X, w]``; each arm calibrated on its own rows."""
    proper, cal = split_by_arm(data.w, split_fraction, stream(seed, "split"))
    Xw = np.column_stack([data.X[proper], data.w[proper]])
    spec = regressor_spec.with_seed(_component_seed(seed, _S_MODEL))
    model = fit_regressor(Xw, data.y[proper], spec)
    difficulty = fit_difficulty(Xw, data.y[proper], model, spec) if measure.normalized else None
    cps = {}
    for arm in (0, 1):
        ca = cal[data.w[cal] == arm]
        dm = _ArmView(difficulty, arm) if difficulty is not None else None
        cps[arm] = calibrate_scps(_ArmView(model, arm), dm, data.X[ca], data.y[ca], measure)
    return NuisancePair(cps[0], cps[1], propensity, weighted, proper, cal)


# -- CCT ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CCTLearner:
    nuisance: NuisancePair
    splits: dict = field(default_factory=dict)

    @property
    def propensity(self):
        return self.nuisance.propensity

    def predict_cpd(self, x) -> DiscreteCPD:
        q1, q0 = next(self.nuisance.arm_cpds(np.atleast_2d(x)))
        return convolve_difference(q1, q0)

    def predict_distributions(self, X) -> Iterator[DifferenceCPD]:
        """Lazy ITE distributions; same CDF and quantiles as :meth:`predict_cpd`."""
        for q1, q0 in self.nuisance.arm_cpds(X):
            yield DifferenceCPD(q1, q0)

    def predict_cate(self, X) -> np.ndarray:
        return self.nuisance.cate(X)


def fit_cct(
    data: CausalDataset,
    propensity,
    measure: ConformityMeasure = DEFAULT_MEASURE,
    regressor_spec: RegressorSpec = RegressorSpec(),
    split_fraction: float = 0.5,
    weighted: bool = True,
    seed: int = 0,
) -> CCTLearner:
    nuisance = fit_nuisance_t(data, propensity, measure, regressor_spec, split_fraction, weighted, seed)
    return CCTLearner(nuisance, {"proper": nuisance.proper_idx, "calibration": nuisance.cal_idx})


def cct_predict(learner: CCTLearner, x_test) -> DiscreteCPD:
    return learner.predict_cpd(x_test)


# -- Monte Carlo ITE samples -----------------------------------------------------------


def _inverse_samples(cps: SplitCPS, cum: np.ndarray, X, u) -> np.ndarray:
    """``Q^{-1}(x, u)`` on the renormalised finite support, one row of ``u`` per x."""
    idx = np.minimum(np.searchsorted(cum, u, side="left"), cum.size - 1)
    return cps.point(X)[:, None] + cps.scale(X)[:, None] * cps.sorted_scores[idx]


def monte_carlo_ite(
    cal: CausalDataset,
    nuisance: NuisancePair,
    n_mc: int,
    mode: str,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n_mc`` ITE pseudo-targets per row of ``cal``.

    ``mc``: ``Q1^{-1}(x, u1) - Q0^{-1}(x, u0)`` with the arm weights of the
    nuisance pair.  ``pmc``: the observed outcome fixes one side; untreated
    rows draw their treated outcome with weights ``(1 - pi) / pi`` and treated
    rows draw their control outcome with weights ``pi / (1 - pi)``.

    Deferred mass is redrawn into the finite support.  Returns the covariates
    repeated ``n_mc`` times (row-major) and the matching samples.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    X = cal.X
    q0, q1 = nuisance.q0, nuisance.q1
    if mode == MC:
        cum1 = q1.finite_sampler(nuisance.w1)
        cum0 = q0.finite_sampler(nuisance.w0)
        u1 = rng.random((X.shape[0], n_mc))
        u0 = rng.random((X.shape[0], n_mc))
        ite = _inverse_samples(q1, cum1, X, u1) - _inverse_samples(q0, cum0, X, u0)
    elif mode == PMC:
        u = rng.random((X.shape[0], n_mc))
        ite = np.empty((X.shape[0], n_mc))
        ctrl = cal.w == 0
        trt = ~ctrl
        if ctrl.any():
            cum1 = q1.finite_sampler(_weights(nuisance.propensity, "cf1", nuisance.weighted))
            ite[ctrl] = _inverse_samples(q1, cum1, X[ctrl], u[ctrl]) - cal.y[ctrl, None]
        if trt.any():
            cum0 = q0.finite_sampler(_weights(nuisance.propensity, "cf0", nuisance.weighted))
            ite[trt] = cal.y[trt, None] - _inverse_samples(q0, cum0, X[trt], u[trt])
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return np.repeat(X, n_mc, axis=0), ite.reshape(-1)


# -- CMC learners ------------------------------------------------------------------------


class _CateModel:
    """T/S-learner CATE as a point model: ``mu1(x) - mu0(x)``."""

    def __init__(self, nuisance: NuisancePair):
        self.nuisance = nuisance

    def predict(self, X):
        return self.nuisance.cate(X)


class _CombinedDifficulty:
    """``sqrt(s1(x)^2 + s0(x)^2)`` from the arm difficulty estimates."""

    def __init__(self, nuisance: NuisancePair):
        self.nuisance = nuisance

    def predict(self, X):
        return np.hypot(self.nuisance.q1.scale(X), self.nuisance.q0.scale(X))


def _select(X, features):
    X = np.atleast_2d(X)
    return X if features is None else X[:, list(features)]


@dataclass(frozen=True, eq=False)
class CMCLearner:
    kind: str
    nuisance: NuisancePair
    final_cps: SplitCPS
    cate_estimator: object
    sampling_mode: str
    n_mc: int
    splits: dict = field(default_factory=dict)
    cate_features: tuple | None = None

    def predict_cpd(self, x) -> DiscreteCPD:
        return self.final_cps.predict_cpd(_select(x, self.cate_features))

    def predict_distributions(self, X) -> Iterator[DiscreteCPD]:
        return self.final_cps.predict_cpds(_select(X, self.cate_features))

    def predict_cate(self, X) -> np.ndarray:
        return self.cate_estimator.predict(_select(X, self.cate_features))


def _final_from_samples(point_model, difficulty, X_unique, X_rep, ite, n_mc, measure) -> SplitCPS:
    # models are evaluated on the distinct rows only, then repeated
    loc = np.repeat(point_model.predict(X_unique), n_mc)
    scores = ite - loc
    if measure.normalized:
        scores = scores / np.repeat(np.maximum(difficulty.predict(X_unique), measure.floor), n_mc)
    return SplitCPS(point_model, difficulty, scores, X_rep, measure)


def _fit_cmc_plugin(kind, data, nuisance, n_mc, mode, measure, seed, mc_idx=None) -> CMCLearner:
    if mc_idx is None:
        mc_idx = nuisance.cal_idx
    source = data.subset(mc_idx)
    X_rep, ite = monte_carlo_ite(source, nuisance, n_mc, mode, stream(seed, "mc"))
    cate = _CateModel(nuisance)
    difficulty = _CombinedDifficulty(nuisance) if measure.normalized else None
    final = _final_from_samples(cate, difficulty, source.X, X_rep, ite, n_mc, measure)
    splits = {"proper": nuisance.proper_idx, "calibration": nuisance.cal_idx}
    if mc_idx is not nuisance.cal_idx:
        splits["mc_source"] = mc_idx
    return CMCLearner(kind, nuisance, final, cate, mode, n_mc, splits)


def _holdout_nuisance(fit, data, propensity, measure, regressor_spec, split_fraction, weighted, seed):
    """Fit nuisances on one half of ``data``; the other half is the MC source."""
    tn, mc = split_by_arm(data.w, 0.5, stream(seed, "split", 3))
    nu = fit(data.subset(tn), propensity, measure, regressor_spec, split_fraction, weighted, seed)
    nu = NuisancePair(nu.q0, nu.q1, nu.propensity, nu.weighted, tn[nu.proper_idx], tn[nu.cal_idx])
    return nu, mc


def fit_cmc_t(
    data: CausalDataset,
    propensity,
    measure: ConformityMeasure = DEFAULT_MEASURE,
    regressor_spec: RegressorSpec = RegressorSpec(),
    n_mc: int = 100,
    mode: str = MC,
    split_fraction: float = 0.5,
    weighted: bool = True,
    seed: int = 0,
    nuisance: NuisancePair | None = None,
    mc_source: str = "calibration",
) -> CMCLearner:
    """CMC T-learner.

    With ``mc_source="calibration"`` the nuisance calibration rows double as
    the Monte Carlo source.  ``"holdout"`` instead fits the nuisance CPS on
    one half of the data (split again into proper-training and calibration)
    and draws pseudo-targets on the other half.

    The final CPS is unweighted because pseudo-targets are drawn for every
    source row, i.e. from the marginal covariate distribution.  Pass
    ``nuisance`` to reuse per-arm CPS fitted by :func:`fit_nuisance_t` on the
    same data.
    """
    mc_idx = None
    if nuisance is None:
        if mc_source == "holdout":
            nuisance, mc_idx = _holdout_nuisance(
                fit_nuisance_t, data, propensity, measure, regressor_spec, split_fraction, weighted, seed
            )
        elif mc_source == "calibration":
            nuisance = fit_nuisance_t(data, propensity, measure, regressor_spec, split_fraction, weighted, seed)
        else:
            raise ValueError(f"unknown mc_source {mc_source!r}")
    return _fit_cmc_plugin("t", data, nuisance, n_mc, mode, measure, seed, mc_idx)


def fit_cmc_s(
    data: CausalDataset,
    propensity,
    measure: ConformityMeasure = DEFAULT_MEASURE,
    regressor_spec: RegressorSpec = RegressorSpec(),
    n_mc: int = 100,
    mode: str = MC,
    split_fraction: float = 0.5,
    weighted: bool = True,
    seed: int = 0,
    mc_source: str = "calibration",
) -> CMCLearner:
    mc_idx = None
    if mc_source == "holdout":
        nuisance, mc_idx = _holdout_nuisance(
            fit_nuisance_s, data, propensity, measure, regressor_spec, split_fraction, weighted, seed
        )
    elif mc_source == "calibration":
        nuisance = fit_nuisance_s(data, propensity, measure, regressor_spec, split_fraction, weighted, seed)
    else:
        raise ValueError(f"unknown mc_source {mc_source!r}")
    return _fit_cmc_plugin("s", data, nuisance, n_mc, mode, measure, seed, mc_idx)


def fit_cmc_x(
    data: CausalDataset,
    propensity,
    measure: ConformityMeasure = DEFAULT_MEASURE,
    regressor_spec: RegressorSpec = RegressorSpec(),
    n_mc: int = 100,
    mode: str = MC,
    split_fraction: float = 0.5,
    weighted: bool = True,
    seed: int = 0,
    cate_features=None,
    nuisance: NuisancePair | None = None,
) -> CMCLearner:
    """CMC X-learner.

    The calibration rows are split again: pseudo-targets from the first half
    train an ITE regressor (optionally on ``cate_features`` only), those from
    the second half calibrate the final CPS around it.
    """
    if nuisance is None:
        nuisance = fit_nuisance_t(data, propensity, measure, regressor_spec, split_fraction, weighted, seed)
    cal_idx = nuisance.cal_idx
    reg_pos, conf_pos = split_by_arm(data.w[cal_idx], 0.5, stream(seed, "split", 1), min_per_side=1)
    reg_idx, conf_idx = cal_idx[reg_pos], cal_idx[conf_pos]
    feats = None if cate_features is None else tuple(int(f) for f in cate_features)

    X_rep, ite = monte_carlo_ite(data.subset(reg_idx), nuisance, n_mc, mode, stream(seed, "mc", 1))
    spec = regressor_spec.with_seed(_component_seed(seed, _X_MODEL))
    Z_rep = _select(X_rep, feats)
    ite_model = fit_regressor(Z_rep, ite, spec)
    difficulty = fit_difficulty(Z_rep, ite, ite_model, spec) if measure.normalized else None

    conf = data.subset(conf_idx)
    X_rep2, ite2 = monte_carlo_ite(conf, nuisance, n_mc, mode, stream(seed, "mc", 2))
    final = _final_from_samples(
        ite_model, difficulty, _select(conf.X, feats), _select(X_rep2, feats), ite2, n_mc, measure
    )
    splits = {
        "proper": nuisance.proper_idx,
        "calibration": cal_idx,
        "x_regressor": reg_idx,
        "final_conformal": conf_idx,
    }
    return CMCLearner("x", nuisance, final, ite_model, mode, n_mc, splits, feats)


def cmc_predict(learner: CMCLearner, x_test) -> DiscreteCPD:
    return learner.predict_cpd(x_test)


# -- intervals and baselines --------------------------------------------------------------


@dataclass(frozen=True)
class ITEInterval:
    """Closed interval; ``-inf`` / ``+inf`` mark an unbounded side."""

    lo: float
    hi: float
    alpha: float

    def __post_init__(self):
        if np.isfinite(self.lo) and np.isfinite(self.hi) and self.lo > self.hi:
            raise ValueError("interval lower bound exceeds upper bound")

    @property
    def bounded(self) -> bool:
        return bool(np.isfinite(self.lo) and np.isfinite(self.hi))

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def __contains__(self, value) -> bool:
        return self.lo <= value <= self.hi


def interval(cpd, alpha: float) -> ITEInterval:
    """Equal-tailed interval from the ``alpha/2`` and ``1 - alpha/2`` quantiles."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    lo = cpd.quantile(alpha / 2, Tail.DEFERRED_LOW)
    hi = cpd.quantile(1 - alpha / 2, Tail.DEFERRED_HIGH)
    return ITEInterval(float(lo), float(hi), alpha)


def combine_bonferroni(treated: ITEInterval, control: ITEInterval, alpha: float) -> ITEInterval:
    """``[l1 - u0, u1 - l0]`` from per-arm intervals."""
    return ITEInterval(treated.lo - control.hi, treated.hi - control.lo, alpha)


def naive_wcp_interval(learner: CCTLearner, x_test, alpha: float) -> ITEInterval:
    """Bonferroni combination of per-arm weighted intervals at level ``alpha/2`` each.

    Uses the per-arm CPS of a fitted CCT learner.
    """
    q1, q0 = next(learner.nuisance.arm_cpds(np.atleast_2d(x_test)))
    return combine_bonferroni(interval(q1, alpha / 2), interval(q0, alpha / 2), alpha)


def naive_wcp_intervals(learner: CCTLearner, X, alpha: float) -> list[ITEInterval]:
    return [
        combine_bonferroni(interval(q1, alpha / 2), interval(q0, alpha / 2), alpha)
        for q1, q0 in learner.nuisance.arm_cpds(X)
    ]


def fit_cps_oracle(
    X,
    ite_true,
    measure: ConformityMeasure = DEFAULT_MEASURE,
    regressor_spec: RegressorSpec = RegressorSpec(),
    split_fraction: float = 0.5,
    seed: int = 0,
) -> SplitCPS:
    """Ordinary split CPS regressing the (normally unobservable) true ITE."""
    if ite_true is None:
        raise ValueError("the CPS oracle needs ground-truth ITEs")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    ite_true = np.asarray(ite_true, dtype=np.float64).reshape(-1)
    if ite_true.size != X.shape[0]:
        raise ValueError("ite_true length does not match X")
    n = ite_true.size
    if n < 4:
        raise InsufficientDataError("need at least 4 rows for the oracle split")
    perm = stream(seed, "split").permutation(n)
    k = min(max(int(round(split_fraction * n)), 2), n - 2)
    tr, ca = np.sort(perm[:k]), np.sort(perm[k:])
    spec = regressor_spec.with_seed(_component_seed(seed, _ORACLE))
    return fit_scps((X[tr], ite_true[tr]), (X[ca], ite_true[ca]), measure, spec)
