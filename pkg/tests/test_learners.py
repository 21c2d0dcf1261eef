import numpy as np
import pytest
from scipy import stats

from conformal_ite.conformal import ConformityMeasure, SplitCPS, calibrate_scps
from conformal_ite.datagen import DGPSpec, generate
from conformal_ite.distributions import DiscreteCPD, convolve_difference
from conformal_ite.evaluation import coverage, efficiency, ks_uniform, pit_values
from conformal_ite.learners import (
    MC,
    PMC,
    CausalDataset,
    CCTLearner,
    InsufficientDataError,
    ITEInterval,
    NuisancePair,
    PropensityWeights,
    cct_predict,
    cmc_predict,
    combine_bonferroni,
    fit_cct,
    fit_cmc_s,
    fit_cmc_t,
    fit_cmc_x,
    fit_cps_oracle,
    fit_nuisance_t,
    interval,
    monte_carlo_ite,
    naive_wcp_interval,
    naive_wcp_intervals,
    split_by_arm,
)
from conformal_ite.models import ConstantPropensity, OraclePropensity, RegressorSpec
from conformal_ite.rng import stream

RESID = ConformityMeasure.residual()
FAST = RegressorSpec(n_trees=30)


class Const:
    def __init__(self, value):
        self.value = value

    def predict(self, X):
        return np.full(np.atleast_2d(X).shape[0], float(self.value))


def point_cps(value, n_cal=1):
    """Split CPS whose finite support is the single point ``value``."""
    return calibrate_scps(Const(value), None, np.zeros((n_cal, 1)), np.full(n_cal, float(value)), RESID)


def stub_pair(q0: SplitCPS, q1: SplitCPS, propensity=None, weighted=False):
    return NuisancePair(q0, q1, propensity, weighted, np.array([], int), np.array([], int))


class FixedArms:
    """Nuisance stand-in that returns given arm CPDs for every row."""

    def __init__(self, q1, q0):
        self.q1, self.q0 = q1, q0

    def arm_cpds(self, X):
        return ((self.q1, self.q0) for _ in range(np.atleast_2d(X).shape[0]))


def nie(family, n, seed, **kw):
    ds = generate(DGPSpec(family, n=n, seed=seed, **kw))
    return ds, OraclePropensity(ds.propensity_fn)


class TestDataset:
    def test_validation(self):
        with pytest.raises(ValueError):
            CausalDataset(np.zeros((3, 1)), [0, 1], [0, 0, 0])
        with pytest.raises(ValueError):
            CausalDataset(np.zeros((2, 1)), [0, 2], [0, 0])

    def test_weight_kinds(self):
        prop = ConstantPropensity(0.2)
        X = np.zeros((1, 1))
        got = {k: PropensityWeights(prop, k)(X)[0] for k in ("arm1", "arm0", "cf1", "cf0")}
        assert got == pytest.approx({"arm1": 5.0, "arm0": 1.25, "cf1": 4.0, "cf0": 0.25})
        with pytest.raises(ValueError):
            PropensityWeights(prop, "both")

    def test_split_by_arm(self):
        w = np.array([0] * 10 + [1] * 6, dtype=float)
        a, b = split_by_arm(w, 0.5, np.random.default_rng(0))
        assert set(a) | set(b) == set(range(16)) and not set(a) & set(b)
        assert (w[a] == 1).sum() == 3 and (w[a] == 0).sum() == 5


class TestCCT:
    def test_rct_reduction_is_exact(self):
        ds, _ = nie("NieB", 600, 0)
        data = ds.causal()
        weighted = fit_cct(data, ConstantPropensity(0.5), regressor_spec=FAST, seed=3)
        plain = fit_cct(data, None, regressor_spec=FAST, seed=3)
        X = ds.X[:20]
        for (a1, a0), (b1, b0) in zip(weighted.nuisance.arm_cpds(X), plain.nuisance.arm_cpds(X)):
            assert a1 == b1 and a0 == b0
        assert all(a == b for a, b in zip(map(weighted.predict_cpd, X[:5]), map(plain.predict_cpd, X[:5])))

    def test_small_arm_rejected(self):
        rng = np.random.default_rng(0)
        w = np.array([1.0] * 3 + [0.0] * 1000)
        data = CausalDataset(rng.normal(size=(1003, 2)), w, rng.normal(size=1003))
        with pytest.raises(InsufficientDataError):
            fit_cct(data, ConstantPropensity(0.5), regressor_spec=FAST)

    def test_noiseless_effect_concentrates(self):
        rng = np.random.default_rng(1)
        X = rng.random((2000, 2))
        w = (rng.random(2000) < 0.5).astype(float)
        learner = fit_cct(CausalDataset(X, w, w.copy()), ConstantPropensity(0.5), regressor_spec=FAST)
        for x in rng.random((10, 2)):
            iv = interval(cct_predict(learner, x), 0.1)
            assert iv.width < 0.1
            assert 1.0 in iv

    def test_point_masses(self):
        learner = CCTLearner(FixedArms(DiscreteCPD.point_mass(3.0), DiscreteCPD.point_mass(1.0)))
        assert cct_predict(learner, [0.0]) == DiscreteCPD.point_mass(2.0)

    def test_convolution_example(self):
        q1 = DiscreteCPD([2.0, 4.0], [0.4, 0.4], 0.2)
        q0 = DiscreteCPD([1.0], [0.5], 0.5)
        out = CCTLearner(FixedArms(q1, q0)).predict_cpd([0.0])
        np.testing.assert_array_equal(out.support, [1.0, 3.0])
        np.testing.assert_allclose(out.masses, [0.2, 0.2])
        assert out.deferred == pytest.approx(0.6)

    def test_no_deferred_in_no_deferred_out(self):
        q = DiscreteCPD([0.0, 1.0], [0.5, 0.5], 0.0)
        assert CCTLearner(FixedArms(q, q)).predict_cpd([0.0]).deferred == 0.0

    def test_arm_hygiene(self):
        ds, prop = nie("NieA", 400, 2)
        learner = fit_cct(ds.causal(), prop, regressor_spec=FAST, seed=2)
        nu = learner.nuisance
        assert not set(nu.proper_idx) & set(nu.cal_idx)
        assert nu.q1.n_cal == int((ds.w[nu.cal_idx] == 1).sum())
        assert nu.q0.n_cal == int((ds.w[nu.cal_idx] == 0).sum())

    def test_lazy_matches_materialised(self):
        ds, prop = nie("NieD", 300, 4)
        learner = fit_cct(ds.causal(), prop, regressor_spec=FAST, seed=4)
        for x, lazy in zip(ds.X[:5], learner.predict_distributions(ds.X[:5])):
            full = learner.predict_cpd(x)
            for a in (0.05, 0.2):
                assert interval(lazy, a) == interval(full, a)


class TestMonteCarlo:
    def test_point_masses_mc(self):
        pair = stub_pair(point_cps(1.0), point_cps(3.0))
        cal = CausalDataset(np.zeros((4, 1)), [0, 1, 0, 1], [0.0, 0.0, 0.0, 0.0])
        X_rep, ite = monte_carlo_ite(cal, pair, 7, MC, np.random.default_rng(0))
        assert X_rep.shape == (28, 1)
        np.testing.assert_array_equal(ite, 2.0)

    def test_point_mass_pmc(self):
        pair = stub_pair(point_cps(-50.0), point_cps(3.0), ConstantPropensity(0.3), True)
        cal = CausalDataset(np.zeros((1, 1)), [0], [1.0])
        _, ite = monte_carlo_ite(cal, pair, 25, PMC, np.random.default_rng(0))
        np.testing.assert_array_equal(ite, 2.0)

    def test_pmc_treated_rows_use_control_arm(self):
        pair = stub_pair(point_cps(1.5), point_cps(99.0))
        cal = CausalDataset(np.zeros((1, 1)), [1], [4.0])
        _, ite = monte_carlo_ite(cal, pair, 5, PMC, np.random.default_rng(0))
        np.testing.assert_array_equal(ite, 2.5)

    def test_two_point_mean(self):
        q1 = calibrate_scps(Const(0), None, np.zeros((2, 1)), [2.0, 4.0], RESID)
        pair = stub_pair(point_cps(0.0), q1)
        cal = CausalDataset(np.zeros((1, 1)), [0], [0.0])
        _, ite = monte_carlo_ite(cal, pair, 10_000, MC, np.random.default_rng(5))
        assert set(np.unique(ite)) == {2.0, 4.0}
        assert abs(ite.mean() - 3.0) < 0.05

    def test_rows_are_row_major(self):
        pair = stub_pair(point_cps(0.0), point_cps(0.0))
        cal = CausalDataset(np.array([[1.0], [2.0]]), [0, 1], [0.0, 0.0])
        X_rep, _ = monte_carlo_ite(cal, pair, 3, MC, np.random.default_rng(0))
        np.testing.assert_array_equal(X_rep[:, 0], [1, 1, 1, 2, 2, 2])

    def test_bad_arguments(self):
        pair = stub_pair(point_cps(0.0), point_cps(0.0))
        cal = CausalDataset(np.zeros((1, 1)), [0], [0.0])
        with pytest.raises(ValueError):
            monte_carlo_ite(cal, pair, 0, MC, np.random.default_rng(0))
        with pytest.raises(ValueError):
            monte_carlo_ite(cal, pair, 1, "bootstrap", np.random.default_rng(0))

    def test_agrees_with_convolution(self):
        ds, prop = nie("NieB", 2000, 6)
        nu = fit_nuisance_t(ds.causal(), prop, regressor_spec=FAST, seed=6)
        rng = np.random.default_rng(7)
        for x in ds.X[:3]:
            cal = CausalDataset(x[None, :], [0], [0.0])
            _, ite = monte_carlo_ite(cal, nu, 2000, MC, rng)
            q1, q0 = next(nu.arm_cpds(x[None, :]))
            # sampling renormalises the finite parts, so compare to that CDF
            conv = convolve_difference(
                DiscreteCPD(q1.support, q1.masses / q1.finite_mass),
                DiscreteCPD(q0.support, q0.masses / q0.finite_mass),
            )
            ks = stats.kstest(ite, lambda v: conv.cdf(np.asarray(v), 1.0)).statistic
            assert ks < 0.05

    def test_pmc_rct_is_unweighted(self):
        ds, _ = nie("NieB", 500, 8)
        data = ds.causal()
        a = fit_cmc_t(data, ConstantPropensity(0.5), regressor_spec=FAST, mode=PMC, n_mc=20, seed=1)
        b = fit_cmc_t(data, None, regressor_spec=FAST, mode=PMC, n_mc=20, seed=1)
        np.testing.assert_array_equal(a.final_cps.cal_scores, b.final_cps.cal_scores)


class TestCMC:
    def test_t_split_hygiene_and_final_stage(self):
        ds, prop = nie("NieA", 600, 1)
        learner = fit_cmc_t(ds.causal(), prop, regressor_spec=FAST, n_mc=10, seed=1)
        s = learner.splits
        assert not set(s["proper"]) & set(s["calibration"])
        assert learner.final_cps.n_cal == 10 * s["calibration"].size
        np.testing.assert_allclose(learner.predict_cate(ds.X[:5]), learner.nuisance.cate(ds.X[:5]))

    def test_holdout_source_is_disjoint(self):
        ds, prop = nie("NieA", 800, 2)
        learner = fit_cmc_t(ds.causal(), prop, regressor_spec=FAST, n_mc=5, seed=2, mc_source="holdout")
        s = learner.splits
        parts = [set(s["proper"]), set(s["calibration"]), set(s["mc_source"])]
        assert sum(map(len, parts)) == len(set().union(*parts)) == 800
        assert learner.final_cps.n_cal == 5 * len(parts[2])
        with pytest.raises(ValueError):
            fit_cmc_t(ds.causal(), prop, mc_source="elsewhere")

    def test_x_split_hygiene(self):
        ds, prop = nie("NieD", 800, 3)
        learner = fit_cmc_x(ds.causal(), prop, regressor_spec=FAST, n_mc=5, seed=3)
        s = learner.splits
        parts = [set(s[k]) for k in ("proper", "x_regressor", "final_conformal")]
        assert sum(map(len, parts)) == len(set().union(*parts)) == 800
        assert set(s["x_regressor"]) | set(s["final_conformal"]) == set(s["calibration"])

    def test_support_is_cate_plus_offsets(self):
        ds, prop = nie("NieB", 400, 4)
        learner = fit_cmc_t(ds.causal(), prop, measure=RESID, regressor_spec=FAST, n_mc=5, seed=4)
        x = ds.X[:1]
        d = cmc_predict(learner, x)
        np.testing.assert_array_equal(d.support, np.unique(learner.final_cps.cal_scores + learner.predict_cate(x)[0]))
        assert d.deferred == pytest.approx(1 / (learner.final_cps.n_cal + 1))

    def test_zero_error_model_gives_narrow_intervals(self):
        rng = np.random.default_rng(2)
        X = rng.random((1000, 2))
        w = (rng.random(1000) < 0.5).astype(float)
        y = 2 * w
        for fit in (fit_cmc_t, fit_cmc_s):
            learner = fit(CausalDataset(X, w, y), ConstantPropensity(0.5), regressor_spec=FAST, n_mc=20)
            iv = interval(learner.predict_cpd(X[0]), 0.1)
            assert iv.width < 1e-6
            assert iv.lo == pytest.approx(2.0)

    def test_s_learner_ignoring_treatment(self):
        # every x appears once per arm with the same outcome, so a split on w
        # never reduces impurity and the fitted trees never use it
        rng = np.random.default_rng(3)
        X = np.repeat(rng.random((300, 2)), 2, axis=0)
        w = np.tile([0.0, 1.0], 300)
        spec = RegressorSpec(n_trees=5, bootstrap=False, feature_fraction=1.0)
        learner = fit_cmc_s(CausalDataset(X, w, np.sin(6 * X[:, 0])), ConstantPropensity(0.5),
                            regressor_spec=spec, n_mc=5)
        Xt = rng.random((50, 2))
        np.testing.assert_array_equal(learner.nuisance.q0.point(Xt), learner.nuisance.q1.point(Xt))

    def test_s_learner_rct_reduction(self):
        ds, _ = nie("NieB", 500, 5)
        a = fit_cmc_s(ds.causal(), ConstantPropensity(0.5), regressor_spec=FAST, n_mc=10, seed=5)
        b = fit_cmc_s(ds.causal(), None, regressor_spec=FAST, n_mc=10, seed=5)
        np.testing.assert_array_equal(a.final_cps.cal_scores, b.final_cps.cal_scores)

    def test_x_learner_recovers_effect(self):
        rng = np.random.default_rng(4)
        X = rng.random((3000, 2))
        w = (rng.random(3000) < 0.5).astype(float)
        tau = 2 * X[:, 0]
        y = X[:, 1] + w * tau
        learner = fit_cmc_x(CausalDataset(X, w, y), ConstantPropensity(0.5), regressor_spec=FAST, n_mc=20)
        grid = np.column_stack([np.linspace(0.05, 0.95, 50), np.full(50, 0.5)])
        assert np.mean(np.abs(learner.predict_cate(grid) - 2 * grid[:, 0])) < 0.1

    def test_x_learner_agrees_with_t_on_average(self):
        # pointwise agreement is an infinite-data statement; at n = 4000 the
        # two forests differ by ~0.3 per point but agree on average
        ds, prop = nie("NieB", 4000, 0)
        test = generate(DGPSpec("NieB", n=2000, seed=100))
        nu = fit_nuisance_t(ds.causal(), prop, regressor_spec=RegressorSpec(n_trees=50), seed=0)
        t = fit_cmc_t(ds.causal(), prop, nuisance=nu, seed=0)
        x = fit_cmc_x(ds.causal(), prop, nuisance=nu, seed=0, regressor_spec=RegressorSpec(n_trees=50))
        diff = t.predict_cate(test.X) - x.predict_cate(test.X)
        assert abs(diff.mean()) < 0.1

    def test_x_learner_feature_ablation_widens(self):
        widths = []
        for seed in range(3):
            ds, prop = nie("NieA", 3000, seed)
            test = generate(DGPSpec("NieA", n=300, seed=100 + seed))
            nu = fit_nuisance_t(ds.causal(), prop, regressor_spec=RegressorSpec(n_trees=50), seed=seed)
            row = []
            for feats in (None, [2, 3, 4]):
                lr = fit_cmc_x(ds.causal(), prop, regressor_spec=RegressorSpec(n_trees=50), seed=seed,
                               nuisance=nu, cate_features=feats)
                row.append(efficiency([interval(d, 0.1) for d in lr.predict_distributions(test.X)])[0])
            widths.append(row)
        full, reduced = np.mean(widths, axis=0)
        assert reduced > full

    def test_deterministic(self):
        ds, prop = nie("NieC", 500, 6)
        a = fit_cmc_x(ds.causal(), prop, regressor_spec=FAST, n_mc=5, seed=9)
        b = fit_cmc_x(ds.causal(), prop, regressor_spec=FAST, n_mc=5, seed=9)
        np.testing.assert_array_equal(a.final_cps.cal_scores, b.final_cps.cal_scores)

    @pytest.mark.slow
    @pytest.mark.xfail(strict=False, reason="S vs T width ordering on setup D depends on the base regressor; "
                                            "with the bundled forest the two are tied")
    def test_s_not_narrower_than_t_on_unrelated_arms(self):
        ws, wt = [], []
        for seed in range(20):
            ds, prop = nie("NieD", 2000, seed)
            test = generate(DGPSpec("NieD", n=300, seed=1000 + seed))
            spec = RegressorSpec(n_trees=50)
            for fit, acc in ((fit_cmc_s, ws), (fit_cmc_t, wt)):
                lr = fit(ds.causal(), prop, regressor_spec=spec, seed=seed)
                acc.append(efficiency([interval(d, 0.1) for d in lr.predict_distributions(test.X)])[0])
        assert np.mean(ws) >= np.mean(wt)


class TestIntervals:
    def test_uniform_masses(self):
        d = DiscreteCPD(np.arange(1.0, 11.0), np.full(10, 0.1), 0.0)
        assert interval(d, 0.2) == ITEInterval(1.0, 9.0, 0.2)

    def test_point_mass(self):
        iv = interval(DiscreteCPD.point_mass(4.0), 0.1)
        assert (iv.lo, iv.hi, iv.width) == (4.0, 4.0, 0.0)

    def test_heavy_deferred_is_unbounded(self):
        iv = interval(DiscreteCPD([1.0, 2.0], [0.25, 0.25], 0.5), 0.2)
        assert iv.lo == -np.inf and iv.hi == np.inf
        assert not iv.bounded
        assert 1e9 in iv

    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.2, 2.0])
    def test_alpha_domain(self, alpha):
        with pytest.raises(ValueError):
            interval(DiscreteCPD.point_mass(0.0), alpha)

    def test_ordering_invariant(self):
        with pytest.raises(ValueError):
            ITEInterval(2.0, 1.0, 0.1)
        ITEInterval(-np.inf, -5.0, 0.1)

    def test_bonferroni_example(self):
        iv = combine_bonferroni(ITEInterval(5.0, 7.0, 0.05), ITEInterval(1.0, 2.0, 0.05), 0.1)
        assert (iv.lo, iv.hi) == (3.0, 6.0)

    def test_naive_point_masses(self):
        learner = CCTLearner(FixedArms(DiscreteCPD.point_mass(3.0), DiscreteCPD.point_mass(1.0)))
        iv = naive_wcp_interval(learner, [0.0], 0.1)
        assert (iv.lo, iv.hi) == (2.0, 2.0)

    def test_naive_is_wider_than_cct(self):
        ds, prop = nie("NieB", 2000, 7)
        learner = fit_cct(ds.causal(), prop, regressor_spec=FAST, seed=7)
        X = generate(DGPSpec("NieB", n=100, seed=70)).X
        naive = naive_wcp_intervals(learner, X, 0.1)
        cct = [interval(d, 0.1) for d in learner.predict_distributions(X)]
        assert np.mean([a.width for a in naive]) >= np.mean([b.width for b in cct])
        assert naive[0] == naive_wcp_interval(learner, X[0], 0.1)


class TestOracle:
    def test_requires_ground_truth(self):
        with pytest.raises(ValueError):
            fit_cps_oracle(np.zeros((10, 1)), None)
        with pytest.raises(InsufficientDataError):
            fit_cps_oracle(np.zeros((3, 1)), np.zeros(3))
        with pytest.raises(ValueError):
            fit_cps_oracle(np.zeros((10, 1)), np.zeros(9))

    def test_pit_is_uniform(self):
        ds = generate(DGPSpec("NieB", n=12_000, seed=1))
        test = generate(DGPSpec("NieB", n=5000, seed=2))
        cps = fit_cps_oracle(ds.X, ds.ite_true, regressor_spec=FAST, seed=1)
        pit = pit_values(cps.predict_cpds(test.X), test.ite_true, stream(0, "pit"))
        assert ks_uniform(pit) < 0.03

    def test_deterministic_effect_near_zero_width(self):
        rng = np.random.default_rng(0)
        X = rng.random((400, 2))
        cps = fit_cps_oracle(X, np.ones(400), regressor_spec=FAST)
        assert interval(cps.predict_cpd(X[0]), 0.1).width < 1e-9

    def test_coverage_over_seeds(self):
        hits = []
        for seed in range(20):
            ds = generate(DGPSpec("NieB", n=2000, seed=seed))
            test = generate(DGPSpec("NieB", n=500, seed=1000 + seed))
            cps = fit_cps_oracle(ds.X, ds.ite_true, regressor_spec=RegressorSpec(n_trees=50), seed=seed)
            hits.append(coverage([interval(d, 0.1) for d in cps.predict_cpds(test.X)], test.ite_true))
        assert 0.88 <= np.mean(hits) <= 0.93
