import math

import numpy as np
import pytest

from civmed.constructed_iv import (
    NonlinearPartialModel,
    NuisanceConfig,
    NuisanceFit,
    ate_contrast,
    build_instrument,
    first_stage_f_test,
    fit_constructed_iv,
    fit_nuisance_conditional_mean,
    fit_outcome_linear_iv,
    fit_outcome_partially_linear,
    nuisance_f_test,
)
from civmed.constructed_iv.ftest import f_from_rss
from civmed.constructed_iv.nuisance import make_folds
from civmed.constructed_iv.outcome import CLASSICAL_ONLY, ROBUST, partially_linear_terms
from civmed.data import Dataset, RoleMap
from civmed.errors import (
    CompositionError,
    PreconditionError,
    RankError,
    UnderdeterminedError,
    WeakInstrumentWarning,
)
from civmed.simulation import OUTCOME_ROLES, OutcomeDgpSpec, generate_outcome_dataset
from civmed.terms import Term

ROLES = RoleMap(outcome="Y", error_prone=("C1",), clean_covariates=("C2",),
                exposure_or_mediator="Z")


def linear_truth(rng, n=2000):
    z = rng.standard_normal(n)
    c2 = rng.standard_normal(n)
    c1 = 0.5 + 0.8 * z - 0.3 * c2 + rng.standard_normal(n)
    y = 1 + c1 + z + rng.standard_normal(n)
    return Dataset({"Y": y, "C1": c1, "C2": c2, "Z": z})


@pytest.fixture(scope="module")
def big_outcome():
    return generate_outcome_dataset(OutcomeDgpSpec(n=20000, seed=41)).dataset


class TestNuisance:
    def test_linear_truth_is_recovered_and_flagged_weak(self, rng):
        ds = linear_truth(rng)
        fit = fit_nuisance_conditional_mean(ds, ROLES, NuisanceConfig(basis_degree=2))
        X = np.column_stack([np.ones(ds.n), ds["Z"], ds["C2"]])
        linear = X @ np.linalg.lstsq(X, ds["C1"], rcond=None)[0]
        # Nonlinear terms only fit noise: O(sqrt(p/n)) deviation from the linear fit.
        assert np.sqrt(np.mean((fit.predictions[:, 0] - linear) ** 2)) < 0.1
        (f,) = nuisance_f_test(ds, ROLES, fit.basis_terms)
        assert f.is_weak

    def test_quadratic_truth(self, rng):
        n = 1000
        z = rng.uniform(-2, 2, n)
        ds = Dataset({"Y": rng.standard_normal(n), "C1": z ** 2 + 0.01 * rng.standard_normal(n),
                      "Z": z})
        roles = RoleMap(outcome="Y", error_prone=("C1",), exposure_or_mediator="Z")
        fit = fit_nuisance_conditional_mean(ds, roles, NuisanceConfig(basis_degree=2))
        assert np.sqrt(np.mean((fit.predictions[:, 0] - z ** 2) ** 2)) < 0.05

    def test_crossfit_sentinel_stays_in_its_fold(self, rng):
        ds = linear_truth(rng, n=500)
        cfg = NuisanceConfig(kind="crossfit_nonparametric", K=5, seed=9)
        base = fit_nuisance_conditional_mean(ds, ROLES, cfg)
        c1 = np.array(ds["C1"])
        c1[0] = 1e6
        spiked = fit_nuisance_conditional_mean(ds.with_column("C1", c1), ROLES, cfg)
        folds = base.fold_assignment
        assert np.array_equal(folds, spiked.fold_assignment)
        same = folds == folds[0]
        np.testing.assert_allclose(spiked.predictions[same, 0], base.predictions[same, 0],
                                   rtol=1e-9, atol=1e-9)
        assert np.all(np.abs(spiked.predictions[~same, 0] - base.predictions[~same, 0]) > 1)

    def test_folds_are_balanced_and_seeded(self):
        folds = make_folds(103, 5, seed=1)
        counts = np.bincount(folds)[1:]
        assert counts.max() - counts.min() <= 1
        assert np.array_equal(folds, make_folds(103, 5, seed=1))
        assert not np.array_equal(folds, make_folds(103, 5, seed=2))

    def test_underdetermined(self, rng):
        ds = linear_truth(rng, n=8)
        with pytest.raises(UnderdeterminedError), pytest.warns(UserWarning):
            fit_nuisance_conditional_mean(ds, ROLES, NuisanceConfig(basis_degree=4))

    def test_crossfit_needs_seed(self, rng):
        with pytest.raises(PreconditionError):
            fit_nuisance_conditional_mean(linear_truth(rng), ROLES,
                                          NuisanceConfig(kind="crossfit_nonparametric"))

    def test_variance_is_floored(self, rng):
        ds = linear_truth(rng)
        fit = fit_nuisance_conditional_mean(ds, ROLES, NuisanceConfig(fit_variance=True))
        assert fit.variance_predictions.min() >= 1e-8


class TestBuildInstrument:
    def test_simple_square(self):
        ds = Dataset({"Y": [0.0, 1.0, 0.0], "C1": [3.0, 1.0, 2.0], "Z": [1.0, 2.0, 3.0]})
        roles = RoleMap(outcome="Y", error_prone=("C1",), exposure_or_mediator="Z")
        S = build_instrument(ds, roles, builder="simple", s_terms=["Z^2"])
        np.testing.assert_array_equal(S.S[:, 1], [1, 4, 9])
        np.testing.assert_array_equal(S.S[:, 2], [1, 2, 3])

    def test_simple_rejects_error_prone_source(self, rng):
        from civmed.errors import SchemaError
        with pytest.raises(SchemaError):
            build_instrument(linear_truth(rng), ROLES, builder="simple", s_terms=["C1^2"])

    def test_c1_dependent_constant_variance(self, rng):
        ds = linear_truth(rng, n=50)
        nuis = NuisanceFit(kind="parametric_basis", targets=("C1",),
                           predictions=np.zeros((50, 1)), basis_terms=(Term(),),
                           variance_predictions=np.full((50, 1), 2.0))
        with pytest.raises(RankError, match="heteroscedastic"):
            build_instrument(ds, ROLES, nuis, "c1_dependent")

    def test_c1_dependent_column_has_mean_zero(self, rng):
        n = 400
        z = rng.standard_normal(n)
        c1 = z + np.exp(z / 2) * rng.standard_normal(n)
        ds = Dataset({"Y": c1 + z, "C1": c1, "C2": rng.standard_normal(n), "Z": z})
        nuis = fit_nuisance_conditional_mean(ds, ROLES, NuisanceConfig(fit_variance=True))
        S = build_instrument(ds, ROLES, nuis, "c1_dependent")
        assert S.mean_zero_columns == (1,)
        assert abs(S.S[:, 1].mean()) <= 1e-12 * np.abs(S.S[:, 1]).max()

    def test_efficient_star_unweighted_columns(self, rng):
        ds = linear_truth(rng)
        nuis = fit_nuisance_conditional_mean(ds, ROLES)
        S = build_instrument(ds, ROLES, nuis, "efficient_star")
        expected = np.column_stack([np.ones(ds.n), nuis.predictions[:, 0], ds["C2"], ds["Z"]])
        np.testing.assert_array_equal(S.S, expected)
        assert S.weights is None

    def test_exclusion_instrument_ignores_outcome(self, rng):
        ds = linear_truth(rng)
        perm = ds.with_column("Y", rng.permutation(ds["Y"]))
        for builder in ("efficient_star", "c1_dependent"):
            cfg = NuisanceConfig(fit_variance=True)
            a = build_instrument(ds, ROLES, fit_nuisance_conditional_mean(ds, ROLES, cfg),
                                 builder)
            b = build_instrument(perm, ROLES, fit_nuisance_conditional_mean(perm, ROLES, cfg),
                                 builder)
            assert a.S.tobytes() == b.S.tobytes()

    def test_unknown_builder(self, rng):
        with pytest.raises(PreconditionError):
            build_instrument(linear_truth(rng), ROLES, builder="magic")

    def test_nonlinear_layout_in_error_prone_rejected(self, rng):
        with pytest.raises(CompositionError):
            build_instrument(linear_truth(rng), ROLES, builder="simple",
                             s_terms=["Z^2"], layout=["1", "C1^2", "Z"])


class TestOutcomeFits:
    def test_affine_nuisance_is_rank_deficient(self, rng):
        ds = linear_truth(rng)
        cfg = NuisanceConfig(basis_terms=("1", "Z", "C2"))
        nuis = fit_nuisance_conditional_mean(ds, ROLES, cfg)
        S = build_instrument(ds, ROLES, nuis, "efficient_star")
        with pytest.raises(RankError, match="F test"):
            fit_outcome_linear_iv(ds, ROLES, S)

    def test_raw_design_equals_ols(self, rng):
        ds = linear_truth(rng)
        fit = fit_outcome_linear_iv(ds, ROLES, build_instrument(ds, ROLES, builder="raw_design"))
        X = np.column_stack([np.ones(ds.n), ds["C1"], ds["C2"], ds["Z"]])
        np.testing.assert_allclose(fit.theta, np.linalg.lstsq(X, ds["Y"], rcond=None)[0],
                                   atol=1e-10)

    def test_simple_instrument_recovers_truth(self, big_outcome):
        ds = big_outcome
        S = build_instrument(ds, OUTCOME_ROLES, builder="simple", s_terms=["Z^2"])
        fit = fit_outcome_linear_iv(ds, OUTCOME_ROLES, S)
        assert abs(fit.coef("Z") - 1.5) < 3 * fit.gmm.stderr("Z")
        assert abs(fit.coef("C1") - 2.0) < 3 * fit.gmm.stderr("C1")
        naive = fit_outcome_linear_iv(ds, OUTCOME_ROLES,
                                      build_instrument(ds, OUTCOME_ROLES, builder="raw_design"))
        assert naive.coef("Z") - 1.5 > 10 * naive.gmm.stderr("Z")

    def test_efficient_star_recovers_truth(self, big_outcome):
        fit = fit_constructed_iv(big_outcome, OUTCOME_ROLES)
        assert abs(fit.coef("Z") - 1.5) < 3 * fit.gmm.stderr("Z")
        assert not fit.is_weak

    def test_mu_is_mean_prediction(self, outcome_data):
        fit = fit_constructed_iv(outcome_data, OUTCOME_ROLES, estimate_mu=True)
        t = fit.theta
        expected = np.mean(t[0] + t[1] * outcome_data["C1"])
        assert fit.mu[0] == pytest.approx(expected, rel=1e-12)
        assert fit.mu_se[0] > 0

    def test_partially_linear_nesting(self, outcome_data):
        ds = outcome_data
        terms = partially_linear_terms(OUTCOME_ROLES, ["1", "Z"], ["1"])
        S = build_instrument(ds, OUTCOME_ROLES, builder="simple", s_terms=["Z^2"], layout=terms)
        pl = fit_outcome_partially_linear(ds, OUTCOME_ROLES, {"g1": ["1", "Z"], "g2": ["1"]}, S)
        S_lin = build_instrument(ds, OUTCOME_ROLES, builder="simple", s_terms=["Z^2"])
        lin = fit_outcome_linear_iv(ds, OUTCOME_ROLES, S_lin)
        np.testing.assert_allclose(pl.coef("Z"), lin.coef("Z"), atol=1e-10)
        np.testing.assert_allclose(pl.coef("C1"), lin.coef("C1"), atol=1e-10)

    def test_grid_at_zero_matches_estimate_mu(self, outcome_data):
        ds = outcome_data
        S = build_instrument(ds, OUTCOME_ROLES, builder="simple", s_terms=["Z^2"])
        lin = fit_outcome_linear_iv(ds, OUTCOME_ROLES, S, estimate_mu=True)
        terms = partially_linear_terms(OUTCOME_ROLES, ["1", "Z"], ["1"])
        S2 = build_instrument(ds, OUTCOME_ROLES, builder="simple", s_terms=["Z^2"],
                              layout=terms)
        pl = fit_outcome_partially_linear(ds, OUTCOME_ROLES, {"g1": ["1", "Z"], "g2": ["1"]},
                                          S2, z_grid=[0.0])
        assert abs(pl.mu[0] - lin.mu[0]) < 1e-10
        assert pl.mu_labels == ("mu(z=0)",)

    def test_interaction_model_recovery(self):
        rng = np.random.default_rng(77)
        n = 20000
        c1 = 2 + rng.standard_normal(n)
        z = c1 ** 2 + rng.standard_normal(n)
        y = 1 + 1.5 * z + (2 + 0.5 * z) * c1 + rng.standard_normal(n)
        ds = Dataset({"Y": y, "Z": z, "C1": c1 + math.sqrt(3 / 7) * rng.standard_normal(n)})
        terms = partially_linear_terms(OUTCOME_ROLES, ["1", "Z"], ["1", "Z"])
        nuis = fit_nuisance_conditional_mean(ds, OUTCOME_ROLES)
        S = build_instrument(ds, OUTCOME_ROLES, nuis, "efficient_star", terms)
        fit = fit_outcome_partially_linear(ds, OUTCOME_ROLES,
                                           {"g1": ["1", "Z"], "g2": ["1", "Z"]}, S)
        truth = {"1": 1.0, "Z": 1.5, "C1": 2.0, "C1*Z": 0.5}
        for label, value in truth.items():
            assert abs(fit.coef(label) - value) < 3 * fit.gmm.stderr(label), label

    def test_nonlinear_newton_path(self, big_outcome):
        ds = big_outcome
        model = NonlinearPartialModel(
            g1=lambda d, t: t[0] + t[1] * d["Z"], g2=lambda d, t: np.full(d.n, t[0]),
            labels1=("a", "b"), labels2=("c",), theta0=(0.0, 1.0, 1.0))
        S = build_instrument(ds, OUTCOME_ROLES, builder="simple", s_terms=["Z^2"])
        fit = fit_outcome_partially_linear(ds, OUTCOME_ROLES, model, S, z_grid=[1.0, 2.0])
        lin = fit_outcome_linear_iv(ds, OUTCOME_ROLES, S)
        expected = [lin.coef("1"), lin.coef("Z"), lin.coef("C1")]
        np.testing.assert_allclose(fit.theta, expected, atol=1e-8)
        np.testing.assert_allclose(fit.mu[1] - fit.mu[0], fit.theta[1], rtol=1e-10)
        with pytest.raises(PreconditionError, match="dose-response"):
            ate_contrast(fit, 2, 1)

    def test_trust_labels(self, outcome_data):
        fit = fit_constructed_iv(outcome_data, OUTCOME_ROLES)
        assert fit.trust["Z"] == ROBUST
        assert fit.trust["C1"] == CLASSICAL_ONLY
        assert fit.trust["1"] == CLASSICAL_ONLY


@pytest.fixture(scope="module")
def fit(outcome_data):
    return fit_constructed_iv(outcome_data, OUTCOME_ROLES)


class TestAteContrast:
    def test_unit(self, fit):
        assert ate_contrast(fit, 2, 1)["estimate"] == pytest.approx(fit.coef("Z"))

    def test_null(self, fit):
        assert ate_contrast(fit, 3, 3) == {"estimate": 0.0, "se": 0.0}

    def test_linearity(self, fit):
        one, two = ate_contrast(fit, 2, 1), ate_contrast(fit, 3, 1)
        assert two["estimate"] == pytest.approx(2 * one["estimate"])
        assert two["se"] == pytest.approx(2 * one["se"])

    def test_interaction_layout_refused(self, outcome_data):
        roles = RoleMap(outcome="Y", error_prone=("C1",), exposure_or_mediator="Z")
        S = build_instrument(outcome_data, roles, builder="simple", s_terms=["Z^2"],
                             layout=["1", "C1", "Z", "C1*Z"])
        with pytest.raises(PreconditionError):
            ate_contrast(fit_outcome_linear_iv(outcome_data, roles, S), 1, 0)


class TestFTest:
    def test_hand_instance(self):
        z = np.array([-2.0, -1.0, 0.0, 1.0, 2.0, 3.0])
        c1 = np.array([4.1, 0.9, 0.2, 1.3, 3.8, 9.4])
        ds = Dataset({"Y": np.zeros(6), "C1": c1, "Z": z})
        roles = RoleMap(outcome="Y", error_prone=("C1",), exposure_or_mediator="Z")
        res = first_stage_f_test(ds, roles, ["Z"], ["Z", "Z^2"])

        def rss(X):
            beta = np.linalg.solve(X.T @ X, X.T @ c1)
            r = c1 - X @ beta
            return r @ r

        X0 = np.column_stack([np.ones(6), z])
        X1 = np.column_stack([X0, z ** 2])
        expected = (rss(X0) - rss(X1)) / (rss(X1) / 3)
        assert res.f_statistic == pytest.approx(expected, rel=1e-12)
        assert (res.df_num, res.df_den) == (1, 3)
        assert not res.is_weak

    def test_duplicate_column(self, rng):
        ds = linear_truth(rng, n=100)
        ds = ds.with_column("Z2", 2 * ds["Z"])
        roles = RoleMap(outcome="Y", error_prone=("C1",), clean_covariates=("C2", "Z2"),
                        exposure_or_mediator="Z")
        with pytest.raises(RankError):
            first_stage_f_test(ds, roles, ["Z"], ["Z", "Z2"])

    def test_not_nested(self, rng):
        with pytest.raises(CompositionError):
            first_stage_f_test(linear_truth(rng, n=100), ROLES, ["Z", "C2"], ["Z", "Z^2"])

    def test_weak_threshold(self):
        f, p, weak = f_from_rss(103.4, 100.0, 1, 100)
        assert f == pytest.approx(3.4)
        assert weak and 0 < p < 1

    def test_weak_warning_from_fit(self, rng):
        with pytest.warns(WeakInstrumentWarning):
            try:
                fit_constructed_iv(linear_truth(rng), ROLES)
            except RankError:
                pass
