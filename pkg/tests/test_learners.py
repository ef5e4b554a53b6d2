import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import expit

from ctmle.learners import (FoldScheme, LearnerError, LearnerSpec, cross_fit, cv_select,
                            fit_learner, make_folds)
from ctmle.learners.glm import SeparationError, fit_glm
from ctmle.learners.hal import HalBasis, hal_lite_basis
from ctmle.learners.lasso import (_solve, default_lambda_grid, fit_lasso_logistic,
                                  kkt_residual, lambda_max, lasso_objective)
from ctmle.learners.splines import NaturalSplineBasis, natural_spline_basis


def newton_oracle(x, y, iters=60):
    """Plain Newton-Raphson on the Bernoulli log-likelihood with an intercept."""
    X = np.column_stack([np.ones(len(y)), x])
    b = np.zeros(X.shape[1])
    for _ in range(iters):
        p = 1 / (1 + np.exp(-X @ b))
        H = X.T @ (X * (p * (1 - p))[:, None])
        b = b + np.linalg.solve(H, X.T @ (y - p))
    return b


def logistic_problem(seed, n=None, p=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(40, 120))
    p = p or int(rng.integers(1, 5))
    x = rng.normal(size=(n, p))
    beta = rng.uniform(-1, 1, p)
    y = rng.binomial(1, expit(0.3 + x @ beta)).astype(float)
    return x, y


def ista_oracle(x, y, lam, iters=100000):
    """Accelerated proximal gradient with an unpenalised intercept."""
    n, p = x.shape
    X = np.column_stack([np.ones(n), x])
    step = 1.0 / (0.25 * np.linalg.norm(X, 2) ** 2 / n)
    b = np.zeros(p + 1)
    z, t = b.copy(), 1.0
    for _ in range(iters):
        grad = X.T @ (expit(X @ z) - y) / n
        nb = z - step * grad
        nb[1:] = np.sign(nb[1:]) * np.maximum(np.abs(nb[1:]) - step * lam, 0.0)
        nt = (1 + np.sqrt(1 + 4 * t * t)) / 2
        z = nb + (t - 1) / nt * (nb - b)
        b, t = nb, nt
    return b


class TestFitGlm:
    def test_intercept_only_half(self):
        fit = fit_glm(np.empty((4, 0)), np.array([0, 1, 0, 1.0]))
        assert fit.coefficients[0] == pytest.approx(0.0, abs=1e-12)

    def test_identity_exact(self):
        x = np.linspace(-1, 2, 9)
        fit = fit_glm(x, x, link="identity")
        np.testing.assert_allclose(fit.coefficients, [0, 1], atol=1e-12)

    def test_fixed_eight_rows(self):
        x = np.array([[0.1], [0.5], [-0.3], [1.2], [-1.0], [0.7], [0.0], [-0.6]])
        y = np.array([0, 1, 0, 1, 1, 0, 1, 0.0])
        fit = fit_glm(x, y)
        np.testing.assert_allclose(fit.coefficients, newton_oracle(x, y), atol=1e-6)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_newton_oracle(self, seed):
        x, y = logistic_problem(seed)
        np.testing.assert_allclose(fit_glm(x, y).coefficients, newton_oracle(x, y), atol=1e-6)

    def test_identity_normal_equations(self, rng):
        x = rng.normal(size=(50, 3))
        y = rng.normal(size=50)
        X = np.column_stack([np.ones(50), x])
        expected = np.linalg.solve(X.T @ X, X.T @ y)
        np.testing.assert_allclose(fit_glm(x, y, link="identity").coefficients, expected,
                                   atol=1e-8)

    def test_offset_is_additive(self, rng):
        x = rng.normal(size=(80, 1))
        y = rng.binomial(1, 0.5, 80).astype(float)
        off = rng.normal(size=80)
        fit = fit_glm(x, y, offset=off)
        p = fit.predict(x, offset=off)
        X = np.column_stack([np.ones(80), x])
        np.testing.assert_allclose(X.T @ (y - p), 0, atol=1e-8)

    def test_separation(self):
        x = np.arange(10.0)
        y = (x > 4.5).astype(float)
        with pytest.raises(SeparationError) as info:
            fit_glm(x, y)
        assert np.max(np.abs(info.value.coefficients)) > 30

    def test_collinear_column_dropped(self, rng):
        x = rng.normal(size=(40, 1))
        y = rng.binomial(1, 0.5, 40).astype(float)
        with pytest.warns(RuntimeWarning, match="collinear"):
            fit = fit_glm(np.column_stack([x, 2 * x]), y)
        assert fit.dropped
        assert np.isfinite(fit.coefficients).all()

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=20))
    def test_logit_predictions_in_unit_interval(self, xs):
        x, y = logistic_problem(3, n=60, p=1)
        fit = fit_glm(x, y)
        p = fit.predict(np.array(xs)[:, None])
        assert np.all((p >= 0) & (p <= 1))


class TestSplines:
    def test_df_one_monotone(self):
        x = np.linspace(0, 5, 50)
        basis = natural_spline_basis(x, df=1)
        assert basis.shape == (50, 1)
        d = np.diff(basis[:, 0])
        assert np.all(d >= 0) or np.all(d <= 0)

    def test_constant_rejected(self):
        with pytest.raises(ValueError):
            natural_spline_basis(np.ones(10), df=2)

    @pytest.mark.parametrize("df", [2, 3, 4])
    def test_full_rank(self, df):
        basis = natural_spline_basis(np.linspace(0, 1, 100), df=df)
        assert np.linalg.matrix_rank(np.column_stack([np.ones(100), basis])) == df + 1

    def test_linear_beyond_boundary(self):
        x = np.linspace(0, 1, 100)
        b = NaturalSplineBasis(3).fit(x)
        far = b.transform(np.array([2.0, 3.0, 4.0]))
        np.testing.assert_allclose(np.diff(far, n=2, axis=0), 0, atol=1e-9)


class TestLasso:
    def test_lambda_max_formula(self, rng):
        x, y = logistic_problem(11, n=60, p=4)
        expected = np.max(np.abs(x.T @ (y - y.mean()))) / len(y)
        assert lambda_max(x, y) == pytest.approx(expected)

    @pytest.mark.parametrize("scale", [1.0, 1.5, 10.0])
    def test_lambda_max_zeroes_slopes(self, scale):
        x, y = logistic_problem(12, n=60, p=4)
        fit = fit_lasso_logistic(x, y, [scale * lambda_max(x, y)])
        assert np.all(fit.coefficients == 0)
        assert fit.intercept == pytest.approx(np.log(y.mean() / (1 - y.mean())), abs=1e-8)

    def test_zero_penalty_matches_glm(self):
        x, y = logistic_problem(13, n=100, p=3)
        fit = fit_lasso_logistic(x, y, [0.0])
        glm = fit_glm(x, y).coefficients
        np.testing.assert_allclose(np.r_[fit.intercept, fit.coefficients], glm, atol=1e-4)

    def test_projected_gradient_oracle(self):
        x, y = logistic_problem(14, n=20, p=5)
        lam = 0.2 * lambda_max(x, y)
        fit = fit_lasso_logistic(x, y, [lam])
        b = ista_oracle(x, y, lam)
        ours = lasso_objective(x, y, fit.intercept, fit.coefficients, lam)
        oracle = lasso_objective(x, y, b[0], b[1:], lam)
        assert abs(ours - oracle) <= 1e-6

    def test_kkt_on_random_problems(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(50):
            n, p = int(rng.integers(30, 300)), int(rng.integers(1, 60))
            x = rng.normal(size=(n, p))
            y = rng.binomial(1, 0.5, n).astype(float)
            lam = default_lambda_grid(x, y)[int(rng.integers(0, 30))]
            fit = fit_lasso_logistic(x, y, [lam])
            worst = max(worst, kkt_residual(x, y, fit.intercept, fit.coefficients, lam))
        assert worst <= 1e-6

    def test_wide_indicator_design(self):
        rng = np.random.default_rng(1)
        x = (rng.uniform(size=(120, 1)) >= np.linspace(0, 1, 600)[None, :]).astype(float)
        y = rng.binomial(1, 0.3 + 0.4 * x[:, 300]).astype(float)
        lam = 0.05 * lambda_max(x, y)
        fit = fit_lasso_logistic(x, y, [lam])
        assert fit.kkt_residual <= 1e-6

    def test_objective_non_increasing(self):
        x, y = logistic_problem(15, n=80, p=10)
        lam = 0.05 * lambda_max(x, y)
        history = []
        _solve(x, y, lam, 0.0, np.zeros(10), record=history)
        assert len(history) > 1
        assert np.all(np.diff(history) <= 1e-15)

    def test_cv_picks_grid_value(self):
        x, y = logistic_problem(16, n=150, p=5)
        grid = default_lambda_grid(x, y, n_lambda=8)
        fit = fit_lasso_logistic(x, y, grid, seed=3)
        assert fit.lam in grid
        assert len(fit.cv_risk) == 8
        assert fit.kkt_residual <= 1e-6

    def test_fractional_response(self, rng):
        x = rng.normal(size=(60, 2))
        y = rng.uniform(size=60)
        fit = fit_lasso_logistic(x, y, [0.01])
        assert fit.kkt_residual <= 1e-6

    def test_errors(self):
        x, y = logistic_problem(17, n=30, p=2)
        with pytest.raises(ValueError):
            fit_lasso_logistic(x, y, [])
        with pytest.raises(ValueError):
            fit_lasso_logistic(x, 2 * y, [0.1])


class TestHal:
    def test_one_covariate_two_knots(self):
        _, basis = hal_lite_basis(np.linspace(0, 1, 50), max_interaction=1, max_knots_per_dim=2)
        assert basis.n_columns == 2

    def test_binary_covariate(self):
        w = np.array([0, 1, 0, 1, 1, 0, 0, 1.0])
        design, _ = hal_lite_basis(w, max_knots_per_dim=5)
        assert design.shape[1] == 1
        np.testing.assert_array_equal(design[:, 0], w)

    def test_two_covariates_order_two(self, rng):
        w = rng.uniform(size=(200, 2))
        _, basis = hal_lite_basis(w, max_interaction=2, max_knots_per_dim=3)
        assert basis.n_columns == 2 * 3 + 3 * 3

    def test_duplicates_removed(self):
        w = np.column_stack([np.arange(10.0), np.arange(10.0)])
        design, _ = hal_lite_basis(w, max_interaction=1, max_knots_per_dim=3)
        assert design.shape[1] == 3

    def test_column_budget(self, rng):
        w = rng.uniform(size=(100, 4))
        with pytest.warns(RuntimeWarning, match="budget"):
            basis = HalBasis(2, 10, max_columns=100).fit(w)
        assert basis.n_columns <= 100

    def test_transform_new_points(self, rng):
        w = rng.uniform(size=(50, 2))
        basis = HalBasis(2, 4).fit(w)
        out = basis.transform(np.array([[-1.0, -1.0], [2.0, 2.0]]))
        assert np.all(out[0] == 0) and np.all(out[1] == 1)


class TestFolds:
    @pytest.mark.parametrize("n,V", [(10, 3), (101, 5), (7, 7)])
    def test_partition(self, n, V):
        folds = make_folds(n, V, seed=1)
        assert sorted(np.concatenate([folds.validation(v) for v in range(V)])) == list(range(n))
        sizes = folds.sizes()
        assert sizes.max() - sizes.min() <= 1

    def test_stratified_balance(self):
        strata = np.r_[np.zeros(50), np.ones(10)]
        folds = make_folds(60, 5, seed=2, strata=strata)
        per_fold = [strata[folds.validation(v)].sum() for v in range(5)]
        assert per_fold == [2] * 5

    def test_bad_v(self):
        with pytest.raises(ValueError):
            make_folds(3, 4)


class TestLearnerSpec:
    def test_parse_round_trip(self):
        spec = LearnerSpec.parse("hal:max_knots=5,max_interaction=1")
        assert spec.get("max_knots") == 5
        assert LearnerSpec.parse(str(spec)) == spec

    def test_sl_candidates(self):
        spec = LearnerSpec.parse("sl:candidates=glm+mean")
        assert [c.name for c in spec.get("candidates")] == ["glm", "mean"]

    def test_unknown(self):
        with pytest.raises(ValueError):
            LearnerSpec.parse("forest")


class TestCvSelect:
    def test_single_candidate(self):
        x, y = logistic_problem(20, n=50, p=2)
        chosen, table = cv_select(["glm"], x, y, make_folds(50, 5, 0))
        assert chosen.name == "glm" and len(table) == 1

    def test_true_model_selected(self):
        wins = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            x = rng.normal(size=(500, 2))
            y = rng.binomial(1, expit(0.2 + x @ [0.8, -0.5])).astype(float)
            chosen, _ = cv_select(["glm", "mean"], x, y, make_folds(500, 5, seed))
            wins += chosen.name == "glm"
        assert wins / 100 > 0.95

    def test_all_fail(self):
        x = np.arange(10.0)[:, None]
        y = (x[:, 0] > 4.5).astype(float)
        with pytest.raises(LearnerError):
            cv_select(["glm"], x, y, make_folds(10, 2, 0))

    def test_tie_goes_to_first(self):
        x, y = logistic_problem(21, n=40, p=1)
        chosen, _ = cv_select(["mean", "mean:tag=1"], x, y, make_folds(40, 4, 0))
        assert str(chosen) == "mean"


class TestCrossFit:
    def test_leave_one_out_structure(self):
        x = np.array([[0.0], [1.0], [2.0]])
        y = np.array([1.0, 2.0, 4.0])
        folds = FoldScheme(3, np.arange(3))
        out = cross_fit("mean", x, y, folds, link="identity")
        np.testing.assert_allclose(out, [3.0, 2.5, 1.5])

    def test_constant_outcome(self, rng):
        x = rng.normal(size=(30, 2))
        out = cross_fit("glm", x, np.full(30, 0.3), make_folds(30, 5, 0), link="identity")
        np.testing.assert_allclose(out, 0.3, atol=1e-12)

    def test_fold_means(self, rng):
        y = rng.normal(size=100)
        folds = make_folds(100, 5, seed=4)
        out = cross_fit("mean", np.zeros((100, 1)), y, folds, link="identity")
        for v in range(5):
            valid = folds.validation(v)
            expected = y[folds.training(v)].mean()
            np.testing.assert_allclose(out[valid], expected, atol=1e-12)

    def test_permutation_invariance(self, rng):
        x = rng.normal(size=(40, 2))
        y = x @ [1.0, -1.0] + rng.normal(size=40)
        folds = make_folds(40, 4, seed=5)
        perm = rng.permutation(40)
        out = cross_fit("glm", x, y, folds, link="identity")
        permuted = cross_fit("glm", x[perm], y[perm], FoldScheme(4, folds.assignment[perm]),
                             link="identity")
        np.testing.assert_allclose(permuted, out[perm], atol=1e-10)

    def test_masked_training(self):
        y = np.array([0.0, 1.0, 0.0, 1.0])
        mask = np.array([True, True, False, False])
        folds = FoldScheme(2, np.array([0, 1, 0, 1]))
        with pytest.raises(LearnerError, match="no eligible"):
            cross_fit("mean", np.zeros((4, 1)), y, FoldScheme(2, np.array([0, 0, 1, 1])),
                      mask=mask)
        out = cross_fit("mean", np.zeros((4, 1)), y, folds, mask=mask)
        np.testing.assert_allclose(out, [1.0, 0.0, 1.0, 0.0])


class TestFitLearner:
    @pytest.mark.parametrize("spec", ["mean", "glm", "spline:df=3", "hal:max_knots=3",
                                      "saturated", "sl:candidates=glm+mean"])
    def test_predictions_in_unit_interval(self, spec, rng):
        x = rng.normal(size=(120, 2))
        y = rng.binomial(1, expit(x[:, 0])).astype(float)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            pred = fit_learner(spec, x, y).predict(x)
        assert pred.shape == (120,)
        assert np.all((pred >= 0) & (pred <= 1))

    def test_saturated_cells(self):
        x = np.array([[0.0], [0.0], [1.0], [1.0]])
        y = np.array([0.2, 0.4, 0.6, 1.0])
        fitted = fit_learner("saturated", x, y)
        np.testing.assert_allclose(fitted.predict(np.array([[0.0], [1.0], [2.0]])),
                                   [0.3, 0.8, 0.55])

    def test_link_override(self, rng):
        x = rng.normal(size=(30, 1))
        y = 3 * x[:, 0] + 1
        fitted = fit_learner("glm:link=identity", x, y)
        np.testing.assert_allclose(fitted.predict(x), y, atol=1e-10)
