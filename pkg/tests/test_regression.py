import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from rfqi.errors import ConstantColumn, DidNotConverge, NonFiniteInput, SingularGram
from rfqi.regression import (
    LassoFit,
    RegressionProblem,
    SupportSet,
    choose_penalty,
    lasso_fit,
    noise_correlation_quantile,
    ols_full,
    ols_restricted,
    select_penalty,
    soft_threshold,
    standardize,
    threshold_support,
    thresholded_lasso,
    verify_kkt,
)
from rfqi.rng import make_rng


def random_problem(seed, n, p, k=3, noise=0.5):
    rng = make_rng(seed)
    X = rng.standard_normal((n, p))
    w = np.zeros(p)
    idx = rng.choice(p, size=min(k, p), replace=False)
    w[idx] = rng.uniform(0.5, 2.0, size=idx.size) * rng.choice([-1, 1], size=idx.size)
    y = X @ w + noise * rng.standard_normal(n)
    return standardize(RegressionProblem(X, y))[0], w


def orthogonal_design(n, p, seed=0):
    # columns with mean zero and X^T X / n = I
    rng = make_rng(seed)
    A = rng.standard_normal((n, p))
    A -= A.mean(axis=0)
    Q, _ = np.linalg.qr(np.column_stack([np.ones(n), A]))
    return Q[:, 1 : p + 1] * math.sqrt(n)


# -- standardize ------------------------------------------------------------


def test_standardize_two_point_column():
    z, st_ = standardize(RegressionProblem(np.array([[1.0], [3.0]]), np.array([0.0, 1.0])))
    assert z.design[:, 0].tolist() == [-1.0, 1.0]
    assert st_.column_means[0] == 2.0 and st_.column_sds[0] == 1.0


def test_standardize_hand_computed_3x2():
    X = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
    z, _ = standardize(RegressionProblem(X, np.zeros(3)))
    r = math.sqrt(1.5)
    np.testing.assert_allclose(z.design, [[-r, -r], [0, 0], [r, r]], atol=1e-15)


def test_standardize_constant_column():
    with pytest.raises(ConstantColumn) as info:
        standardize(RegressionProblem(np.array([[5.0, 1.0], [5.0, 2.0], [5.0, 4.0]]), np.zeros(3)))
    assert info.value.column == 0


def test_non_finite_rejected():
    with pytest.raises(NonFiniteInput):
        RegressionProblem(np.array([[1.0], [np.nan]]), np.zeros(2))


def test_standardize_centers_response_without_scaling():
    X = make_rng(1).standard_normal((40, 3))
    y = 10 + 3 * X[:, 0]
    z, st_ = standardize(RegressionProblem(X, y))
    assert z.standardized
    np.testing.assert_allclose(z.response, y - y.mean())
    assert st_.response_mean == pytest.approx(y.mean())
    np.testing.assert_array_equal((X - st_.column_means) / st_.column_sds, z.design)


def test_standardized_flag_is_checked():
    with pytest.raises(ValueError):
        RegressionProblem(np.array([[1.0], [2.0], [4.0]]), np.zeros(3), standardized=True)


# -- soft threshold ---------------------------------------------------------


@pytest.mark.parametrize("z,t,expected", [(0.5, 0.2, 0.3), (-0.1, 0.2, 0.0), (0.2, 0.2, 0.0), (-0.7, 0.2, -0.5)])
def test_soft_threshold(z, t, expected):
    assert soft_threshold(z, t) == pytest.approx(expected)


# -- lasso ------------------------------------------------------------------


def test_univariate_closed_form():
    # x standardized, x^T y / n = 0.5
    x = np.array([-1.0, 1.0, -1.0, 1.0])
    y = 0.5 * x
    problem = RegressionProblem(x[:, None], y, standardized=True)
    fit = lasso_fit(problem, 0.2)
    assert fit.coefficients[0] == pytest.approx(0.3, abs=1e-12)
    assert verify_kkt(problem, fit) <= 1e-8


def test_zero_penalty_matches_ols():
    problem, _ = random_problem(3, 120, 8)
    fit = lasso_fit(problem, 0.0, tol=1e-12)
    np.testing.assert_allclose(fit.coefficients, ols_full(problem), atol=1e-6)
    assert verify_kkt(problem, fit) <= 1e-8


def test_penalty_above_max_correlation_gives_zero():
    problem, _ = random_problem(4, 80, 10)
    lam_max = np.max(np.abs(problem.design.T @ problem.response / problem.n))
    fit = lasso_fit(problem, lam_max)
    assert np.all(fit.coefficients == 0)
    assert verify_kkt(problem, fit) == 0.0


def test_did_not_converge_carries_fit():
    problem, _ = random_problem(5, 60, 20, k=10)
    with pytest.raises(DidNotConverge) as info:
        lasso_fit(problem, 1e-3, tol=1e-14, max_iters=2)
    assert info.value.fit.iterations == 2
    assert info.value.fit.max_coef_delta_at_exit > 1e-14


def test_objective_descends():
    problem, _ = random_problem(6, 50, 30, k=5)
    fit = lasso_fit(problem, 0.05, check_descent=True)
    assert fit.objective_trace is not None and len(fit.objective_trace) == fit.iterations
    assert np.all(np.diff(fit.objective_trace) <= 1e-12 * abs(fit.objective_trace[0]))


@settings(max_examples=200, deadline=None)
@given(
    n=st.integers(20, 200),
    p=st.integers(1, 30),
    k=st.integers(0, 10),
    frac=st.floats(0.01, 1.0),
    seed=st.integers(0, 2**32 - 1),
)
def test_kkt_certificate(n, p, k, frac, seed):
    problem, _ = random_problem(seed, n, p, k=k)
    lam_max = np.max(np.abs(problem.design.T @ problem.response / n))
    tol = 1e-8
    fit = lasso_fit(problem, frac * lam_max, tol=tol)
    assert fit.kkt_violation <= 10 * tol


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), p=st.integers(2, 25), lams=st.lists(st.floats(0, 2), min_size=2, max_size=6))
def test_penalty_monotone_l1(seed, p, lams):
    problem, _ = random_problem(seed, 100, p, k=4)
    norms = [np.abs(lasso_fit(problem, lam, tol=1e-12).coefficients).sum() for lam in sorted(lams)]
    assert all(b <= a + 1e-8 for a, b in zip(norms, norms[1:]))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), p=st.integers(1, 20), lam=st.floats(0, 1.5))
def test_orthogonal_design_closed_form(seed, p, lam):
    n = 60
    X = orthogonal_design(n, p, seed)
    y = X @ make_rng(seed, 1).normal(0, 1, p) + make_rng(seed, 2).standard_normal(n)
    y = y - y.mean()
    problem = RegressionProblem(X, y, standardized=True)
    fit = lasso_fit(problem, lam)
    expected = [soft_threshold(z, lam) for z in X.T @ y / n]
    np.testing.assert_allclose(fit.coefficients, expected, atol=1e-6)


def test_full_rank_ols_support_is_everything():
    problem, _ = random_problem(7, 100, 12)
    fit = lasso_fit(problem, 0.0, tol=1e-12)
    assert len(threshold_support(fit, 0.0)) == 12


# -- thresholding and OLS ---------------------------------------------------


def _fit(coef):
    return LassoFit(np.array(coef, dtype=float), 0.1, 1, 0.0)


def test_threshold_support_cases():
    assert threshold_support(_fit([0.5, -0.3, 0.1]), 0.2).indices == (0, 1)
    assert threshold_support(_fit([0.2]), 0.2).indices == ()
    assert threshold_support(_fit([0.0, 1e-300, -2.0, 0.0]), 0.0).indices == (1, 2)


def test_support_set_validation():
    with pytest.raises(ValueError):
        SupportSet((2, 1), 5)
    with pytest.raises(ValueError):
        SupportSet((0, 5), 5)
    assert SupportSet((0, 3), 5).union(SupportSet((1, 3), 5)).indices == (0, 1, 3)


def test_ols_noiseless_exact_recovery():
    X = make_rng(8).standard_normal((50, 6))
    y = 1.5 * X[:, 1] - 2.0 * X[:, 4]
    problem = RegressionProblem(X, y)
    fit = ols_restricted(problem, SupportSet((1, 4), 6))
    np.testing.assert_allclose(fit.coefficients_on_support, [1.5, -2.0], atol=1e-10)
    assert fit.residual_variance <= 1e-16 * (y @ y)


def test_ols_empty_support():
    y = np.array([1.0, -1.0, 2.0])
    fit = ols_restricted(RegressionProblem(np.ones((3, 2)), y), SupportSet((), 2))
    assert fit.coefficients_on_support.size == 0
    np.testing.assert_array_equal(fit.full_coefficients(), [0.0, 0.0])
    assert fit.residual_variance == pytest.approx(2.0)


def test_ols_two_point_hand_solution():
    problem = RegressionProblem(np.array([[1.0], [-1.0]]), np.array([2.0, -2.0]), standardized=True)
    assert ols_restricted(problem, SupportSet((0,), 1)).coefficients_on_support[0] == pytest.approx(2.0)


def test_ols_normal_equations():
    problem, _ = random_problem(9, 90, 10)
    s = SupportSet((0, 2, 5, 7), 10)
    fit = ols_restricted(problem, s)
    Xs = problem.design[:, list(s.indices)]
    r = problem.response - Xs @ fit.coefficients_on_support
    assert np.max(np.abs(Xs.T @ r / problem.n)) <= 1e-8


def test_ols_singular_gram():
    X = make_rng(10).standard_normal((30, 3))
    X = np.column_stack([X, X[:, 0]])
    with pytest.raises(SingularGram):
        ols_restricted(RegressionProblem(X, X[:, 1]), SupportSet((0, 3), 4))


def test_thresholded_lasso_orthogonal_noiseless():
    n, p = 64, 8
    X = orthogonal_design(n, p, 11)
    problem = RegressionProblem(X, 1.0 * X[:, 3], standardized=True)
    for lam, tau in [(0.1, 0.3), (0.45, 0.0), (0.3, 0.39)]:
        support, ols, _ = thresholded_lasso(problem, lam, tau)
        assert support.indices == (3,)
        assert ols.coefficients_on_support[0] == pytest.approx(1.0, abs=1e-10)


def test_thresholded_lasso_everything_penalized_away():
    problem, _ = random_problem(12, 50, 5)
    support, ols, fit = thresholded_lasso(problem, 1e6, 0.0)
    assert len(support) == 0 and np.all(ols.full_coefficients() == 0)


def test_composition_matches_pieces():
    problem, _ = random_problem(13, 150, 20, k=4)
    support, ols, fit = thresholded_lasso(problem, 0.1, 0.2)
    fit2 = lasso_fit(problem, 0.1)
    s2 = threshold_support(fit2, 0.2)
    ols2 = ols_restricted(problem, s2)
    np.testing.assert_array_equal(fit.coefficients, fit2.coefficients)
    assert support == s2
    np.testing.assert_array_equal(ols.coefficients_on_support, ols2.coefficients_on_support)
    assert ols.residual_variance == ols2.residual_variance


# -- data-driven penalty ----------------------------------------------------


def test_noise_quantile_matches_gaussian_max_oracle():
    # For an orthonormal design X^T e / n has iid N(0, 1/n) entries, so the
    # (1 - alpha) quantile of their max absolute value has a closed form.
    n, p, alpha = 400, 50, 0.05
    X = orthogonal_design(n, p, 14)
    z = stats.norm.ppf(0.5 + 0.5 * (1 - alpha) ** (1 / p))
    q = noise_correlation_quantile(X, alpha, 4000, seed=1)
    assert q == pytest.approx(z / math.sqrt(n), rel=0.05)


def test_pure_noise_penalty_band():
    # lambda for pure noise should sit near sqrt(2 log p / n); the mean of ten
    # independent draws is checked against the band.
    n, p = 1000, 50
    ratios = []
    for rep in range(10):
        rng = make_rng(15, rep)
        problem = standardize(RegressionProblem(rng.standard_normal((n, p)), rng.standard_normal(n)))[0]
        ratios.append(select_penalty(problem, seed=rep) / math.sqrt(2 * math.log(p) / n))
    assert 0.8 <= np.mean(ratios) <= 1.3
    assert all(0.7 <= r <= 1.45 for r in ratios)


def test_penalty_scale_homogeneous():
    problem, _ = random_problem(16, 300, 30, k=5, noise=1.0)
    lam1 = select_penalty(problem, seed=3)
    lam2 = select_penalty(RegressionProblem(problem.design, 2 * problem.response, standardized=True), seed=3)
    assert lam2 == pytest.approx(2 * lam1, rel=0.05)


def test_penalty_single_simulation():
    problem, _ = random_problem(17, 100, 10)
    lam = select_penalty(problem, num_sim=1)
    assert math.isfinite(lam) and lam > 0


def test_single_pass_rule_available():
    problem, _ = random_problem(18, 300, 30, k=5, noise=1.0)
    one = choose_penalty(problem, refinements=1, residual="lasso", seed=2)
    q = one.quantile
    fit0 = lasso_fit(problem, 1.1 * one.sigma_initial * q)
    r = problem.response - problem.design @ fit0.coefficients
    assert one.sigma == pytest.approx(math.sqrt(r @ r / problem.n))
    assert one.penalty == pytest.approx(1.1 * one.sigma * q)


def test_iterated_sigma_close_to_truth():
    problem, _ = random_problem(19, 600, 40, k=5, noise=0.6)
    choice = choose_penalty(problem, seed=4)
    assert choice.sigma == pytest.approx(0.6, rel=0.15)
    assert choice.sigma < choice.sigma_initial
