import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from civmed.errors import CompositionError, ConvergenceError, RankError
from civmed.gmm import (
    MomentSystem,
    linear_moment_system,
    sandwich_at,
    sandwich_covariance,
    solve_linear_moments,
    solve_newton_moments,
    stack_moments,
)


def regression(rng, n=200, d=3, noise=1.0):
    X = np.column_stack([np.ones(n), rng.standard_normal((n, d - 1))])
    beta = np.arange(1, d + 1, dtype=float)
    y = X @ beta + noise * rng.standard_normal(n)
    return X, y, beta


class TestLinear:
    def test_identity_design(self):
        y = np.array([3.0, -1.0])
        fit = solve_linear_moments(np.eye(2), np.eye(2), y)
        np.testing.assert_allclose(fit.theta, y)

    def test_exact_line(self):
        x = np.array([0.0, 1.0, 2.0, 3.0])
        X = np.column_stack([np.ones(4), x])
        fit = solve_linear_moments(X, X, 1 + 2 * x, labels=["a", "b"])
        np.testing.assert_allclose(fit.theta, [1, 2], atol=1e-12)
        np.testing.assert_allclose(fit.se, 0, atol=1e-12)
        assert fit.coef("b") == pytest.approx(2)

    def test_three_point_line(self):
        X = np.array([[1, 1], [1, 2], [1, 3]], dtype=float)
        fit = solve_linear_moments(X, X, np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(fit.theta, [0, 1], atol=1e-12)

    def test_two_row_iv_hand_inverse(self):
        # S'X = [[2, 3], [3, 4]], inverse [[-4, 3], [3, -2]], S'y = [4, 7].
        S = np.array([[1, 1], [1, 2]], dtype=float)
        X = np.array([[1, 2], [1, 1]], dtype=float)
        fit = solve_linear_moments(S, X, np.array([1.0, 3.0]))
        np.testing.assert_allclose(fit.theta, [5, -2], atol=1e-12)

    def test_hand_iv(self):
        # Two-column IV on four rows; oracle is the textbook (S'X)^{-1} S'y.
        S = np.array([[1, 0], [1, 1], [1, 2], [1, 3]], dtype=float)
        X = np.array([[1, 1], [1, 0], [1, 4], [1, 5]], dtype=float)
        y = np.array([2.0, 1.0, 7.0, 11.0])
        fit = solve_linear_moments(S, X, y)
        np.testing.assert_allclose(fit.theta, np.linalg.solve(S.T @ X, S.T @ y),
                                   rtol=1e-12)
        np.testing.assert_allclose(fit.mean_moments, 0, atol=1e-12)

    def test_hc0_sandwich_matches_closed_form(self, rng):
        X, y, _ = regression(rng)
        fit = solve_linear_moments(X, X, y)
        e = y - X @ fit.theta
        XtX_inv = np.linalg.inv(X.T @ X)
        hc0 = XtX_inv @ (X.T * e ** 2) @ X @ XtX_inv
        np.testing.assert_allclose(fit.vcov, hc0, rtol=1e-10)

    def test_collinear_raises_with_condition(self, rng):
        X, y, _ = regression(rng)
        X = np.column_stack([X, 2 * X[:, 1]])
        with pytest.raises(RankError) as info:
            solve_linear_moments(X, X, y)
        assert info.value.condition_number > 1e10

    def test_zero_instrument_column(self, rng):
        X, y, _ = regression(rng)
        S = X.copy()
        S[:, 2] = 0.0
        with pytest.raises(RankError, match="instrument"):
            solve_linear_moments(S, X, y, labels=["a", "b", "c"])

    def test_shape_mismatch(self):
        with pytest.raises(CompositionError):
            solve_linear_moments(np.ones((3, 2)), np.ones((3, 1)), np.ones(3))

    def test_unknown_label(self, rng):
        X, y, _ = regression(rng)
        with pytest.raises(KeyError):
            solve_linear_moments(X, X, y).coef("nope")

    @settings(max_examples=30, deadline=None)
    @given(st.floats(1e-3, 1e3), st.integers(0, 2))
    def test_instrument_scale_invariance(self, c, col):
        rng = np.random.default_rng(7)
        X, y, _ = regression(rng, n=100)
        S = X.copy()
        S[:, col] *= c
        np.testing.assert_allclose(solve_linear_moments(S, X, y).theta,
                                   solve_linear_moments(X, X, y).theta, rtol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_moments_vanish_and_ols_reduces(self, seed):
        rng = np.random.default_rng(seed)
        X, y, _ = regression(rng, n=50)
        fit = solve_linear_moments(X, X, y)
        assert np.max(np.abs(fit.mean_moments)) <= 1e-10 * max(1, np.abs(y).max())
        ols = np.linalg.lstsq(X, y, rcond=None)[0]
        np.testing.assert_allclose(fit.theta, ols, rtol=1e-8, atol=1e-10)


def test_sandwich_se_matches_bootstrap():
    rng = np.random.default_rng(11)
    n = 500
    x = rng.standard_normal(n)
    X = np.column_stack([np.ones(n), x])
    y = 1 + 2 * x + (1 + np.abs(x)) * rng.standard_normal(n)
    fit = solve_linear_moments(X, X, y)
    draws = np.empty((1000, 2))
    for b in range(1000):
        idx = rng.integers(0, n, n)
        draws[b] = np.linalg.lstsq(X[idx], y[idx], rcond=None)[0]
    ratio = fit.se / draws.std(axis=0, ddof=1)
    assert np.all(np.abs(ratio - 1) < 0.15), ratio


class TestSandwich:
    def test_identity(self):
        np.testing.assert_allclose(sandwich_covariance(np.eye(3), np.eye(3)), np.eye(3))

    def test_scaled(self):
        np.testing.assert_allclose(sandwich_covariance(2 * np.eye(2), 4 * np.eye(2)),
                                   np.eye(2))

    def test_random_against_inverse(self, rng):
        A = rng.standard_normal((4, 4))
        G = A + 4 * np.eye(4)
        B = rng.standard_normal((4, 4))
        Omega = B @ B.T + np.eye(4)
        Ginv = np.linalg.inv(G)
        np.testing.assert_allclose(sandwich_covariance(G, Omega), Ginv @ Omega @ Ginv.T,
                                   rtol=1e-10)

    def test_singular_bread(self):
        with pytest.raises(RankError):
            sandwich_covariance(np.array([[1.0, 1.0], [1.0, 1.0]]), np.eye(2))

    def test_sign_of_bread_irrelevant(self, rng):
        G = rng.standard_normal((3, 3)) + 3 * np.eye(3)
        np.testing.assert_allclose(sandwich_covariance(G, np.eye(3)),
                                   sandwich_covariance(-G, np.eye(3)))


class TestNewton:
    def test_scalar_root(self):
        system = MomentSystem(lambda _d, t: np.full((5, 1), t[0] ** 2 - 4.0), ("t",), 1)
        fit = solve_newton_moments(system, None, [1.0])
        assert fit.theta[0] == pytest.approx(2.0, abs=1e-10)
        assert fit.iterations > 0

    def test_reproduces_linear_solution(self, rng):
        X, y, _ = regression(rng)
        lin = solve_linear_moments(X, X, y, labels=["a", "b", "c"])
        system = MomentSystem(lambda _d, t: X * (y - X @ t)[:, None], ("a", "b", "c"), 3)
        new = solve_newton_moments(system, None, np.zeros(3))
        np.testing.assert_allclose(new.theta, lin.theta, atol=1e-10)
        np.testing.assert_allclose(new.cov, lin.cov, rtol=1e-5)

    def test_partially_linear_against_grid_search(self):
        rng = np.random.default_rng(4)
        n = 400
        z = rng.uniform(-1, 1, n)
        y = 0.5 + 1.0 * z + np.exp(0.8 * z) + 0.1 * rng.standard_normal(n)
        S = np.column_stack([np.ones(n), z, z ** 2])

        def moments(_d, t):
            return S * (y - t[0] - t[1] * z - np.exp(t[2] * z))[:, None]

        fit = solve_newton_moments(MomentSystem(moments, ("a", "b", "c"), 3), None,
                                   [0.0, 0.0, 0.1])

        # Profile out the linear part, then refine the scalar root on grids.
        X = S[:, :2]

        def residual_moment(c):
            r = y - np.exp(c * z)
            ab = np.linalg.solve(S[:, :2].T @ X, S[:, :2].T @ r)
            return np.mean(S[:, 2] * (r - X @ ab)), ab

        lo, hi, step = 0.0, 2.0, 0.1
        while step >= 1e-3:
            grid = np.arange(lo, hi + step / 2, step)
            vals = np.array([abs(residual_moment(c)[0]) for c in grid])
            best = grid[np.argmin(vals)]
            lo, hi, step = best - step, best + step, step / 10
        c_hat = best
        ab = residual_moment(c_hat)[1]
        np.testing.assert_allclose(fit.theta, [*ab, c_hat], atol=5e-3)

    def test_convergence_error_carries_iterate(self):
        system = MomentSystem(lambda _d, t: np.full((3, 1), t[0] ** 2 + 1.0), ("t",), 1)
        with pytest.raises((ConvergenceError, RankError)):
            solve_newton_moments(system, None, [1.0], max_iter=5)

    def test_convergence_error_on_budget(self):
        system = MomentSystem(lambda _d, t: np.full((3, 1), np.arctan(t[0])), ("t",), 1)
        with pytest.raises(ConvergenceError) as info:
            solve_newton_moments(system, None, [0.5], max_iter=1, tol=1e-14)
        assert info.value.last_iterate is not None

    def test_rejects_overidentified(self):
        system = MomentSystem(lambda _d, t: np.zeros((3, 2)), ("t",), 2)
        with pytest.raises(CompositionError):
            solve_newton_moments(system, None, [0.0])

    def test_bad_start(self):
        system = MomentSystem(lambda _d, t: np.zeros((3, 1)), ("t",), 1)
        with pytest.raises(CompositionError):
            solve_newton_moments(system, None, [np.nan])


class TestStack:
    def test_independent_systems_match_separate_fits(self, rng):
        X1, y1, _ = regression(rng, d=2)
        X2, y2, _ = regression(rng, d=3)
        s1 = linear_moment_system(X1, X1, y1, ["a0", "a1"])
        s2 = linear_moment_system(X2, X2, y2, ["b0", "b1", "b2"])
        joint = stack_moments([s1, s2])
        fit = solve_newton_moments(joint, None, np.zeros(5))
        f1 = solve_linear_moments(X1, X1, y1)
        f2 = solve_linear_moments(X2, X2, y2)
        np.testing.assert_allclose(fit.theta, np.r_[f1.theta, f2.theta], atol=1e-9)
        np.testing.assert_allclose(fit.se, np.r_[f1.se, f2.se], rtol=1e-6)

    def test_undeclared_overlap(self, rng):
        X, y, _ = regression(rng, d=2)
        s = linear_moment_system(X, X, y, ["a", "b"])
        with pytest.raises(CompositionError, match="not declared shared"):
            stack_moments([s, s])

    def test_unused_shared(self, rng):
        X, y, _ = regression(rng, d=2)
        s1 = linear_moment_system(X, X, y, ["a", "b"])
        s2 = linear_moment_system(X, X, y, ["c", "d"])
        with pytest.raises(CompositionError, match="not shared"):
            stack_moments([s1, s2], shared=["a"])

    def test_shared_parameter_widens_uncertainty(self, rng):
        # Second block depends on the first block's slope: b = 2 * a1.
        X, y, _ = regression(rng, d=2)
        s1 = linear_moment_system(X, X, y, ["a0", "a1"])
        s2 = MomentSystem(lambda _d, t: np.full((X.shape[0], 1), t[1] - 2 * t[0]),
                          ("a1", "b"), 1)
        joint = stack_moments([s1, s2], shared=["a1"])
        fit = solve_newton_moments(joint, None, np.zeros(3))
        assert fit.coef("b") == pytest.approx(2 * fit.coef("a1"))
        assert fit.stderr("b") == pytest.approx(2 * fit.stderr("a1"), rel=1e-5)

    def test_sandwich_at_agrees_with_direct(self, rng):
        X, y, _ = regression(rng)
        lin = solve_linear_moments(X, X, y, labels=["a", "b", "c"])
        at = sandwich_at(linear_moment_system(X, X, y, ["a", "b", "c"]), None, lin.theta)
        np.testing.assert_allclose(at.cov, lin.cov, rtol=1e-12)
