"""Just-identified moment estimation: linear solves, Newton, sandwich, stacking.

Conventions: for moments ``U_i(theta)`` with ``n`` rows,
``G = mean_i dU_i/dtheta`` (or ``(1/n) S'X`` for the linear case),
``Omega = mean_i U_i U_i'`` and ``cov = G^{-1} Omega G^{-T}`` is the
covariance of ``sqrt(n) (theta_hat - theta)``. Standard errors are
``sqrt(diag(cov) / n)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
import scipy.linalg

from civmed.errors import CompositionError, ConvergenceError, RankError

COND_THRESHOLD = 1e10
TOL = 1e-10
MAX_ITER = 100


@dataclass(frozen=True, eq=False)
class GmmFit:
    """Point estimate with its sandwich ingredients.

    Attributes
    ----------
    theta : ndarray, shape (d,)
    bread_G : ndarray, shape (d, d)
    meat_Omega : ndarray, shape (d, d)
    cov : ndarray, shape (d, d)
        Covariance of ``sqrt(n) (theta_hat - theta)``.
    n : int
    labels : tuple of str
    residuals : ndarray, shape (n, d)
        Per-row moment contributions at ``theta``.
    iterations : int
        Newton iterations used (0 for a direct solve).
    """

    theta: np.ndarray
    bread_G: np.ndarray
    meat_Omega: np.ndarray
    cov: np.ndarray
    n: int
    labels: tuple[str, ...]
    residuals: np.ndarray = field(repr=False)
    iterations: int = 0

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None) / self.n)

    @property
    def vcov(self) -> np.ndarray:
        """Finite-sample covariance of ``theta_hat``."""
        return self.cov / self.n

    @property
    def mean_moments(self) -> np.ndarray:
        return self.residuals.mean(axis=0)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"no parameter labelled {label!r}; have {self.labels}") from None

    def coef(self, label: str) -> float:
        return float(self.theta[self.index(label)])

    def stderr(self, label: str) -> float:
        return float(self.se[self.index(label)])

    def to_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "theta": self.theta.tolist(),
            "se": self.se.tolist(),
            "cov": self.cov.tolist(),
            "n": self.n,
        }


@dataclass(frozen=True, eq=False)
class MomentSystem:
    """Vectorised moment function for a just-identified estimator.

    Parameters
    ----------
    evaluator : callable ``(data, theta) -> ndarray (n, m)``
        Moment contributions for every row at once.
    labels : tuple of str
        Parameter names; their count is ``dim_params``.
    dim_moments : int
        Must equal ``dim_params`` for a system that is solved; blocks
        destined for :func:`stack_moments` may differ.
    jacobian : callable ``(data, theta) -> ndarray (m, d)``, optional
        Mean Jacobian of the moments. Central differences are used when
        absent.
    """

    evaluator: Callable[[Any, np.ndarray], np.ndarray]
    labels: tuple[str, ...]
    dim_moments: int
    jacobian: Callable[[Any, np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(set(self.labels)) != len(self.labels):
            raise CompositionError(f"duplicate parameter labels {self.labels}")

    def require_just_identified(self) -> None:
        """Blocks of a stack may be partial; anything solved must be square."""
        if self.dim_moments != self.dim_params:
            raise CompositionError(
                f"system is not just-identified: {self.dim_moments} moments for "
                f"{self.dim_params} parameters")

    @property
    def dim_params(self) -> int:
        return len(self.labels)

    def moments(self, data, theta) -> np.ndarray:
        U = np.asarray(self.evaluator(data, np.asarray(theta, dtype=float)), dtype=float)
        if U.ndim == 1:
            U = U[:, None]
        if U.shape[1] != self.dim_moments:
            raise CompositionError(
                f"evaluator returned {U.shape[1]} moments, declared {self.dim_moments}")
        return U

    def mean_jacobian(self, data, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if self.jacobian is not None:
            return np.asarray(self.jacobian(data, theta), dtype=float)
        return finite_difference_jacobian(lambda t: self.moments(data, t).mean(axis=0), theta)


def finite_difference_jacobian(fun: Callable[[np.ndarray], np.ndarray],
                               theta: np.ndarray) -> np.ndarray:
    """Central differences with step ``1e-6 * max(1, |theta_j|)``."""
    theta = np.asarray(theta, dtype=float)
    cols = []
    for j in range(theta.size):
        h = 1e-6 * max(1.0, abs(theta[j]))
        up, down = theta.copy(), theta.copy()
        up[j] += h
        down[j] -= h
        cols.append((np.asarray(fun(up)) - np.asarray(fun(down))) / (2 * h))
    return np.column_stack(cols) if cols else np.empty((0, 0))


def _equilibrated_condition(M: np.ndarray) -> float:
    """Condition number after scaling rows and columns to unit max-abs."""
    r = np.max(np.abs(M), axis=1)
    c = np.max(np.abs(M), axis=0)
    if np.any(r == 0) or np.any(c == 0):
        return np.inf
    return float(np.linalg.cond(M / r[:, None] / c[None, :]))


def sandwich_covariance(G: np.ndarray, Omega: np.ndarray) -> np.ndarray:
    """``G^{-1} Omega G^{-T}``, symmetrised.

    Raises
    ------
    RankError
        ``G`` is singular or its equilibrated condition number exceeds 1e10.
    """
    G = np.atleast_2d(np.asarray(G, dtype=float))
    Omega = np.atleast_2d(np.asarray(Omega, dtype=float))
    cond = _equilibrated_condition(G)
    if not np.isfinite(cond) or cond > COND_THRESHOLD:
        raise RankError(f"bread matrix is singular (condition number {cond:.3g})",
                        condition_number=cond)
    left = np.linalg.solve(G, Omega)
    cov = np.linalg.solve(G, left.T).T
    return (cov + cov.T) / 2


def _column_rms(A: np.ndarray) -> np.ndarray:
    return np.sqrt(np.mean(A * A, axis=0))


def solve_linear_system(S: np.ndarray, X: np.ndarray, y: np.ndarray, *,
                        correction: np.ndarray | None = None,
                        labels: Sequence[str] | None = None,
                        cond_threshold: float = COND_THRESHOLD) -> np.ndarray:
    """Solve ``(S'X/n - correction) theta = S'y/n`` with rank checks."""
    S = np.asarray(S, dtype=float)
    X = np.asarray(X, dtype=float)
    n = S.shape[0]
    s_rms = _column_rms(S)
    x_rms = _column_rms(X)
    for kind, rms in (("instrument", s_rms), ("regressor", x_rms)):
        scale = rms.max() if rms.size else 0.0
        tiny = np.flatnonzero(rms <= 1e-12 * max(scale, 1e-300))
        if tiny.size:
            name = labels[tiny[0]] if labels is not None else str(tiny[0])
            raise RankError(f"{kind} column {name!r} is numerically zero",
                            condition_number=np.inf)
    M = S.T @ X / n
    if correction is not None:
        M = M - correction
    scaled = M / s_rms[:, None] / x_rms[None, :]
    cond = float(np.linalg.cond(scaled))
    if not np.isfinite(cond) or cond > cond_threshold:
        raise RankError(
            f"instrument-regressor cross-moment matrix is near singular "
            f"(condition number {cond:.3g} > {cond_threshold:.0e})",
            condition_number=cond)
    Q, R = np.linalg.qr(scaled)
    rhs = (S.T @ y / n) / s_rms
    return scipy.linalg.solve_triangular(R, Q.T @ rhs) / x_rms


def solve_linear_moments(S, X, y, labels: Sequence[str] | None = None,
                         cond_threshold: float = COND_THRESHOLD) -> GmmFit:
    """Solve ``mean_i S_i (y_i - X_i' theta) = 0``.

    Parameters
    ----------
    S, X : ndarray, shape (n, d)
        Instruments and regressors.
    y : ndarray, shape (n,)

    Raises
    ------
    RankError
        ``S'X`` is near singular, reported with its condition number.
    """
    S = np.atleast_2d(np.asarray(S, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if S.shape != X.shape or S.shape[0] != y.size:
        raise CompositionError(
            f"shape mismatch: S {S.shape}, X {X.shape}, y {y.shape}")
    n, d = S.shape
    labels = tuple(labels) if labels is not None else tuple(f"theta{j}" for j in range(d))
    theta = solve_linear_system(S, X, y, labels=labels, cond_threshold=cond_threshold)
    U = S * (y - X @ theta)[:, None]
    G = S.T @ X / n
    Omega = U.T @ U / n
    return GmmFit(theta=theta, bread_G=G, meat_Omega=Omega,
                  cov=sandwich_covariance(G, Omega), n=n, labels=labels, residuals=U)


def linear_moment_system(S, X, y, labels: Sequence[str]) -> MomentSystem:
    """The linear instrumental-variable moments as a :class:`MomentSystem`.

    The ``data`` argument of the evaluator is ignored; the matrices are
    captured.
    """
    S = np.asarray(S, dtype=float)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    G = -(S.T @ X) / S.shape[0]
    return MomentSystem(
        evaluator=lambda _d, t: S * (y - X @ t)[:, None],
        labels=tuple(labels), dim_moments=S.shape[1],
        jacobian=lambda _d, _t: G)


def sandwich_at(system: MomentSystem, data, theta) -> GmmFit:
    """Sandwich inference for ``system`` at a supplied estimate.

    Used when a stacked system's parameters were estimated stage by stage.
    The bread is the mean Jacobian, whose sign does not affect ``cov``.
    """
    system.require_just_identified()
    theta = np.asarray(theta, dtype=float)
    U = system.moments(data, theta)
    n = U.shape[0]
    G = system.mean_jacobian(data, theta)
    Omega = U.T @ U / n
    return GmmFit(theta=theta, bread_G=G, meat_Omega=Omega,
                  cov=sandwich_covariance(G, Omega), n=n, labels=system.labels,
                  residuals=U)


def solve_newton_moments(system: MomentSystem, data, theta0, tol: float = TOL,
                         max_iter: int = MAX_ITER) -> GmmFit:
    """Newton's method with backtracking on ``mean_i U_i(theta) = 0``.

    Stops when the sup-norm of the mean moment is at most ``tol``.

    Raises
    ------
    ConvergenceError
        ``max_iter`` reached; carries the last iterate.
    RankError
        The Jacobian is singular at an iterate.
    """
    system.require_just_identified()
    theta = np.asarray(theta0, dtype=float).copy()
    if theta.shape != (system.dim_params,) or not np.all(np.isfinite(theta)):
        raise CompositionError(
            f"theta0 must be a finite vector of length {system.dim_params}")

    def mean_moment(t):
        return system.moments(data, t).mean(axis=0)

    m = mean_moment(theta)
    norm = np.max(np.abs(m))
    for it in range(max_iter + 1):
        if norm <= tol:
            return _finish(system, data, theta, it)
        if it == max_iter:
            break
        J = system.mean_jacobian(data, theta)
        cond = _equilibrated_condition(J)
        if not np.isfinite(cond) or cond > COND_THRESHOLD:
            raise RankError(f"moment Jacobian is singular at iteration {it} "
                            f"(condition number {cond:.3g})", condition_number=cond)
        step = np.linalg.solve(J, -m)
        lam = 1.0
        while True:
            trial = theta + lam * step
            m_trial = mean_moment(trial)
            norm_trial = np.max(np.abs(m_trial))
            if np.isfinite(norm_trial) and norm_trial < norm or lam < 1e-8:
                break
            lam /= 2
        if not np.isfinite(norm_trial):
            break
        theta, m, norm = trial, m_trial, norm_trial
    raise ConvergenceError(
        f"Newton iterations stopped after {max_iter} steps with mean-moment norm "
        f"{norm:.3g} > {tol:.1e}", last_iterate=theta)


def _finish(system: MomentSystem, data, theta, iterations: int) -> GmmFit:
    fit = sandwich_at(system, data, theta)
    return GmmFit(theta=fit.theta, bread_G=fit.bread_G, meat_Omega=fit.meat_Omega,
                  cov=fit.cov, n=fit.n, labels=fit.labels, residuals=fit.residuals,
                  iterations=iterations)


def stack_moments(systems: Sequence[MomentSystem],
                  shared: Sequence[str] = ()) -> MomentSystem:
    """Concatenate moment systems into one joint system.

    Parameters are matched by label. A label appearing in more than one
    system must be listed in ``shared``; every label in ``shared`` must
    appear in at least two systems.

    Raises
    ------
    CompositionError
        Undeclared overlaps, unused shared declarations, or an
        over/under-identified result.
    """
    shared = set(shared)
    counts: dict[str, int] = {}
    for s in systems:
        for lab in s.labels:
            counts[lab] = counts.get(lab, 0) + 1
    clash = sorted(lab for lab, c in counts.items() if c > 1 and lab not in shared)
    if clash:
        raise CompositionError(
            f"parameter(s) {clash} appear in several systems but are not declared shared")
    unused = sorted(lab for lab in shared if counts.get(lab, 0) < 2)
    if unused:
        raise CompositionError(f"declared shared parameter(s) {unused} are not shared")
    labels = tuple(counts)
    pos = {lab: j for j, lab in enumerate(labels)}
    maps = [np.array([pos[lab] for lab in s.labels], dtype=int) for s in systems]
    offsets = np.cumsum([0] + [s.dim_moments for s in systems])

    def evaluator(data, theta):
        return np.hstack([s.moments(data, theta[idx]) for s, idx in zip(systems, maps)])

    def jacobian(data, theta):
        # Blocks without an analytic Jacobian are differenced on their own.
        J = np.zeros((offsets[-1], len(labels)))
        for k, (s, idx) in enumerate(zip(systems, maps)):
            J[offsets[k]:offsets[k + 1], idx] = s.mean_jacobian(data, theta[idx])
        return J

    return MomentSystem(evaluator=evaluator, labels=labels,
                        dim_moments=int(offsets[-1]), jacobian=jacobian)
