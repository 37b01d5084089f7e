"""Linear moments corrected for a known measurement-error variance.

For regressors ``x*`` linear in an error-prone column ``A* = A + eps``
and instruments ``s*`` also linear in ``A*``,

    E[s* (y - x*' b)] = -sigma^2 E[ds dx'] b,

where ``ds`` and ``dx`` are the derivatives of ``s*`` and ``x*`` with
respect to ``A*``. Adding ``sigma^2 ds (dx' b)`` restores a valid moment,
and the estimator solves ``(S'X - sigma^2 dS'dX) b = S'y``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from civmed.data import Dataset
from civmed.errors import CompositionError
from civmed.gmm import GmmFit, MomentSystem, sandwich_covariance, solve_linear_system
from civmed.terms import Term, evaluate_terms

SIGMA2 = "sigma2"


def corrected_moments(S, X, y, dS, dX, sigma2: float, theta) -> np.ndarray:
    return S * (y - X @ theta)[:, None] + sigma2 * dS * (dX @ theta)[:, None]


def solve_corrected_moments(S, X, y, dS, dX, sigma2: float,
                            labels: Sequence[str]) -> GmmFit:
    """Solve the corrected moments for a fixed ``sigma2``.

    With ``sigma2 = 0`` this is :func:`civmed.gmm.solve_linear_moments`.
    """
    n = S.shape[0]
    C = sigma2 * (dS.T @ dX) / n
    theta = solve_linear_system(S, X, y, correction=C, labels=labels)
    U = corrected_moments(S, X, y, dS, dX, sigma2, theta)
    G = S.T @ X / n - C
    Omega = U.T @ U / n
    return GmmFit(theta=theta, bread_G=G, meat_Omega=Omega,
                  cov=sandwich_covariance(G, Omega), n=n, labels=tuple(labels),
                  residuals=U)


def corrected_system(S, X, y, dS, dX, labels: Sequence[str], *,
                     sigma2: float | None = None,
                     sigma2_label: str = SIGMA2) -> MomentSystem:
    """Corrected moments as a :class:`MomentSystem`.

    With ``sigma2=None`` the variance is the last parameter, labelled
    ``sigma2_label``, so the block can be stacked with the system that
    estimates it. Analytic Jacobians are supplied in both cases.
    """
    n = S.shape[0]
    SX = S.T @ X / n
    dSdX = dS.T @ dX / n
    labels = tuple(labels)
    if sigma2 is not None:
        J = -(SX - sigma2 * dSdX)
        return MomentSystem(
            evaluator=lambda _d, t: corrected_moments(S, X, y, dS, dX, sigma2, t),
            labels=labels, dim_moments=len(labels), jacobian=lambda _d, _t: J)

    d = len(labels)

    def evaluator(_d, params):
        return corrected_moments(S, X, y, dS, dX, params[d], params[:d])

    def jacobian(_d, params):
        return np.hstack([-(SX - params[d] * dSdX), (dSdX @ params[:d])[:, None]])

    return MomentSystem(evaluator=evaluator, labels=labels + (sigma2_label,),
                        dim_moments=d, jacobian=jacobian)


def design_derivative(terms: Sequence[Term], ds: Dataset, name: str) -> np.ndarray:
    """Columns ``d x / d name`` for a design linear in ``name``.

    Raises
    ------
    CompositionError
        A term holds ``name`` at a power above one, where the correction
        would need higher moments of the error.
    """
    cols = []
    for t in terms:
        p = t.power_of(name)
        if p > 1:
            raise CompositionError(
                f"term {t.label!r} is nonlinear in the error-prone {name!r}; the "
                "known-variance correction needs a design linear in it")
        cols.append(t.without(name).evaluate(ds) if p else np.zeros(ds.n))
    return np.column_stack(cols) if cols else np.empty((ds.n, 0))


def corrected_least_squares(ds: Dataset, terms: Sequence[Term], y: np.ndarray, name: str,
                            sigma2: float, labels: Sequence[str] | None = None) -> GmmFit:
    """Least squares with the design cross-product reduced by the error variance.

    Solves ``(X'X - sigma^2 dX'dX) theta = X'y``; for a single error-prone
    regressor ``dX'dX`` is ``n e e'`` with ``e`` its unit vector.
    """
    X = evaluate_terms(terms, ds)
    dX = design_derivative(terms, ds, name)
    labels = tuple(labels) if labels is not None else tuple(t.label for t in terms)
    return solve_corrected_moments(X, X, y, dX, dX, sigma2, labels)
