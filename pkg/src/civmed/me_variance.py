"""Measurement-error variance of a scalar error-prone regressor.

Given a consistent fit of ``E(Y | C1, Z, C2) = g1 + g2 * C1`` and the
observed ``C1* = C1 + eps``, the residual ``r = Y - g1 - g2 C1*`` satisfies
``E[T (C1* r + g2 sigma^2)] = 0`` for any ``T(Z, C2)``, so

    sigma^2 = -mean(T g2)^{-1} mean(T C1* r).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from civmed.data import Dataset, RoleMap
from civmed.errors import (
    BoundaryWarning,
    DomainError,
    IdentificationError,
    PreconditionError,
)
from civmed.gmm import MomentSystem, sandwich_at, stack_moments
from civmed.terms import Term

SIGMA2 = "sigma2"
IDENTIFICATION_TOL = 1e-10


class Reliability(NamedTuple):
    value: float
    valid: bool


def reliability_ratio(sigma2: float, var_observed: float) -> Reliability:
    """``(var_observed - sigma2) / var_observed`` clamped to ``[0, 1]``.

    ``valid`` is False when clamping was needed.
    """
    if not var_observed > 0:
        raise DomainError(f"observed variance must be positive, got {var_observed!r}")
    raw = (var_observed - sigma2) / var_observed
    clamped = min(max(raw, 0.0), 1.0)
    return Reliability(clamped, clamped == raw)


@dataclass(frozen=True)
class MeVarianceEstimate:
    """Estimated ``sigma^2`` with its standard error and implied reliability.

    ``se_joint`` accounts for estimation of the model coefficients; ``se``
    treats them as known.
    """

    sigma2: float
    se: float
    reliability: float
    reliability_valid: bool
    var_observed: float
    t_choice: str
    source_model: str
    n: int
    se_joint: float | None = None
    warnings: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "sigma2": self.sigma2, "se": self.se, "se_joint": self.se_joint,
            "reliability": self.reliability, "reliability_valid": self.reliability_valid,
            "var_observed": self.var_observed, "t_choice": self.t_choice,
            "source_model": self.source_model, "n": self.n,
            "warnings": list(self.warnings),
        }


def _is_g2(T) -> bool:
    return T is None or isinstance(T, str) and T in ("g2", "g2_default")


def _t_values(T, ds: Dataset, g2: np.ndarray) -> tuple[np.ndarray, str]:
    if _is_g2(T):
        return g2, "g2"
    if isinstance(T, str) and T == "one" or isinstance(T, (int, float)) and T == 1:
        return np.ones(ds.n), "one"
    if isinstance(T, (str, Term)):
        term = Term.parse(T)
        return term.evaluate(ds), term.label
    arr = np.asarray(T, dtype=float).reshape(-1)
    if arr.size != ds.n:
        raise PreconditionError(f"T has {arr.size} values for {ds.n} rows")
    return arr, "custom"


def sigma2_moment_system(fitted_model, ds: Dataset, T=None, *,
                         theta_labels=None, sigma2_label: str = SIGMA2) -> MomentSystem:
    """Moments ``T (C1* r + g2 sigma^2)`` in ``(theta, sigma2)``.

    ``theta_labels`` renames the model coefficients for stacking.
    """
    a = ds[fitted_model.error_prone_name]
    y = fitted_model.response(ds)
    fixed_T = None if _is_g2(T) else _t_values(T, ds, None)[0]
    labels = tuple(theta_labels or fitted_model.theta_labels) + (sigma2_label,)

    def evaluator(data, params):
        theta, s2 = params[:-1], params[-1]
        g1, g2 = fitted_model.components_at(data, theta)
        t = g2 if fixed_T is None else fixed_T
        return (t * (a * (y - g1 - g2 * a) + g2 * s2))[:, None]

    return MomentSystem(evaluator=evaluator, labels=labels, dim_moments=1)


def estimate_me_variance(ds: Dataset, roles: RoleMap, fitted_model, T=None, *,
                         joint: bool = False, bounds: tuple[float, float] | None = None,
                         emit_warnings: bool = True) -> MeVarianceEstimate:
    """Estimate ``sigma^2`` from a fitted outcome or mediator model.

    Parameters
    ----------
    fitted_model : OutcomeFit or MediatorFit
        Any object exposing ``components(ds)``, ``response(ds)``,
        ``error_prone_name`` and ``source_model``; joint inference also
        needs ``base_system(ds)``, ``components_at`` and ``theta_labels``.
    T : {"g2", "one"}, term string or array, optional
        Weight function of ``(Z, C2)``; defaults to the fitted ``g2``.
    joint : bool
        Also compute the standard error from the stacked system that
        re-estimates the model coefficients.
    bounds : (low, high), optional
        Sanity range; a warning is raised when the estimate falls outside.

    Raises
    ------
    IdentificationError
        ``|mean(T g2)| < 1e-10``.
    """
    name = fitted_model.error_prone_name
    if name not in roles.error_prone or len(roles.error_prone) != 1:
        raise PreconditionError("variance estimation needs one error-prone column")
    a = ds[name]
    y = fitted_model.response(ds)
    g1, g2 = fitted_model.components(ds)
    t, t_label = _t_values(T, ds, g2)
    r = y - g1 - g2 * a
    G = float(np.mean(t * g2))
    if abs(G) < IDENTIFICATION_TOL:
        raise IdentificationError(
            f"mean(T g2) = {G:.3g} is numerically zero; the error variance is not "
            "identified (the error-prone column has no effect in the fitted model)")
    sigma2 = -float(np.mean(t * a * r)) / G
    U = t * (a * r + g2 * sigma2)
    se = float(np.sqrt(np.mean(U * U) / G ** 2 / ds.n))

    se_joint = None
    if joint:
        system = stack_moments([fitted_model.base_system(ds),
                                sigma2_moment_system(fitted_model, ds, T)],
                               shared=fitted_model.theta_labels)
        params = np.concatenate([fitted_model.theta, [sigma2]])
        se_joint = float(sandwich_at(system, ds, params).se[-1])

    var_obs = float(np.var(a, ddof=1))
    rel = reliability_ratio(sigma2, var_obs)
    notes = []
    spread = se if se_joint is None else max(se, se_joint)
    if sigma2 <= 0 or sigma2 - 1.96 * spread <= 1e-8 * var_obs:
        notes.append(
            f"sigma2 = {sigma2:.4g} is not significantly above 0 (se {spread:.3g}); "
            "its normal approximation is unreliable near the boundary")
    if bounds is not None and not bounds[0] < sigma2 < bounds[1]:
        notes.append(f"sigma2 = {sigma2:.4g} lies outside the bounds {tuple(bounds)}")
    if not rel.valid:
        notes.append("implied reliability outside [0, 1]; clamped")
    if emit_warnings:
        for note in notes:
            warnings.warn(note, BoundaryWarning, stacklevel=2)
    return MeVarianceEstimate(sigma2=sigma2, se=se, reliability=rel.value,
                              reliability_valid=rel.valid, var_observed=var_obs,
                              t_choice=t_label, source_model=fitted_model.source_model,
                              n=ds.n, se_joint=se_joint, warnings=tuple(notes))
