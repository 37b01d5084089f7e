"""Mediator models ``E{b(Z) | A, C} = h1(C; beta1) + h2(C; beta2) A`` under exposure error.

Three fitting methods share one design ``x = [W1, A* W2]``:

``naive_ols``
    least squares on the error-prone exposure;
``constructed_iv``
    instruments ``[W1, E(A*|C) W2]`` from a nonlinear fit of ``A*`` on ``C``;
``gmm_sigma_corrected``
    instruments ``S1(C) + S2(C) A*`` with the known-variance correction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from civmed.constructed_iv.ftest import FTestResult, nuisance_f_test
from civmed.constructed_iv.instruments import InstrumentMatrix, build_instrument
from civmed.constructed_iv.nuisance import (
    NuisanceConfig,
    fit_nuisance_conditional_mean,
    polynomial_basis,
    standardized_basis_matrix,
)
from civmed.data import Dataset, RoleMap
from civmed.errors import (
    CompositionError,
    ConditioningError,
    NegativeVarianceError,
    PreconditionError,
    SchemaError,
    WeakInstrumentWarning,
)
from civmed.gmm import GmmFit, MomentSystem, linear_moment_system, solve_linear_moments
from civmed.mediation.correction import corrected_system, solve_corrected_moments
from civmed.terms import Term, evaluate_terms, parse_terms

METHODS = ("naive_ols", "constructed_iv", "gmm_sigma_corrected")
MODES = ("simplified", "plugin_optimal")
D_FLOOR = 1e-8
MOMENT_FLOOR = 1e-3
MAX_FLOORED_FRACTION = 0.01


@dataclass(frozen=True)
class MediatorModelSpec:
    """Mediator model shape.

    Parameters
    ----------
    b_terms : tuple of str
        Transformations of the mediator modelled separately, e.g. ``("Z",)``
        or ``("Z", "Z^2")``.
    h1_terms, h2_terms : tuple of str
        Bases in the clean covariates for the intercept function ``h1`` and
        the exposure slope ``h2``.
    k_star : int, optional
        Number of outcome-model terms not multiplied by the exposure; kept
        for reporting, derived from the outcome layout when unset.
    """

    b_terms: tuple[str, ...] = ("Z",)
    h1_terms: tuple[str, ...] = ("1",)
    h2_terms: tuple[str, ...] = ("1",)
    k_star: int | None = None

    def __post_init__(self):
        for name in ("b_terms", "h1_terms", "h2_terms"):
            value = getattr(self, name)
            if isinstance(value, str):
                value = tuple(v.strip() for v in value.split(",") if v.strip())
            object.__setattr__(self, name, tuple(Term.parse(v).label for v in value))

    @classmethod
    def default(cls, roles: RoleMap, quadratic: bool = False) -> "MediatorModelSpec":
        z = roles.exposure_or_mediator
        b = (z, f"{z}^2") if quadratic else (z,)
        h2 = ("1",) + ((roles.moderator,) if roles.moderator else ())
        return cls(b_terms=b, h1_terms=("1",) + tuple(roles.clean_covariates), h2_terms=h2)

    def design_terms(self, exposure: str) -> tuple[Term, ...]:
        a = Term.of(exposure)
        h1 = parse_terms(self.h1_terms)
        h2 = parse_terms(self.h2_terms)
        return h1 + tuple(t.times(a) for t in h2)

    def validate(self, roles: RoleMap) -> None:
        z = roles.exposure_or_mediator
        for b in self.b_terms:
            if set(Term.parse(b).columns) != {z}:
                raise SchemaError(f"b term {b!r} must be a power of the mediator {z!r}")
        allowed = set(roles.clean_covariates)
        for t in self.h1_terms + self.h2_terms:
            bad = [c for c in Term.parse(t).columns if c not in allowed]
            if bad:
                raise SchemaError(f"h term {t!r} uses {bad}; only clean covariates allowed")
        if len(set(self.b_terms)) != len(self.b_terms):
            raise CompositionError("repeated b terms")

    def to_dict(self) -> dict:
        return {"b_terms": list(self.b_terms), "h1_terms": list(self.h1_terms),
                "h2_terms": list(self.h2_terms), "k_star": self.k_star}


@dataclass(frozen=True, eq=False)
class MediatorInstrument:
    """Instrument pair evaluated per row; the instrument is ``S1 + S2 A*``."""

    S1: np.ndarray
    S2: np.ndarray
    mode: str
    beta: np.ndarray | None = None
    iterations: int = 0
    floored_rows: int = 0

    def __iter__(self):
        return iter((self.S1, self.S2))


@dataclass(frozen=True, eq=False)
class MediatorBlock:
    """Matrices of one ``b_k`` fit, kept for stacking and inference."""

    b: str
    S: np.ndarray
    X: np.ndarray
    y: np.ndarray
    dS: np.ndarray
    dX: np.ndarray
    labels: tuple[str, ...]


@dataclass(frozen=True, eq=False)
class MediatorFit:
    """One :class:`GmmFit` per ``b_k`` with coefficient blocks ``beta1, beta2``."""

    fits: dict[str, GmmFit]
    blocks: dict[str, MediatorBlock]
    method: str
    spec: MediatorModelSpec
    roles: RoleMap
    sigma2_used: float | None = None
    mode: str | None = None
    f_tests: tuple[FTestResult, ...] = ()

    source_model = "mediator"

    @property
    def primary(self) -> str:
        return self.spec.b_terms[0]

    @property
    def error_prone_name(self) -> str:
        return self.roles.error_prone[0]

    @property
    def theta_labels(self) -> tuple[str, ...]:
        return self.fits[self.primary].labels

    @property
    def theta(self) -> np.ndarray:
        return self.fits[self.primary].theta

    @property
    def n_h1(self) -> int:
        return len(self.spec.h1_terms)

    def beta1(self, b: str | None = None) -> np.ndarray:
        return self.fits[b or self.primary].theta[:self.n_h1]

    def beta2(self, b: str | None = None) -> np.ndarray:
        return self.fits[b or self.primary].theta[self.n_h1:]

    def response(self, ds: Dataset) -> np.ndarray:
        return Term.parse(self.primary).evaluate(ds)

    def components_at(self, ds: Dataset, beta) -> tuple[np.ndarray, np.ndarray]:
        W1 = evaluate_terms(parse_terms(self.spec.h1_terms), ds)
        W2 = evaluate_terms(parse_terms(self.spec.h2_terms), ds)
        return W1 @ beta[:self.n_h1], W2 @ beta[self.n_h1:]

    def components(self, ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
        return self.components_at(ds, self.theta)

    def predict(self, ds: Dataset, exposure_value, b: str | None = None) -> np.ndarray:
        """``E{b(Z) | A = exposure_value, C}`` per row."""
        beta = self.fits[b or self.primary].theta
        h1, h2 = self.components_at(ds, beta)
        return h1 + h2 * exposure_value

    def base_system(self, ds: Dataset) -> MomentSystem:
        blk = self.blocks[self.primary]
        sigma2 = self.sigma2_used or 0.0
        return corrected_system(blk.S, blk.X, blk.y, blk.dS, blk.dX, blk.labels,
                                sigma2=sigma2)

    def to_dict(self) -> dict:
        return {
            "method": self.method, "mode": self.mode, "sigma2_used": self.sigma2_used,
            "spec": self.spec.to_dict(),
            "fits": {b: f.to_dict() for b, f in self.fits.items()},
            "f_tests": [f.to_dict() for f in self.f_tests],
        }


def _bases(ds: Dataset, spec: MediatorModelSpec):
    W1 = evaluate_terms(parse_terms(spec.h1_terms), ds)
    W2 = evaluate_terms(parse_terms(spec.h2_terms), ds)
    return W1, W2


def _conditional_fit(B: np.ndarray, target: np.ndarray) -> np.ndarray:
    return B @ np.linalg.lstsq(B, target, rcond=None)[0]


def _covariate_basis(ds: Dataset, roles: RoleMap, degree: int) -> np.ndarray:
    terms = polynomial_basis(ds, list(roles.clean_covariates), degree)
    return standardized_basis_matrix(ds, terms)


def _weighted_fit(B: np.ndarray, target: np.ndarray, w: np.ndarray) -> np.ndarray:
    r = np.sqrt(w)
    return B @ np.linalg.lstsq(B * r[:, None], target * r, rcond=None)[0]


def residual_moments(B: np.ndarray, a: np.ndarray, D2: np.ndarray) -> dict:
    """``E(D^2|C)``, ``E(D^2 A*|C)`` and ``E(D^2 A*^2|C)`` on the basis ``B``.

    The last two are written as ``E(D^2|C)`` times the ``D^2``-weighted
    conditional mean and second moment of ``A*``, with the weighted
    variance floored, so the fitted moments obey Cauchy-Schwarz and the
    determinant ``d(C)`` stays positive at ``sigma^2 = 0``.
    """
    ed2 = np.maximum(_conditional_fit(B, D2), MOMENT_FLOOR * D2.mean())
    w = np.maximum(D2, MOMENT_FLOOR * D2.mean())
    m = _weighted_fit(B, a, w)
    v = np.maximum(_weighted_fit(B, (a - m) ** 2, w), MOMENT_FLOOR * np.var(a))
    return {"ED2": ed2, "ED2A": ed2 * m, "ED2A2": ed2 * (v + m * m)}


def exposure_moments(B: np.ndarray, a: np.ndarray) -> dict:
    """``E(A*|C)`` and ``E(A*^2|C)`` with a floored conditional variance."""
    ea = _conditional_fit(B, a)
    var = np.maximum(_conditional_fit(B, (a - ea) ** 2), MOMENT_FLOOR * np.var(a))
    return {"EA": ea, "EA2": ea * ea + var}


def conditional_exposure_variance(ds: Dataset, roles: RoleMap, degree: int = 3) -> np.ndarray:
    """Basis-regression estimate of ``Var(A* | C)``, floored at 1e-8."""
    B = _covariate_basis(ds, roles, degree)
    a = ds[roles.error_prone[0]]
    resid = a - _conditional_fit(B, a)
    return np.maximum(_conditional_fit(B, resid ** 2), 1e-8)


def plugin_instrument(W1, W2, h2, sigma2, moments: dict) -> tuple[np.ndarray, np.ndarray, int]:
    """Evaluate the optimal ``(S1, S2)`` from conditional moments.

    ``moments`` holds per-row ``EA = E(A*|C)``, ``EA2 = E(A*^2|C)``,
    ``ED2 = E(D^2|C)``, ``ED2A = E(D^2 A*|C)`` and ``ED2A2 = E(D^2 A*^2|C)``
    for the residual ``D = b(Z) - h1 - h2 A*``. Returns the pair and the
    number of rows whose determinant was floored.
    """
    EA, EA2 = moments["EA"], moments["EA2"]
    ED2, ED2A, ED2A2 = moments["ED2"], moments["ED2A"], moments["ED2A2"]
    s4h2 = sigma2 ** 2 * h2 ** 2
    d = ED2 * (ED2A2 - s4h2) - ED2A ** 2
    small = np.abs(d) < D_FLOOR
    d = np.where(small, np.where(d < 0, -D_FLOOR, D_FLOOR), d)
    cov_d2a_a = ED2A2 - ED2A * EA
    cov_d2_a = ED2A - ED2 * EA
    l1 = (s4h2 - cov_d2a_a) / d
    l2 = (ED2A * (EA2 + sigma2) - (ED2A2 - s4h2) * EA) / d
    m1 = cov_d2_a / d
    m2 = (ED2A * EA - ED2 * (EA2 + sigma2)) / d
    S1 = np.hstack([l1[:, None] * W1, l2[:, None] * W2])
    S2 = np.hstack([m1[:, None] * W1, m2[:, None] * W2])
    return S1, S2, int(small.sum())


def build_mediator_instrument(ds: Dataset, roles: RoleMap, spec: MediatorModelSpec,
                              mode: str = "simplified", sigma2: float = 0.0,
                              plugin_moments: dict | None = None, *,
                              b_term: str | None = None, conditional_variance=None,
                              basis_degree: int = 3, max_iter: int = 50,
                              tol: float = 1e-8) -> MediatorInstrument:
    """Instrument pair ``(S1, S2)`` for the corrected mediator moments.

    Parameters
    ----------
    mode : {"simplified", "plugin_optimal"}
        ``simplified`` gives ``S1 = [Var(A*|C) W1, 0]``, ``S2 = [0, W2]``.
        ``plugin_optimal`` evaluates the efficient instrument, iterating
        from the naive fit until ``beta`` changes by less than ``tol``.
    plugin_moments : dict, optional
        Known conditional moments (see :func:`plugin_instrument`); skips
        the iteration.
    conditional_variance : None, "estimate", float or array
        ``Var(A*|C)`` for the simplified mode; ``None`` means constant.

    Raises
    ------
    ConditioningError
        More than 1% of rows have a near-zero determinant ``d(C)``.
    """
    if mode not in MODES:
        raise PreconditionError(f"unknown mediator instrument mode {mode!r}")
    spec.validate(roles)
    W1, W2 = _bases(ds, spec)
    a = ds[roles.error_prone[0]]
    if mode == "simplified":
        if conditional_variance is None:
            v = np.ones(ds.n)
        elif isinstance(conditional_variance, str):
            if conditional_variance != "estimate":
                raise PreconditionError(
                    f"conditional_variance must be 'estimate', a number or an array")
            v = conditional_exposure_variance(ds, roles, basis_degree)
        else:
            v = np.broadcast_to(np.asarray(conditional_variance, dtype=float), (ds.n,))
        S1 = np.hstack([v[:, None] * W1, np.zeros_like(W2)])
        S2 = np.hstack([np.zeros_like(W1), W2])
        return MediatorInstrument(S1=S1, S2=S2, mode=mode)

    X = np.hstack([W1, a[:, None] * W2])
    dX = np.hstack([np.zeros_like(W1), W2])
    k1 = W1.shape[1]

    def check(floored: int):
        if floored > MAX_FLOORED_FRACTION * ds.n:
            raise ConditioningError(
                f"d(C) is near zero on {floored} of {ds.n} rows; the optimal mediator "
                "instrument is ill-conditioned (use the simplified mode)")

    if plugin_moments is not None:
        beta = plugin_moments.get("beta")
        h2 = plugin_moments["h2"] if "h2" in plugin_moments else W2 @ beta[k1:]
        S1, S2, floored = plugin_instrument(W1, W2, h2, sigma2, plugin_moments)
        check(floored)
        return MediatorInstrument(S1=S1, S2=S2, mode=mode, beta=beta, floored_rows=floored)

    b = Term.parse(b_term or spec.b_terms[0]).evaluate(ds)
    B = _covariate_basis(ds, roles, basis_degree)
    moments = exposure_moments(B, a)
    beta = solve_linear_moments(X, X, b).theta
    for it in range(1, max_iter + 1):
        D2 = (b - X @ beta) ** 2
        moments.update(residual_moments(B, a, D2))
        S1, S2, floored = plugin_instrument(W1, W2, W2 @ beta[k1:], sigma2, moments)
        check(floored)
        new = solve_corrected_moments(S1 + S2 * a[:, None], X, b, S2, dX, sigma2,
                                      [str(j) for j in range(X.shape[1])]).theta
        step = np.max(np.abs(new - beta) / (1.0 + np.abs(beta)))
        beta = new
        if step < tol:
            break
    return MediatorInstrument(S1=S1, S2=S2, mode=mode, beta=beta, iterations=it,
                              floored_rows=floored)


def fit_mediator(ds: Dataset, roles: RoleMap, spec: MediatorModelSpec | None = None,
                 method: str = "naive_ols", sigma2: float | None = None,
                 instrument: InstrumentMatrix | None = None, *,
                 mode: str = "simplified", conditional_variance=None,
                 nuisance_config: NuisanceConfig | None = None,
                 allow_negative_sigma2: bool = False,
                 weak_threshold: float = 10.0) -> MediatorFit:
    """Fit the mediator model once per ``b_k`` term.

    Parameters
    ----------
    roles : RoleMap
        Mediation roles: outcome ``Y``, error-prone exposure ``A*``, clean
        covariates ``C`` and the mediator as ``exposure_or_mediator``.
    method : {"naive_ols", "constructed_iv", "gmm_sigma_corrected"}
    sigma2 : float
        Measurement-error variance for the corrected method.
    instrument : InstrumentMatrix, optional
        Constructed instrument for the design ``[W1, A* W2]``; built from a
        nonlinear fit of ``E(A*|C)`` when absent.
    allow_negative_sigma2 : bool
        Replace a negative ``sigma2`` by 0 instead of refusing it.

    Raises
    ------
    NegativeVarianceError
        ``sigma2 < 0`` without the override.
    RankError
        The (corrected) system is singular.
    """
    if method not in METHODS:
        raise PreconditionError(f"unknown mediator method {method!r}")
    if roles.exposure_or_mediator is None:
        raise PreconditionError("mediation roles need the mediator column")
    if len(roles.error_prone) != 1:
        raise CompositionError("mediator models take a single error-prone exposure")
    roles.validate(ds)
    spec = spec or MediatorModelSpec.default(roles)
    spec.validate(roles)
    exposure = roles.error_prone[0]
    a = ds[exposure]
    W1, W2 = _bases(ds, spec)
    X = np.hstack([W1, a[:, None] * W2])
    dX = np.hstack([np.zeros_like(W1), W2])
    design_terms = spec.design_terms(exposure)
    f_tests: tuple[FTestResult, ...] = ()
    used = None

    if method == "gmm_sigma_corrected":
        if sigma2 is None:
            raise PreconditionError("gmm_sigma_corrected needs sigma2")
        if sigma2 < 0:
            if not allow_negative_sigma2:
                raise NegativeVarianceError(
                    f"measurement-error variance {sigma2:.4g} is negative; refusing to "
                    "correct (override to use max(sigma2, 0))")
            sigma2 = 0.0
        used = float(sigma2)
    elif method == "constructed_iv" and instrument is None:
        med_roles = RoleMap(outcome=roles.exposure_or_mediator, error_prone=(exposure,),
                            clean_covariates=roles.clean_covariates)
        nuisance = fit_nuisance_conditional_mean(ds, med_roles, nuisance_config)
        f_tests = tuple(nuisance_f_test(ds, med_roles, nuisance.basis_terms,
                                        threshold=weak_threshold))
        for f in f_tests:
            if f.is_weak:
                warnings.warn(f"weak constructed instrument for the mediator model: "
                              f"F = {f.f_statistic:.3g}", WeakInstrumentWarning,
                              stacklevel=2)
        instrument = build_instrument(ds, med_roles, nuisance, "efficient_star",
                                      design_terms)

    fits: dict[str, GmmFit] = {}
    blocks: dict[str, MediatorBlock] = {}
    for b in spec.b_terms:
        y = Term.parse(b).evaluate(ds)
        labels = tuple(f"{b}:{t.label}" for t in design_terms)
        if method == "naive_ols":
            S, dS, s2 = X, dX, 0.0
        elif method == "constructed_iv":
            if instrument.S.shape != X.shape:
                raise CompositionError(
                    f"instrument shape {instrument.S.shape} does not match design {X.shape}")
            S, dS, s2 = instrument.S, np.zeros_like(X), 0.0
        else:
            pair = build_mediator_instrument(ds, roles, spec, mode, used, b_term=b,
                                             conditional_variance=conditional_variance)
            S = pair.S1 + pair.S2 * a[:, None]
            dS, s2 = pair.S2, used
        if s2 == 0.0:
            fit = solve_linear_moments(S, X, y, labels=labels)
        else:
            fit = solve_corrected_moments(S, X, y, dS, dX, s2, labels)
        fits[b] = fit
        blocks[b] = MediatorBlock(b=b, S=S, X=X, y=y, dS=dS, dX=dX, labels=labels)
    return MediatorFit(fits=fits, blocks=blocks, method=method, spec=spec, roles=roles,
                       sigma2_used=used, mode=mode if method == "gmm_sigma_corrected" else None,
                       f_tests=f_tests)
