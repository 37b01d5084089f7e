"""Outcome-model fits with constructed instruments, dose-response means and contrasts."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from civmed.constructed_iv.ftest import FTestResult, first_stage_f_test, nuisance_f_test
from civmed.constructed_iv.instruments import InstrumentMatrix, build_instrument
from civmed.constructed_iv.nuisance import (
    NuisanceConfig,
    fit_nuisance_conditional_mean,
    with_outcome_variance,
)
from civmed.data import Dataset, RoleMap
from civmed.errors import (
    CompositionError,
    ConvergenceError,
    PreconditionError,
    RankError,
    WeakInstrumentWarning,
)
from civmed.gmm import (
    GmmFit,
    MomentSystem,
    linear_moment_system,
    sandwich_at,
    solve_linear_moments,
    solve_newton_moments,
)
from civmed.terms import (
    Term,
    build_design,
    check_layout,
    evaluate_terms,
    parse_terms,
    resolve_layout,
)

RANK_ADVICE = ("the constructed instrument does not identify the outcome model; run the "
               "first-stage F test on the nonlinear terms of E(C1*|Z,C2) (f-test)")

ROBUST = "identified under linear-in-covariates measurement error"
CLASSICAL_ONLY = "identified only under classical additive measurement error"


@dataclass(frozen=True, eq=False)
class NonlinearPartialModel:
    """Outcome mean ``g1(Z, C2; theta1) + g2(Z, C2; theta2) * C1*``.

    ``g1`` and ``g2`` take ``(ds, theta_block)`` and return one value per
    row; they must not read the error-prone column.
    """

    g1: Callable[[Dataset, np.ndarray], np.ndarray]
    g2: Callable[[Dataset, np.ndarray], np.ndarray]
    labels1: tuple[str, ...]
    labels2: tuple[str, ...]
    theta0: tuple[float, ...]

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(self.labels1) + tuple(self.labels2)


@dataclass(frozen=True, eq=False)
class OutcomeFit:
    """Fitted outcome model.

    Attributes
    ----------
    gmm : GmmFit
        Joint fit of the outcome coefficients followed by any mean rows.
    theta_labels, mu_labels : tuple of str
    z_grid : tuple of float or None
        Exposure values of the dose-response rows.
    terms : tuple of Term or None
        Layout of a linear-in-parameters model.
    nonlinear : NonlinearPartialModel or None
    """

    gmm: GmmFit
    roles: RoleMap
    theta_labels: tuple[str, ...]
    mu_labels: tuple[str, ...] = ()
    z_grid: tuple[float, ...] | None = None
    terms: tuple[Term, ...] | None = None
    nonlinear: NonlinearPartialModel | None = None
    instrument: InstrumentMatrix | None = None
    f_tests: tuple[FTestResult, ...] = ()
    kind: str = "linear"

    @property
    def d(self) -> int:
        return len(self.theta_labels)

    @property
    def theta(self) -> np.ndarray:
        return self.gmm.theta[:self.d]

    @property
    def se(self) -> np.ndarray:
        return self.gmm.se[:self.d]

    @property
    def cov(self) -> np.ndarray:
        return self.gmm.cov[:self.d, :self.d]

    @property
    def mu(self) -> np.ndarray | None:
        return self.gmm.theta[self.d:] if self.mu_labels else None

    @property
    def mu_se(self) -> np.ndarray | None:
        return self.gmm.se[self.d:] if self.mu_labels else None

    @property
    def trust(self) -> dict[str, str]:
        if self.terms is None:
            return {lab: CLASSICAL_ONLY for lab in self.theta_labels}
        z = self.roles.exposure_or_mediator
        out = {}
        for t in self.terms:
            pure_z = bool(t.columns) and set(t.columns) == {z}
            out[t.label] = ROBUST if pure_z else CLASSICAL_ONLY
        return out

    @property
    def is_weak(self) -> bool:
        return any(f.is_weak for f in self.f_tests)

    def coef(self, label: str) -> float:
        return self.gmm.coef(label)

    source_model = "outcome"

    @property
    def error_prone_name(self) -> str:
        if len(self.roles.error_prone) != 1:
            raise PreconditionError("this operation needs a single error-prone column")
        return self.roles.error_prone[0]

    def response(self, ds: Dataset) -> np.ndarray:
        return ds[self.roles.outcome]

    def components(self, ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
        """``(g1, g2)`` per row at the fitted coefficients (scalar C1*)."""
        return self.components_at(ds, self.theta)

    def components_at(self, ds: Dataset, theta) -> tuple[np.ndarray, np.ndarray]:
        name = self.error_prone_name
        if self.nonlinear is not None:
            m = self.nonlinear
            k = len(m.labels1)
            return m.g1(ds, theta[:k]), m.g2(ds, theta[k:])
        return linear_components(self.terms, theta, ds, name)

    def base_system(self, ds: Dataset) -> MomentSystem:
        """Outcome moments ``S (Y - mean)`` in the coefficients alone."""
        if self.instrument is None:
            raise PreconditionError("fit carries no instrument matrix")
        S = self.instrument.S
        y = self.response(ds)
        if self.nonlinear is None:
            return linear_moment_system(S, evaluate_terms(self.terms, ds), y,
                                        self.theta_labels)
        return MomentSystem(
            evaluator=lambda data, t: S * (y - self.predict(data, t))[:, None],
            labels=self.theta_labels, dim_moments=len(self.theta_labels))

    def predict(self, ds: Dataset, theta: np.ndarray | None = None) -> np.ndarray:
        theta = self.theta if theta is None else theta
        if self.nonlinear is not None:
            k = len(self.nonlinear.labels1)
            a = ds[self.roles.error_prone[0]]
            return self.nonlinear.g1(ds, theta[:k]) + self.nonlinear.g2(ds, theta[k:]) * a
        return evaluate_terms(self.terms, ds) @ theta

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "labels": list(self.theta_labels),
            "theta": self.theta.tolist(),
            "se": self.se.tolist(),
            "cov": self.cov.tolist(),
            "n": self.gmm.n,
            "trust": self.trust,
            "instrument": None if self.instrument is None else self.instrument.to_dict(),
            "f_tests": [f.to_dict() for f in self.f_tests],
            "weak_instrument": self.is_weak,
        }
        if self.mu_labels:
            out["mu"] = {"labels": list(self.mu_labels), "z_grid": list(self.z_grid),
                         "estimate": self.mu.tolist(), "se": self.mu_se.tolist()}
        return out


def linear_components(terms: Sequence[Term], theta: np.ndarray, ds: Dataset,
                      name: str) -> tuple[np.ndarray, np.ndarray]:
    """Split a linear-in-parameters mean into ``g1 + g2 * name``."""
    g1 = np.zeros(ds.n)
    g2 = np.zeros(ds.n)
    for t, th in zip(terms, theta):
        if t.power_of(name) == 1:
            g2 += th * t.without(name).evaluate(ds)
        else:
            g1 += th * t.evaluate(ds)
    return g1, g2


def _at_exposure(ds: Dataset, roles: RoleMap, z: float) -> Dataset:
    return ds.with_column(roles.exposure_or_mediator, np.full(ds.n, float(z)))


def _mu_label(z: float) -> str:
    return f"mu(z={z:.17g})"


def _linear_system_with_means(ds, roles, terms, S, X, y, grid, mu_labels):
    """Stack ``S (y - X theta)`` with rows ``X(z_j) theta - mu_j``."""
    n, d = X.shape
    Xz = [evaluate_terms(terms, _at_exposure(ds, roles, z)) for z in grid]
    J = np.zeros((d + len(grid), d + len(grid)))
    J[:d, :d] = -(S.T @ X) / n
    for j, M in enumerate(Xz):
        J[d + j, :d] = M.mean(axis=0)
        J[d + j, d + j] = -1.0

    def evaluator(_data, params):
        theta, mu = params[:d], params[d:]
        cols = [S * (y - X @ theta)[:, None]]
        cols += [(M @ theta - m)[:, None] for M, m in zip(Xz, mu)]
        return np.hstack(cols)

    labels = tuple(t.label for t in terms) + tuple(mu_labels)
    system = MomentSystem(evaluator=evaluator, labels=labels, dim_moments=len(labels),
                          jacobian=lambda _d, _t: J)
    return system, Xz


def _fit_linear(ds, roles, terms, S_mat: InstrumentMatrix, grid, mu_labels, kind):
    design = build_design(ds, roles, terms)
    terms = design.terms
    if S_mat.S.shape != design.X.shape:
        raise CompositionError(
            f"instrument has shape {S_mat.S.shape}, design has {design.X.shape}")
    if S_mat.terms != terms:
        # Same columns in a different order would silently pair the wrong rows.
        if set(S_mat.terms) == set(terms):
            order = [S_mat.terms.index(t) for t in terms]
            S_mat = InstrumentMatrix(S=S_mat.S[:, order], builder=S_mat.builder,
                                     terms=terms, weights=S_mat.weights,
                                     mean_zero_columns=tuple(
                                         order.index(j) for j in S_mat.mean_zero_columns))
    labels = tuple(t.label for t in terms)
    try:
        base = solve_linear_moments(S_mat.S, design.X, design.y, labels=labels)
    except RankError as exc:
        raise RankError(f"{exc.message}; {RANK_ADVICE}",
                        condition_number=exc.condition_number) from exc
    if grid:
        system, Xz = _linear_system_with_means(ds, roles, terms, S_mat.S, design.X,
                                               design.y, grid, mu_labels)
        mu = np.array([M.mean(axis=0) @ base.theta for M in Xz])
        gmm = sandwich_at(system, ds, np.concatenate([base.theta, mu]))
    else:
        gmm = base
    return OutcomeFit(gmm=gmm, roles=roles, theta_labels=labels,
                      mu_labels=tuple(mu_labels), z_grid=tuple(grid) if grid else None,
                      terms=terms, instrument=S_mat, kind=kind)


def fit_outcome_linear_iv(ds: Dataset, roles: RoleMap, S: InstrumentMatrix,
                          estimate_mu: bool = False, layout=None) -> OutcomeFit:
    """Solve ``mean_i S_i (Y_i - X_i' theta) = 0`` for the outcome layout.

    With ``estimate_mu`` a row ``X_i(Z=0)' theta - mu`` is stacked, giving
    the mean outcome at zero exposure and its joint covariance.

    Raises
    ------
    RankError
        With advice to run the first-stage F test.
    """
    terms = S.terms if layout is None else parse_terms(layout)
    grid = (0.0,) if estimate_mu else ()
    return _fit_linear(ds, roles, terms, S, grid, ("mu",) if estimate_mu else (), "linear")


def partially_linear_terms(roles: RoleMap, g1_terms, g2_terms) -> tuple[Term, ...]:
    """Layout ``g1 terms + C1* x (g2 terms)`` for a linear-in-parameters model."""
    if len(roles.error_prone) != 1:
        raise CompositionError("partially linear models take one error-prone column")
    a = Term.of(roles.error_prone[0])
    g1 = parse_terms(g1_terms)
    g2 = parse_terms(g2_terms)
    for t in g1 + g2:
        if roles.error_prone[0] in t.columns:
            raise CompositionError(f"g1/g2 term {t.label!r} must not contain C1*")
    return g1 + tuple(t.times(a) for t in g2)


def fit_outcome_partially_linear(ds: Dataset, roles: RoleMap, model, S: InstrumentMatrix,
                                 z_grid: Sequence[float] | None = None, *,
                                 tol: float = 1e-10, max_iter: int = 100) -> OutcomeFit:
    """Fit ``Y = g1(Z, C2) + g2(Z, C2) C1* + e`` with instrument ``S``.

    Parameters
    ----------
    model : dict with ``g1`` and ``g2`` term lists, or NonlinearPartialModel
        Term lists give a linear-in-parameters fit solved directly; a
        :class:`NonlinearPartialModel` is solved by Newton's method.
    z_grid : sequence of float, optional
        Exposure values at which the mean outcome ``mu_j`` is stacked.

    Raises
    ------
    ConvergenceError
        Newton failed; try different initial values.
    """
    grid = tuple(float(z) for z in (z_grid or ()))
    mu_labels = tuple(_mu_label(z) for z in grid)
    if not isinstance(model, NonlinearPartialModel):
        terms = partially_linear_terms(roles, model["g1"], model["g2"])
        return _fit_linear(ds, roles, terms, S, grid, mu_labels, "partially_linear")

    a = ds[roles.error_prone[0]]
    y = ds[roles.outcome]
    k = len(model.labels1)
    Smat = S.S
    if Smat.shape[1] != len(model.labels):
        raise CompositionError(
            f"instrument has {Smat.shape[1]} columns for {len(model.labels)} parameters")
    grids = [_at_exposure(ds, roles, z) for z in grid]

    def mean_at(data, theta):
        return model.g1(data, theta[:k]) + model.g2(data, theta[k:]) * a

    def evaluator(data, params):
        theta = params[:len(model.labels)]
        cols = [Smat * (y - mean_at(data, theta))[:, None]]
        for dz, m in zip(grids, params[len(model.labels):]):
            cols.append((mean_at(dz, theta) - m)[:, None])
        return np.hstack(cols)

    core = MomentSystem(evaluator=evaluator, labels=model.labels,
                        dim_moments=len(model.labels))
    try:
        fit = solve_newton_moments(core, ds, np.asarray(model.theta0, dtype=float),
                                   tol=tol, max_iter=max_iter)
    except ConvergenceError as exc:
        raise ConvergenceError(f"{exc.message}; try different initial values",
                               last_iterate=exc.last_iterate) from exc
    gmm = fit
    if grid:
        mu = np.array([mean_at(dz, fit.theta).mean() for dz in grids])
        full = MomentSystem(evaluator=evaluator, labels=model.labels + mu_labels,
                            dim_moments=len(model.labels) + len(grid))
        gmm = sandwich_at(full, ds, np.concatenate([fit.theta, mu]))
    return OutcomeFit(gmm=gmm, roles=roles, theta_labels=model.labels, mu_labels=mu_labels,
                      z_grid=grid or None, nonlinear=model, instrument=S,
                      kind="partially_linear_nonlinear")


def ate_contrast(fit: OutcomeFit, z_prime: float, z_dprime: float) -> dict:
    """Average effect of moving the exposure from ``z_dprime`` to ``z_prime``.

    Only for models where the exposure enters as a single linear term.
    """
    z = fit.roles.exposure_or_mediator
    if fit.terms is None or z is None:
        raise PreconditionError(
            "contrast needs a linear model; use a dose-response grid instead")
    uses = [t for t in fit.terms if z in t.columns]
    if uses != [Term.of(z)]:
        raise PreconditionError(
            "the exposure enters nonlinearly or through interactions; use a "
            "dose-response grid instead")
    dz = float(z_prime) - float(z_dprime)
    label = Term.of(z).label
    return {"estimate": fit.coef(label) * dz,
            "se": abs(dz) * fit.gmm.stderr(label)}


def fit_constructed_iv(ds: Dataset, roles: RoleMap, layout=None,
                       builder: str = "efficient_star",
                       nuisance_config: NuisanceConfig | None = None, *,
                       s_terms=None, weighted: bool = False, estimate_mu: bool = False,
                       weak_threshold: float = 10.0) -> OutcomeFit:
    """Nuisance fit, instrument construction, first-stage F test and outcome fit.

    ``weighted`` opts in to ``1/sigma^2(Z, C2)`` weights estimated from a
    preliminary unweighted fit.
    """
    try:
        return _fit_constructed_iv(ds, roles, layout, builder, nuisance_config, s_terms,
                                   weighted, estimate_mu, weak_threshold)
    except RankError as exc:
        if RANK_ADVICE not in exc.message:
            exc.args = (f"{exc.message}; {RANK_ADVICE}",)
        raise


def _fit_constructed_iv(ds, roles, layout, builder, nuisance_config, s_terms, weighted,
                        estimate_mu, weak_threshold) -> OutcomeFit:
    roles.validate(ds)
    terms = resolve_layout(roles, layout)
    check_layout(terms, ds, roles)
    cfg = nuisance_config or NuisanceConfig()
    nuisance = None
    f_tests: tuple[FTestResult, ...] = ()
    if builder in ("efficient_star", "c1_dependent"):
        if builder == "c1_dependent" and not cfg.fit_variance:
            cfg = NuisanceConfig(**{**cfg.__dict__, "fit_variance": True})
        nuisance = fit_nuisance_conditional_mean(ds, roles, cfg)
        if builder == "efficient_star":
            f_tests = tuple(nuisance_f_test(ds, roles, nuisance.basis_terms,
                                            threshold=weak_threshold))
    elif builder == "simple":
        small = tuple(Term.of(v) for v in roles.instrument_sources)
        extra = tuple(t for t in parse_terms(s_terms) if t not in small)
        if extra and len(roles.error_prone) == 1:
            f_tests = (first_stage_f_test(ds, roles, small, small + extra,
                                          threshold=weak_threshold),)
    S = build_instrument(ds, roles, nuisance, builder, terms, s_terms=s_terms)
    if weighted and builder == "efficient_star":
        prelim = fit_outcome_linear_iv(ds, roles, S)
        resid = ds[roles.outcome] - prelim.predict(ds)
        nuisance = with_outcome_variance(ds, nuisance, resid)
        S = build_instrument(ds, roles, nuisance, builder, terms)
    for f in f_tests:
        if f.is_weak:
            warnings.warn(f"weak constructed instrument for {f.response}: "
                          f"F = {f.f_statistic:.3g} < {f.threshold:g}",
                          WeakInstrumentWarning, stacklevel=2)
    fit = fit_outcome_linear_iv(ds, roles, S, estimate_mu=estimate_mu)
    return OutcomeFit(gmm=fit.gmm, roles=fit.roles, theta_labels=fit.theta_labels,
                      mu_labels=fit.mu_labels, z_grid=fit.z_grid, terms=fit.terms,
                      instrument=S, f_tests=f_tests, kind=fit.kind)
