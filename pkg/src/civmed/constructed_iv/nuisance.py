"""Conditional-mean and conditional-variance fits by polynomial basis regression."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from civmed.data import Dataset, RoleMap
from civmed.errors import PreconditionError, UnderdeterminedError
from civmed.terms import Term, evaluate_terms, parse_terms

VARIANCE_FLOOR = 1e-8
KINDS = ("parametric_basis", "crossfit_nonparametric")


@dataclass(frozen=True)
class NuisanceConfig:
    """How to fit ``E(C1* | Z, C2)``.

    Parameters
    ----------
    kind : {"parametric_basis", "crossfit_nonparametric"}
        Full-sample basis regression, or the same regression cross-fitted
        over ``K`` seeded folds.
    basis_degree : int
        Highest power of each conditioning variable.
    K : int
        Number of folds for cross-fitting.
    seed : int, optional
        Fold shuffle seed; required for cross-fitting.
    interactions : bool
        Include exposure-by-covariate products.
    fit_variance : bool
        Also fit ``Var(C1* | Z, C2)`` from squared residuals.
    basis_terms : sequence of str, optional
        Explicit basis replacing the default polynomial one.
    """

    kind: str = "parametric_basis"
    basis_degree: int = 3
    K: int = 5
    seed: int | None = None
    interactions: bool = True
    fit_variance: bool = False
    basis_terms: tuple[str, ...] | None = None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "basis_degree": self.basis_degree, "K": self.K,
            "seed": self.seed, "interactions": self.interactions,
            "fit_variance": self.fit_variance,
            "basis_terms": None if self.basis_terms is None else list(self.basis_terms),
        }


@dataclass(frozen=True, eq=False)
class NuisanceFit:
    """Fitted conditional moments of the error-prone columns.

    Attributes
    ----------
    kind : str
    targets : tuple of str
        Error-prone columns, one prediction column each.
    predictions : ndarray, shape (n, p)
        Estimated ``E(C1* | Z, C2)``.
    variance_predictions : ndarray (n, p) or None
        Estimated ``Var(C1* | Z, C2)``, floored at 1e-8.
    outcome_variance_predictions : ndarray (n,) or None
        Estimated outcome residual variance ``sigma^2(Z, C2)``.
    fold_assignment : ndarray (n,) of int in 1..K, or None
    basis_terms : tuple of Term
        Basis used, stated in raw column names.
    """

    kind: str
    targets: tuple[str, ...]
    predictions: np.ndarray
    basis_terms: tuple[Term, ...]
    variance_predictions: np.ndarray | None = None
    outcome_variance_predictions: np.ndarray | None = None
    fold_assignment: np.ndarray | None = None

    @property
    def basis_description(self) -> dict:
        return {"terms": [t.label for t in self.basis_terms],
                "dimension": len(self.basis_terms)}


def polynomial_basis(ds: Dataset, variables: Sequence[str], degree: int = 3,
                     interact_with: str | None = None) -> tuple[Term, ...]:
    """Intercept, powers ``1..degree`` of each variable, and products of
    ``interact_with`` with each other variable.

    Powers are capped below the number of distinct values so binary
    columns contribute a single term.
    """
    terms = [Term()]
    for name in variables:
        levels = np.unique(ds[name]).size
        for p in range(1, min(degree, levels - 1) + 1):
            terms.append(Term.of(name, p))
    if interact_with is not None:
        for name in variables:
            if name != interact_with:
                terms.append(Term.of(interact_with).times(Term.of(name)))
    return tuple(dict.fromkeys(terms))


def standardized_basis_matrix(ds: Dataset, terms: Sequence[Term]) -> np.ndarray:
    """Evaluate ``terms`` on standardized columns for numerical stability.

    Standardization is affine per column, so for polynomial bases closed
    under lower powers the column span is unchanged.
    """
    names = {n for t in terms for n in t.columns}
    subs = {}
    for name in names:
        x = ds[name]
        sd = x.std()
        subs[name] = (x - x.mean()) / (sd if sd > 0 else 1.0)
    return evaluate_terms(terms, ds, subs)


def _lstsq(B: np.ndarray, T: np.ndarray) -> np.ndarray:
    return np.linalg.lstsq(B, T, rcond=None)[0]


def _fit_predict(B_train, T_train, B_pred, with_variance: bool):
    coef = _lstsq(B_train, T_train)
    pred = B_pred @ coef
    var = None
    if with_variance:
        resid2 = (T_train - B_train @ coef) ** 2
        var = np.maximum(B_pred @ _lstsq(B_train, resid2), VARIANCE_FLOOR)
    return pred, var


def make_folds(n: int, K: int, seed: int) -> np.ndarray:
    """Seeded partition of ``range(n)`` into ``K`` near-equal folds (1-based)."""
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=int)
    folds[perm] = np.arange(n) % K + 1
    return folds


def conditioning_variables(roles: RoleMap) -> list[str]:
    return roles.instrument_sources


def fit_nuisance_conditional_mean(ds: Dataset, roles: RoleMap,
                                  config: NuisanceConfig | None = None) -> NuisanceFit:
    """Estimate ``E(C1* | Z, C2)`` for every error-prone column.

    The conditioning set is the exposure (if any) and the clean covariates.

    Raises
    ------
    UnderdeterminedError
        The basis has at least as many columns as training rows.
    PreconditionError
        Cross-fitting without a seed or with ``K < 2``.
    """
    config = config or NuisanceConfig()
    if config.kind not in KINDS:
        raise PreconditionError(f"unknown nuisance kind {config.kind!r}")
    roles.validate(ds)
    if config.basis_terms is not None:
        terms = parse_terms(config.basis_terms)
        allowed = set(roles.instrument_sources)
        for t in terms:
            bad = [c for c in t.columns if c not in allowed]
            if bad:
                raise PreconditionError(
                    f"basis term {t.label!r} uses {bad}; only {sorted(allowed)} allowed")
    else:
        variables = conditioning_variables(roles)
        inter = roles.exposure_or_mediator if config.interactions else None
        terms = polynomial_basis(ds, variables, config.basis_degree, inter)
    B = standardized_basis_matrix(ds, terms)
    T = ds.matrix(roles.error_prone)
    n, dim = B.shape
    if n < 10 * dim:
        warnings.warn(f"nuisance basis of dimension {dim} is large for n={n}", stacklevel=2)

    if config.kind == "parametric_basis":
        if dim >= n:
            raise UnderdeterminedError(f"basis dimension {dim} >= n = {n}")
        pred, var = _fit_predict(B, T, B, config.fit_variance)
        folds = None
    else:
        if config.K < 2:
            raise PreconditionError("cross-fitting needs K >= 2")
        if config.seed is None:
            raise PreconditionError("cross-fitting needs a seed")
        folds = make_folds(n, config.K, config.seed)
        pred = np.empty_like(T)
        var = np.empty_like(T) if config.fit_variance else None
        for k in range(1, config.K + 1):
            held = folds == k
            train = ~held
            if dim >= train.sum():
                raise UnderdeterminedError(
                    f"basis dimension {dim} >= training size {int(train.sum())} in fold {k}")
            p, v = _fit_predict(B[train], T[train], B[held], config.fit_variance)
            pred[held] = p
            if var is not None:
                var[held] = v
    return NuisanceFit(kind=config.kind, targets=roles.error_prone, predictions=pred,
                       basis_terms=terms, variance_predictions=var, fold_assignment=folds)


def with_outcome_variance(ds: Dataset, nuisance: NuisanceFit,
                          residuals: np.ndarray) -> NuisanceFit:
    """Attach ``sigma^2(Z, C2)`` from squared outcome residuals on the basis."""
    B = standardized_basis_matrix(ds, nuisance.basis_terms)
    r2 = np.asarray(residuals, dtype=float) ** 2
    fitted = np.maximum(B @ _lstsq(B, r2), VARIANCE_FLOOR)
    return replace(nuisance, outcome_variance_predictions=fitted)
