"""Constructed instrument matrices.

Each builder evaluates the outcome-model layout with the error-prone
columns replaced by something that is uncorrelated with the measurement
error:

``simple``
    user-chosen functions ``s(Z, C2)``;
``efficient_star``
    the fitted ``E(C1* | Z, C2)``, optionally divided by ``sigma^2(Z, C2)``;
``c1_dependent``
    ``w * C1*`` with ``w = 1 - Var(C1*|Z,C2)^{-1} / mean(Var^{-1})``,
    which has mean zero and requires heteroscedasticity;
``raw_design``
    the regressors themselves (ordinary least squares).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from civmed.constructed_iv.nuisance import NuisanceFit
from civmed.data import Dataset, RoleMap
from civmed.errors import CompositionError, PreconditionError, RankError, SchemaError
from civmed.terms import Term, evaluate_terms, parse_terms, resolve_layout

BUILDERS = ("simple", "efficient_star", "c1_dependent", "raw_design")


@dataclass(frozen=True, eq=False)
class InstrumentMatrix:
    """Evaluated instruments with provenance.

    Attributes
    ----------
    S : ndarray, shape (n, d)
    builder : str
    terms : tuple of Term
        Outcome layout the columns correspond to.
    mean_zero_columns : tuple of int
        Columns that must average to zero.
    weights : ndarray (n,) or None
        Row weights ``1/sigma^2(Z, C2)`` applied by ``efficient_star``.
    """

    S: np.ndarray
    builder: str
    terms: tuple[Term, ...]
    mean_zero_columns: tuple[int, ...] = ()
    weights: np.ndarray | None = None

    @property
    def d(self) -> int:
        return self.S.shape[1]

    def to_dict(self) -> dict:
        return {"builder": self.builder, "columns": [t.label for t in self.terms],
                "mean_zero_columns": list(self.mean_zero_columns),
                "weighted": self.weights is not None}


def _check_linear_in(terms: Sequence[Term], names: Sequence[str]) -> None:
    for t in terms:
        if sum(t.power_of(n) for n in names) > 1:
            raise CompositionError(
                f"term {t.label!r} is not linear in the error-prone columns")


def _simple_substitutes(ds: Dataset, roles: RoleMap, s_terms, s_values) -> dict:
    p = len(roles.error_prone)
    if s_values is not None:
        vals = np.asarray(s_values, dtype=float).reshape(ds.n, -1)
        if vals.shape[1] != p:
            raise CompositionError(f"s_values needs {p} column(s), got {vals.shape[1]}")
        return dict(zip(roles.error_prone, vals.T))
    if s_terms is None:
        raise PreconditionError("the simple builder needs s_terms or s_values")
    terms = parse_terms(s_terms)
    if len(terms) != p:
        raise CompositionError(f"s_terms needs one term per error-prone column ({p})")
    allowed = set(roles.instrument_sources)
    for t in terms:
        bad = [c for c in t.columns if c not in allowed]
        if bad:
            raise SchemaError(
                f"instrument term {t.label!r} uses {bad}; only {sorted(allowed)} allowed")
    return {name: t.evaluate(ds) for name, t in zip(roles.error_prone, terms)}


def build_instrument(ds: Dataset, roles: RoleMap, nuisance: NuisanceFit | None = None,
                     builder: str = "efficient_star", layout=None, *,
                     s_terms=None, s_values=None,
                     variance_tol: float = 1e-8) -> InstrumentMatrix:
    """Assemble the instrument matrix for an outcome layout.

    Parameters
    ----------
    layout : sequence of str or Term, optional
        Outcome-model terms; default ``[1, C1*, C2, Z]``.
    s_terms : sequence of str, optional
        ``simple`` builder: one term in ``(Z, C2)`` per error-prone column,
        e.g. ``["Z^2"]``.
    s_values : array_like, optional
        ``simple`` builder: precomputed ``s(Z, C2)`` values.
    variance_tol : float
        ``c1_dependent``: relative spread of ``1/Var`` below which the
        variance is treated as constant.

    Raises
    ------
    RankError
        ``c1_dependent`` with constant ``variance_predictions``.
    """
    if builder not in BUILDERS:
        raise PreconditionError(f"unknown builder {builder!r}; choose from {BUILDERS}")
    terms = resolve_layout(roles, layout)
    error_prone = roles.error_prone
    if builder != "raw_design":
        _check_linear_in(terms, error_prone)
    mean_zero: tuple[int, ...] = ()
    weights = None

    if builder == "raw_design":
        subs: Mapping[str, np.ndarray] = {}
    elif builder == "simple":
        subs = _simple_substitutes(ds, roles, s_terms, s_values)
    elif builder == "efficient_star":
        if nuisance is None:
            raise PreconditionError("efficient_star needs a nuisance fit")
        subs = dict(zip(error_prone, nuisance.predictions.T))
        if nuisance.outcome_variance_predictions is not None:
            weights = 1.0 / nuisance.outcome_variance_predictions
    else:
        if len(error_prone) != 1:
            raise CompositionError("c1_dependent supports a single error-prone column")
        if nuisance is None or nuisance.variance_predictions is None:
            raise PreconditionError("c1_dependent needs variance predictions")
        inv = 1.0 / nuisance.variance_predictions[:, 0]
        if np.ptp(inv) <= variance_tol * np.abs(inv).mean():
            raise RankError(
                "conditional variance of the error-prone column is constant, so the "
                "C1*-dependent instrument vanishes; it requires heteroscedasticity",
                condition_number=np.inf)
        w = 1.0 - inv / inv.mean()
        w = w - w.mean()
        name = error_prone[0]
        subs = {name: w * ds[name]}
        # Centring a column shifts it by a multiple of the intercept column,
        # which leaves the estimator unchanged; only do it when one exists.
        if Term() in terms:
            mean_zero = tuple(j for j, t in enumerate(terms) if t.power_of(name) == 1)

    S = evaluate_terms(terms, ds, subs)
    if weights is not None:
        S = S * weights[:, None]
    for j in mean_zero:
        S[:, j] -= S[:, j].mean()
    S.setflags(write=False)
    return InstrumentMatrix(S=S, builder=builder, terms=terms,
                            mean_zero_columns=mean_zero, weights=weights)
