"""Model terms and design-matrix assembly.

A term is a product of column powers written as ``"1"``, ``"Z"``,
``"Z^2"`` or ``"A*site"``. Factors are stored sorted by column name so
``"site*A"`` and ``"A*site"`` compare equal.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from civmed.data import Dataset, RoleMap
from civmed.errors import CompositionError, DegenerateColumnError, SchemaError

_FACTOR = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_.]*)\s*(?:\^\s*(\d+))?\s*$")


@dataclass(frozen=True, order=True)
class Term:
    """Monomial in dataset columns; the empty product is the intercept."""

    factors: tuple[tuple[str, int], ...] = ()

    @classmethod
    def parse(cls, text: "str | Term") -> "Term":
        if isinstance(text, Term):
            return text
        text = str(text).strip()
        if text == "1":
            return cls(())
        powers: dict[str, int] = {}
        for part in text.split("*"):
            m = _FACTOR.match(part)
            if not m:
                raise SchemaError(f"cannot parse term {text!r}")
            power = int(m.group(2) or 1)
            if power < 1:
                raise SchemaError(f"term {text!r}: powers must be positive")
            powers[m.group(1)] = powers.get(m.group(1), 0) + power
        return cls(tuple(sorted(powers.items())))

    @classmethod
    def of(cls, name: str, power: int = 1) -> "Term":
        return cls(((name, power),))

    @property
    def is_intercept(self) -> bool:
        return not self.factors

    @property
    def columns(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.factors)

    @property
    def label(self) -> str:
        if not self.factors:
            return "1"
        return "*".join(n if p == 1 else f"{n}^{p}" for n, p in self.factors)

    def __str__(self) -> str:
        return self.label

    def power_of(self, name: str) -> int:
        return dict(self.factors).get(name, 0)

    def without(self, name: str) -> "Term":
        return Term(tuple(f for f in self.factors if f[0] != name))

    def times(self, other: "Term") -> "Term":
        powers = dict(self.factors)
        for n, p in other.factors:
            powers[n] = powers.get(n, 0) + p
        return Term(tuple(sorted(powers.items())))

    def evaluate(self, ds: Dataset,
                 substitutions: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
        """Evaluate row-wise; ``substitutions`` override dataset columns."""
        out = np.ones(ds.n)
        subs = substitutions or {}
        for name, power in self.factors:
            col = subs[name] if name in subs else ds[name]
            out = out * (col if power == 1 else col ** power)
        return out


def parse_terms(terms) -> tuple[Term, ...]:
    """Accept a comma-separated string or a sequence of strings/Terms."""
    if isinstance(terms, str):
        terms = [t for t in terms.split(",") if t.strip()]
    parsed = tuple(Term.parse(t) for t in terms)
    if len(set(parsed)) != len(parsed):
        raise CompositionError(f"duplicate terms in {[t.label for t in parsed]}")
    return parsed


def evaluate_terms(terms: Sequence[Term], ds: Dataset,
                   substitutions: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
    if not terms:
        return np.empty((ds.n, 0))
    return np.column_stack([t.evaluate(ds, substitutions) for t in terms])


def default_layout(roles: RoleMap) -> tuple[Term, ...]:
    """``[1, error-prone..., clean covariates..., exposure]``."""
    names = [*roles.error_prone, *roles.clean_covariates]
    if roles.exposure_or_mediator is not None:
        names.append(roles.exposure_or_mediator)
    return (Term(),) + tuple(Term.of(n) for n in names)


def resolve_layout(roles: RoleMap, layout=None) -> tuple[Term, ...]:
    """Parse a layout (default :func:`default_layout`), intercept first."""
    terms = default_layout(roles) if layout is None else parse_terms(layout)
    if Term() in terms:
        terms = (Term(),) + tuple(t for t in terms if not t.is_intercept)
    return terms


@dataclass(frozen=True, eq=False)
class DesignMatrices:
    """Regressor matrix, response and column labels for one model."""

    X: np.ndarray
    y: np.ndarray
    terms: tuple[Term, ...]

    @property
    def column_labels(self) -> list[str]:
        return [t.label for t in self.terms]


def check_layout(terms: Sequence[Term], ds: Dataset, roles: RoleMap) -> None:
    allowed = set(roles.referenced) - {roles.outcome}
    for t in terms:
        for name in t.columns:
            if name not in ds:
                raise SchemaError(f"term {t.label!r} names absent column {name!r}")
            if name not in allowed:
                raise SchemaError(
                    f"term {t.label!r} uses column {name!r}, which has no regressor role")


def build_design(ds: Dataset, roles: RoleMap, layout=None) -> DesignMatrices:
    """Assemble ``X`` in layout order and the response ``y``.

    The intercept, if present, is moved to the first column.

    Raises
    ------
    SchemaError
        A term names a column that is absent or has no regressor role.
    DegenerateColumnError
        A non-intercept column is constant.
    """
    roles.validate(ds)
    terms = resolve_layout(roles, layout)
    check_layout(terms, ds, roles)
    X = evaluate_terms(terms, ds)
    for j, t in enumerate(terms):
        if not t.is_intercept and np.ptp(X[:, j]) == 0.0:
            raise DegenerateColumnError(f"design column {t.label!r} is constant")
    X.setflags(write=False)
    y = ds[roles.outcome]
    return DesignMatrices(X=X, y=y, terms=terms)
