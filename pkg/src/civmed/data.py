"""Tabular data container, role assignment, CSV input/output and transforms."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

from civmed.errors import (
    DomainError,
    DroppedRowsWarning,
    ParseError,
    PreconditionError,
    SchemaError,
)

logger = logging.getLogger(__name__)

NA_TOKENS = frozenset({"", "na", "nan", "null", "none", "."})


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable collection of equal-length float64 columns.

    Parameters
    ----------
    columns : mapping of str to array_like
        Column name to values. Insertion order is the column order.
    dropped_rows : int
        Rows removed while loading, kept for reporting.
    """

    columns: Mapping[str, np.ndarray]
    dropped_rows: int = 0

    def __post_init__(self):
        frozen = {}
        n = None
        for name, values in dict(self.columns).items():
            if not isinstance(name, str) or not name:
                raise SchemaError(f"column names must be non-empty strings, got {name!r}")
            arr = np.array(values, dtype=float).reshape(-1)
            if n is None:
                n = arr.size
            elif arr.size != n:
                raise SchemaError(
                    f"column {name!r} has length {arr.size}, expected {n}")
            bad = ~np.isfinite(arr)
            if bad.any():
                raise ParseError(
                    f"column {name!r} has a non-finite value at row {int(np.argmax(bad))}")
            arr.setflags(write=False)
            frozen[name] = arr
        if not frozen:
            raise SchemaError("a dataset needs at least one column")
        if n == 0:
            raise SchemaError("a dataset needs at least one row")
        object.__setattr__(self, "columns", MappingProxyType(frozen))

    @property
    def column_names(self) -> list[str]:
        return list(self.columns)

    @property
    def n(self) -> int:
        return next(iter(self.columns.values())).size

    def __contains__(self, name: str) -> bool:
        return name in self.columns

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.columns[name]
        except KeyError:
            raise SchemaError(f"column {name!r} not found; available: "
                              f"{', '.join(self.columns)}") from None

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        """Stack the named columns into an ``(n, len(names))`` array."""
        if not names:
            return np.empty((self.n, 0))
        return np.column_stack([self[name] for name in names])

    def with_column(self, name: str, values) -> "Dataset":
        cols = dict(self.columns)
        cols[name] = values
        return Dataset(cols, self.dropped_rows)

    def take(self, rows) -> "Dataset":
        """Return the rows selected by an index array (repeats allowed)."""
        rows = np.asarray(rows)
        return Dataset({k: v[rows] for k, v in self.columns.items()})

    def to_csv(self, path, delimiter: str = ",") -> None:
        """Write with ``repr`` formatting, which round-trips every double."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
            writer.writerow(self.column_names)
            cols = [self.columns[k] for k in self.column_names]
            for i in range(self.n):
                writer.writerow([repr(float(c[i])) for c in cols])


@dataclass(frozen=True)
class RoleMap:
    """Assignment of dataset columns to modelling roles.

    Parameters
    ----------
    outcome : str
        Response of the model being fitted (Y, or Z for a mediator model).
    error_prone : tuple of str
        Continuous columns observed with additive error.
    clean_covariates : tuple of str
        Error-free covariates, in declaration order.
    exposure_or_mediator : str or None
        The error-free regressor of interest (Z in an outcome model). ``None``
        for a mediator model, whose regressors are the error-prone exposure
        and the clean covariates.
    moderator : str or None
        Optional effect modifier; must be one of the clean covariates.
    """

    outcome: str
    error_prone: tuple[str, ...]
    clean_covariates: tuple[str, ...] = ()
    exposure_or_mediator: str | None = None
    moderator: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "error_prone", _as_tuple(self.error_prone))
        object.__setattr__(self, "clean_covariates", _as_tuple(self.clean_covariates))
        if not self.error_prone:
            raise SchemaError("at least one error-prone column is required")
        names = [self.outcome, *self.error_prone, *self.clean_covariates]
        if self.exposure_or_mediator is not None:
            names.append(self.exposure_or_mediator)
        dup = sorted({x for x in names if names.count(x) > 1})
        if dup:
            raise SchemaError(f"roles must be disjoint; repeated: {', '.join(dup)}")
        if self.moderator is not None and self.moderator not in self.clean_covariates:
            raise SchemaError(
                f"moderator {self.moderator!r} must be listed among the clean covariates")

    @property
    def referenced(self) -> list[str]:
        names = [self.outcome, *self.error_prone, *self.clean_covariates]
        if self.exposure_or_mediator is not None:
            names.append(self.exposure_or_mediator)
        return names

    @property
    def instrument_sources(self) -> list[str]:
        """Columns a constructed instrument may depend on."""
        src = list(self.clean_covariates)
        if self.exposure_or_mediator is not None:
            src.insert(0, self.exposure_or_mediator)
        return src

    def validate(self, ds: Dataset) -> None:
        missing = [name for name in self.referenced if name not in ds]
        if missing:
            raise SchemaError(f"dataset lacks role column(s): {', '.join(missing)}")

    def mediator_roles(self) -> "RoleMap":
        """Roles for the model of the exposure-or-mediator column on the rest."""
        if self.exposure_or_mediator is None:
            raise PreconditionError("no mediator column declared")
        return RoleMap(outcome=self.exposure_or_mediator, error_prone=self.error_prone,
                       clean_covariates=self.clean_covariates, moderator=self.moderator)

    def to_dict(self) -> dict:
        return {
            "outcome": self.outcome,
            "error_prone": list(self.error_prone),
            "clean_covariates": list(self.clean_covariates),
            "exposure_or_mediator": self.exposure_or_mediator,
            "moderator": self.moderator,
        }


def _as_tuple(x) -> tuple:
    if x is None:
        return ()
    if isinstance(x, str):
        return (x,)
    return tuple(x)


def _parse_cell(text: str) -> float | None:
    """Return the float value, or None for a missing-value token."""
    stripped = text.strip()
    if stripped.lower() in NA_TOKENS:
        return None
    value = float(stripped)  # ValueError handled by caller
    return value if math.isfinite(value) else None


def load_dataset(path, schema: RoleMap | None = None, *, delimiter: str = ",",
                 na_policy: str = "strict",
                 extra_columns: Iterable[str] = ()) -> Dataset:
    """Read a headered CSV file into a validated :class:`Dataset`.

    When ``schema`` is given only its columns (plus ``extra_columns``) are
    read, so unrelated text columns do not trip the parser.

    Parameters
    ----------
    path : path-like
    schema : RoleMap, optional
    delimiter : str
    na_policy : {"strict", "drop"}
        ``strict`` raises on any missing or non-numeric cell; ``drop``
        removes such rows and emits a :class:`DroppedRowsWarning`.

    Raises
    ------
    SchemaError
        A declared column is absent from the header.
    ParseError
        A cell is missing or non-numeric under the strict policy.
    """
    if na_policy not in ("strict", "drop"):
        raise PreconditionError(f"na_policy must be 'strict' or 'drop', got {na_policy!r}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file, header row expected") from None
        if len(set(header)) != len(header):
            raise SchemaError(f"{path}: duplicate column names in header")
        wanted = list(header)
        if schema is not None:
            wanted = list(dict.fromkeys([*schema.referenced, *extra_columns]))
            missing = [w for w in wanted if w not in header]
            if missing:
                raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        index = [header.index(w) for w in wanted]
        values: list[list[float]] = [[] for _ in wanted]
        dropped = 0
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            parsed = []
            for j, col in zip(index, wanted):
                cell = row[j] if j < len(row) else ""
                try:
                    v = _parse_cell(cell)
                except ValueError:
                    if na_policy == "strict":
                        raise ParseError(
                            f"{path}: non-numeric value {cell!r} in column {col!r} "
                            f"at line {line_no}") from None
                    v = None
                if v is None and na_policy == "strict":
                    raise ParseError(
                        f"{path}: missing value in column {col!r} at line {line_no}")
                parsed.append(v)
            if any(v is None for v in parsed):
                dropped += 1
                continue
            for store, v in zip(values, parsed):
                store.append(v)
    if dropped:
        msg = f"{path}: dropped {dropped} row(s) with missing or non-numeric values"
        logger.info(msg)
        warnings.warn(msg, DroppedRowsWarning, stacklevel=2)
    if not values[0]:
        raise ParseError(f"{path}: no usable data rows")
    ds = Dataset(dict(zip(wanted, values)), dropped_rows=dropped)
    if schema is not None:
        schema.validate(ds)
    return ds


def transform_column(ds: Dataset, name: str, kind: str) -> Dataset:
    """Return a copy of ``ds`` with column ``name`` centred and/or logged.

    ``kind`` is one of ``center``, ``log`` or ``log_center``.
    """
    x = ds[name]
    if kind not in ("center", "log", "log_center"):
        raise PreconditionError(f"unknown transform {kind!r}")
    if kind.startswith("log"):
        bad = np.flatnonzero(x <= 0)
        if bad.size:
            raise DomainError(
                f"log of column {name!r} needs positive values; row {int(bad[0])} "
                f"holds {x[bad[0]]!r}")
        x = np.log(x)
    if kind.endswith("center"):
        x = x - x.mean()
    return ds.with_column(name, x)
