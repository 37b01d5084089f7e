"""First-stage F test of the nonlinear terms that drive a constructed instrument.

The error-prone column is regressed on a small linear model and on a
larger model adding nonlinear terms. A small F statistic means the
constructed instrument is close to a linear combination of the other
regressors, so the outcome model is weakly identified.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.stats

from civmed.data import Dataset, RoleMap
from civmed.errors import CompositionError, PreconditionError, RankError
from civmed.terms import Term, evaluate_terms, parse_terms

WEAK_THRESHOLD = 10.0


@dataclass(frozen=True)
class FTestResult:
    f_statistic: float
    df_num: int
    df_den: int
    p_value: float
    is_weak: bool
    threshold: float
    response: str
    small_terms: tuple[str, ...]
    large_terms: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "f_statistic": self.f_statistic, "df_num": self.df_num,
            "df_den": self.df_den, "p_value": self.p_value, "is_weak": self.is_weak,
            "threshold": self.threshold, "response": self.response,
            "small_terms": list(self.small_terms), "large_terms": list(self.large_terms),
        }


def _rss(X: np.ndarray, y: np.ndarray) -> float:
    coef = np.linalg.lstsq(X, y, rcond=None)[0]
    r = y - X @ coef
    return float(r @ r)


def f_from_rss(rss_small: float, rss_large: float, q: int, df_den: int,
               threshold: float = WEAK_THRESHOLD):
    """F statistic, p-value and weak flag from the two residual sums of squares."""
    f = max(((rss_small - rss_large) / q) / (rss_large / df_den), 0.0)
    return f, float(scipy.stats.f.sf(f, q, df_den)), f < threshold


def first_stage_f_test(ds: Dataset, roles: RoleMap, small_terms, large_terms, *,
                       response: str | None = None,
                       threshold: float = WEAK_THRESHOLD) -> FTestResult:
    """Nested-model F test for the error-prone column.

    An intercept is added to both models when absent.

    Raises
    ------
    CompositionError
        The small model is not nested in the large one.
    RankError
        The large model's design is rank deficient.
    """
    if response is None:
        if len(roles.error_prone) != 1:
            raise PreconditionError("name the response when there are several "
                                    "error-prone columns")
        response = roles.error_prone[0]
    small = parse_terms(small_terms)
    large = parse_terms(large_terms)
    if Term() not in small:
        small = (Term(),) + small
    if Term() not in large:
        large = (Term(),) + large
    if not set(small) < set(large):
        raise CompositionError(
            "the small model must be strictly nested in the large model; missing from "
            f"large: {[t.label for t in small if t not in set(large)]}")
    for t in large:
        if response in t.columns:
            raise CompositionError(f"term {t.label!r} contains the response {response!r}")
    y = ds[response]
    X0 = evaluate_terms(small, ds)
    X1 = evaluate_terms(large, ds)
    n, p1 = X1.shape
    if p1 >= n:
        raise RankError(f"large model has {p1} columns for {n} rows")
    # Column scaling keeps the rank test meaningful for high powers.
    scale = np.sqrt(np.mean(X1 * X1, axis=0))
    if np.any(scale == 0) or np.linalg.matrix_rank(X1 / scale) < p1:
        raise RankError("large model design is rank deficient")
    q = p1 - X0.shape[1]
    f, p, weak = f_from_rss(_rss(X0, y), _rss(X1, y), q, n - p1, threshold)
    return FTestResult(f_statistic=f, df_num=q, df_den=n - p1, p_value=p, is_weak=weak,
                       threshold=threshold, response=response,
                       small_terms=tuple(t.label for t in small),
                       large_terms=tuple(t.label for t in large))


def nuisance_f_test(ds: Dataset, roles: RoleMap, basis_terms, *,
                    threshold: float = WEAK_THRESHOLD) -> list[FTestResult]:
    """F test of the nuisance basis against the linear model, per error-prone column."""
    small = tuple(Term.of(name) for name in roles.instrument_sources)
    large = tuple(dict.fromkeys((Term(),) + small + tuple(parse_terms(basis_terms))))
    if set(large) <= set(small) | {Term()}:
        raise RankError("the nuisance basis adds no terms beyond the linear model, so the "
                        "constructed instrument is collinear with the regressors")
    return [first_stage_f_test(ds, roles, small, large, response=name, threshold=threshold)
            for name in roles.error_prone]
