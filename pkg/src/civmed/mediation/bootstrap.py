"""Nonparametric row bootstrap with percentile intervals."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from civmed.data import Dataset
from civmed.errors import (
    InstabilityError,
    NumericalError,
    PreconditionError,
)

MIN_B = 100
MAX_FAIL_FRACTION = 0.05


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    """Percentile intervals for every named estimate.

    ``draws`` has one row per successful resample, columns in ``keys``
    order.
    """

    keys: tuple[str, ...]
    point: dict[str, float]
    lower: dict[str, float]
    upper: dict[str, float]
    se: dict[str, float]
    draws: np.ndarray
    B: int
    n_failed: int
    level: float


def resample_indices(n: int, seed: int, b: int) -> np.ndarray:
    """Row indices of resample ``b``; depends only on ``(seed, b)``."""
    return np.random.default_rng([seed, b]).integers(0, n, n)


def percentile_interval(draws: np.ndarray, level: float) -> tuple[np.ndarray, np.ndarray]:
    alpha = 1.0 - level
    lo, hi = np.quantile(draws, [alpha / 2, 1 - alpha / 2], axis=0)
    return lo, hi


def bootstrap_ci(pipeline: Callable[[Dataset], Mapping[str, float]], ds: Dataset,
                 B: int = 500, seed: int | None = None, level: float = 0.95, *,
                 threads: int = 1,
                 max_fail_fraction: float = MAX_FAIL_FRACTION) -> BootstrapResult:
    """Resample rows ``B`` times and rerun ``pipeline`` on each resample.

    Parameters
    ----------
    pipeline : callable
        Maps a dataset to named estimates; must be deterministic.
    seed : int
        Required; resample ``b`` uses the generator seeded by ``[seed, b]``
        so results do not depend on ``threads``.

    Raises
    ------
    InstabilityError
        More than ``max_fail_fraction`` of resamples failed numerically.
    """
    if B < MIN_B:
        raise PreconditionError(f"bootstrap needs B >= {MIN_B}, got {B}")
    if seed is None:
        raise PreconditionError("bootstrap needs an explicit seed")
    if not 0 < level < 1:
        raise PreconditionError(f"level must lie in (0, 1), got {level}")
    point = {k: float(v) for k, v in pipeline(ds).items()}
    keys = tuple(point)

    def one(b: int):
        try:
            est = pipeline(ds.take(resample_indices(ds.n, seed, b)))
        except NumericalError:
            return None
        return [float(est[k]) for k in keys]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(B)))
    else:
        results = [one(b) for b in range(B)]
    ok = [r for r in results if r is not None]
    failed = B - len(ok)
    if failed > max_fail_fraction * B:
        raise InstabilityError(
            f"{failed} of {B} bootstrap resamples failed; the estimator is unstable on "
            "this data, check the first-stage F test for weak instruments")
    draws = np.array(ok, dtype=float).reshape(len(ok), len(keys))
    lo, hi = percentile_interval(draws, level)
    sd = draws.std(axis=0, ddof=1)
    return BootstrapResult(keys=keys, point=point,
                           lower=dict(zip(keys, lo.tolist())),
                           upper=dict(zip(keys, hi.tolist())),
                           se=dict(zip(keys, sd.tolist())), draws=draws, B=B,
                           n_failed=failed, level=level)
