"""Natural direct, indirect and total effects from fitted outcome and mediator models.

With an outcome mean ``sum_t theta_t f_t(A, C) Z^{p_t}`` and mediator fits
``E{Z^p | A, C} = h1_p(C) + h2_p(C) A``, the mean outcome when the exposure
is set to ``a1`` in the outcome model and to ``a2`` in the mediator model is

    pred(a1, a2) = sum_t theta_t f_t(a1, C) E{Z^{p_t} | a2, C},

averaged over the rows of each moderator level. Then
``NDE = pred(a', a'') - pred(a'', a'')``, ``NIE = pred(a', a') - pred(a', a'')``
and ``TE = NDE + NIE``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from civmed.data import Dataset, RoleMap
from civmed.errors import CompositionError, PreconditionError
from civmed.terms import Term, evaluate_terms, parse_terms

ESTIMANDS = ("NDE", "NIE", "TE")


@dataclass(frozen=True)
class EffectEstimate:
    point: float
    lower: float | None = None
    upper: float | None = None
    se: float | None = None

    def to_dict(self) -> dict:
        return {"point": self.point, "lower": self.lower, "upper": self.upper,
                "se": self.se}


@dataclass(frozen=True)
class LevelEffects:
    """Effects for one moderator level (``level=None`` pools all rows)."""

    level: float | None
    nde: EffectEstimate
    nie: EffectEstimate
    te: EffectEstimate
    n_rows: int = 0

    def get(self, estimand: str) -> EffectEstimate:
        return {"NDE": self.nde, "NIE": self.nie, "TE": self.te}[estimand]

    def to_dict(self) -> dict:
        return {"level": self.level, "n_rows": self.n_rows, "NDE": self.nde.to_dict(),
                "NIE": self.nie.to_dict(), "TE": self.te.to_dict()}


def effect_key(estimand: str, level: float | None = None, moderator: str | None = None) -> str:
    if level is None:
        return estimand
    return f"{estimand}[{moderator or 'level'}={level:.17g}]"


@dataclass(frozen=True)
class EffectReport:
    """Effect estimates per moderator level, with intervals when available."""

    method: str
    contrast: tuple[float, float]
    levels: tuple[LevelEffects, ...]
    moderator: str | None = None
    inference: str = "none"
    confidence_level: float = 0.95
    bootstrap_B: int | None = None
    n_failed: int = 0
    diagnostics: dict = field(default_factory=dict)
    warnings: tuple[str, ...] = ()
    draws: np.ndarray | None = field(default=None, repr=False, compare=False)

    def draws_csv(self) -> str:
        """Bootstrap draws as CSV text, one column per :func:`effect_key`."""
        if self.draws is None:
            raise PreconditionError("report carries no bootstrap draws")
        keys = list(self.flat())
        lines = [",".join(keys)]
        lines += [",".join(repr(float(v)) for v in row) for row in self.draws]
        return "\n".join(lines) + "\n"

    def level(self, level: float | None = None) -> LevelEffects:
        for lv in self.levels:
            if lv.level == level:
                return lv
        raise KeyError(f"no effects for level {level!r}")

    def get(self, estimand: str, level: float | None = None) -> EffectEstimate:
        return self.level(level).get(estimand)

    def flat(self) -> dict[str, float]:
        """Point estimates keyed by :func:`effect_key`."""
        return {effect_key(e, lv.level, self.moderator): lv.get(e).point
                for lv in self.levels for e in ESTIMANDS}

    def to_dict(self) -> dict:
        return {
            "method": self.method, "contrast": list(self.contrast),
            "moderator": self.moderator, "inference": self.inference,
            "confidence_level": self.confidence_level, "bootstrap_B": self.bootstrap_B,
            "n_failed": self.n_failed,
            "levels": [lv.to_dict() for lv in self.levels],
            "diagnostics": self.diagnostics, "warnings": list(self.warnings),
        }


@dataclass(frozen=True, eq=False)
class EffectModel:
    """Everything needed to evaluate per-row effects for given coefficients."""

    outcome_terms: tuple[Term, ...]
    exposure: str
    mediator: str
    h1_terms: tuple[Term, ...]
    h2_terms: tuple[Term, ...]
    b_terms: tuple[Term, ...]

    def __post_init__(self):
        available = {t.power_of(self.mediator) for t in self.b_terms}
        for t in self.outcome_terms:
            p = t.power_of(self.mediator)
            if p and p not in available:
                raise CompositionError(
                    f"outcome term {t.label!r} needs a mediator model for "
                    f"{Term.of(self.mediator, p).label}")
        for b in self.b_terms:
            if b != Term.of(self.mediator, b.power_of(self.mediator)):
                raise CompositionError(f"b term {b.label!r} must be a power of the mediator")

    def row_effects(self, ds: Dataset, theta: np.ndarray, betas: dict,
                    contrast: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
        """Per-row NDE and NIE contributions.

        ``betas`` maps each mediator power ``p`` to the coefficient vector
        ``[beta1, beta2]`` of the ``Z^p`` model.
        """
        a1, a0 = float(contrast[0]), float(contrast[1])
        W1 = evaluate_terms(self.h1_terms, ds)
        W2 = evaluate_terms(self.h2_terms, ds)
        k1 = W1.shape[1]
        h = {p: (W1 @ beta[:k1], W2 @ beta[k1:]) for p, beta in betas.items()}

        def mediator_mean(p, a):
            if p == 0:
                return 1.0
            h1, h2 = h[p]
            return h1 + h2 * a

        def outcome_part(t, a):
            rest = t.without(self.mediator)
            return rest.evaluate(ds, {self.exposure: np.full(ds.n, a)})

        def pred(a_out, a_med):
            total = np.zeros(ds.n)
            for t, th in zip(self.outcome_terms, theta):
                p = t.power_of(self.mediator)
                total += th * outcome_part(t, a_out) * mediator_mean(p, a_med)
            return total

        p_a0_a0 = pred(a0, a0)
        p_a1_a0 = pred(a1, a0)
        p_a1_a1 = pred(a1, a1)
        return p_a1_a0 - p_a0_a0, p_a1_a1 - p_a1_a0


def level_masks(ds: Dataset, moderator: str | None,
                levels: Sequence[float] | None) -> list[tuple[float | None, np.ndarray]]:
    """Row masks per requested moderator level; ``None`` pools every row."""
    if not levels:
        return [(None, np.ones(ds.n, dtype=bool))]
    if moderator is None:
        raise CompositionError("moderator levels requested but no moderator declared")
    col = ds[moderator]
    out = []
    for lv in levels:
        mask = col == float(lv)
        if not mask.any():
            raise CompositionError(
                f"moderator {moderator!r} never takes the value {lv!r}; observed "
                f"{sorted(set(np.unique(col).tolist()))[:10]}")
        out.append((float(lv), mask))
    return out


def effects_from_rows(nde: np.ndarray, nie: np.ndarray, masks) -> tuple[LevelEffects, ...]:
    levels = []
    for lv, mask in masks:
        d = float(np.mean(nde[mask]))
        i = float(np.mean(nie[mask]))
        levels.append(LevelEffects(level=lv, nde=EffectEstimate(d), nie=EffectEstimate(i),
                                   te=EffectEstimate(d + i), n_rows=int(mask.sum())))
    return tuple(levels)


def effect_model_for(outcome_fit, mediator_fit) -> EffectModel:
    roles = mediator_fit.roles
    if outcome_fit.terms is None:
        raise CompositionError("effects need a linear-in-parameters outcome model")
    if outcome_fit.roles.moderator != roles.moderator:
        raise CompositionError(
            f"outcome and mediator fits disagree on the moderator "
            f"({outcome_fit.roles.moderator!r} vs {roles.moderator!r})")
    return EffectModel(outcome_terms=tuple(outcome_fit.terms),
                       exposure=roles.error_prone[0], mediator=roles.exposure_or_mediator,
                       h1_terms=parse_terms(mediator_fit.spec.h1_terms),
                       h2_terms=parse_terms(mediator_fit.spec.h2_terms),
                       b_terms=parse_terms(mediator_fit.spec.b_terms))


def mediator_betas(mediator_fit) -> dict[int, np.ndarray]:
    z = mediator_fit.roles.exposure_or_mediator
    return {Term.parse(b).power_of(z): fit.theta for b, fit in mediator_fit.fits.items()}


def estimate_effects(ds: Dataset, outcome_fit, mediator_fit,
                     contrast: tuple[float, float] = (1.0, 0.0),
                     moderator_levels: Sequence[float] | None = None,
                     method: str = "plug-in") -> EffectReport:
    """Plug-in NDE, NIE and TE per moderator level (point estimates only).

    Raises
    ------
    CompositionError
        The fits disagree on the moderator, a level never occurs, or an
        outcome term needs a mediator model that was not fitted.
    """
    model = effect_model_for(outcome_fit, mediator_fit)
    nde, nie = model.row_effects(ds, outcome_fit.theta, mediator_betas(mediator_fit),
                                 contrast)
    moderator = mediator_fit.roles.moderator
    masks = level_masks(ds, moderator, moderator_levels)
    return EffectReport(method=method, contrast=(float(contrast[0]), float(contrast[1])),
                        levels=effects_from_rows(nde, nie, masks), moderator=moderator)
