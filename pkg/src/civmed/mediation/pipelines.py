"""End-to-end mediation pipelines under exposure measurement error.

Each pipeline fits an outcome model ``E(Y | A, Z, C)`` and a mediator model
``E(Z | A, C)`` with the error-prone exposure ``A*`` and combines them into
natural direct and indirect effects:

``NAIVE``
    least squares for both models;
``IVZ_IVY``
    constructed instruments for both models;
``GMMZ_IVY``
    constructed-instrument outcome fit, ``sigma^2`` from its residuals,
    variance-corrected mediator fit;
``IVZ_GMMY``
    constructed-instrument mediator fit, ``sigma^2`` from its residuals,
    variance-corrected outcome fit;
``MOM_SENS(rr)``
    both models corrected with ``sigma^2 = (1 - rr) Var(A*)`` for an
    assumed reliability ``rr``.

Intervals come from the row bootstrap over the whole pipeline, or from the
sandwich covariance of the stacked moment system of every stage.
"""

from __future__ import annotations

import contextlib
import re
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.stats

from civmed.constructed_iv.instruments import InstrumentMatrix
from civmed.constructed_iv.nuisance import NuisanceConfig
from civmed.constructed_iv.outcome import OutcomeFit, fit_constructed_iv
from civmed.data import Dataset, RoleMap
from civmed.errors import (
    CivmedError,
    CompositionError,
    NegativeVarianceError,
    PreconditionError,
)
from civmed.gmm import (
    MomentSystem,
    linear_moment_system,
    sandwich_at,
    solve_linear_moments,
    stack_moments,
)
from civmed.me_variance import estimate_me_variance, sigma2_moment_system
from civmed.mediation.bootstrap import bootstrap_ci
from civmed.mediation.correction import (
    corrected_least_squares,
    corrected_system,
    design_derivative,
)
from civmed.mediation.effects import (
    ESTIMANDS,
    EffectEstimate,
    EffectReport,
    LevelEffects,
    effect_key,
    effect_model_for,
    effects_from_rows,
    level_masks,
    mediator_betas,
)
from civmed.mediation.mediator import MediatorFit, MediatorModelSpec, fit_mediator
from civmed.terms import Term, evaluate_terms, parse_terms, resolve_layout

PIPELINES = ("NAIVE", "IVZ_IVY", "GMMZ_IVY", "IVZ_GMMY", "MOM_SENS")
INFERENCE = ("bootstrap", "sandwich", "none")
SIGMA2 = "sigma2"
_MOM_PATTERN = re.compile(r"^MOM_SENS\s*\(\s*(?:rr\s*=\s*)?([^)]+)\)$", re.IGNORECASE)


@dataclass(frozen=True)
class PipelineSpec:
    """A pipeline name with its assumed reliability for ``MOM_SENS``."""

    name: str
    rr: float | None = None

    def __post_init__(self):
        if self.name not in PIPELINES:
            raise PreconditionError(f"unknown pipeline {self.name!r}; choose from {PIPELINES}")
        if self.name == "MOM_SENS":
            if self.rr is None or not 0 < self.rr <= 1:
                raise PreconditionError(
                    f"MOM_SENS needs a reliability ratio in (0, 1], got {self.rr!r}")
        elif self.rr is not None:
            raise PreconditionError(f"{self.name} takes no reliability ratio")

    @classmethod
    def parse(cls, text: "str | PipelineSpec") -> "PipelineSpec":
        """Parse ``"IVZ_IVY"``, ``"IVZ-IVY"`` or ``"MOM_SENS(0.8)"``."""
        if isinstance(text, PipelineSpec):
            return text
        s = str(text).strip().upper().replace("-", "_")
        m = _MOM_PATTERN.match(s)
        if m:
            try:
                rr = float(m.group(1))
            except ValueError:
                raise PreconditionError(f"bad reliability in {text!r}") from None
            return cls("MOM_SENS", rr)
        return cls(s)

    @property
    def label(self) -> str:
        return f"MOM_SENS({self.rr:g})" if self.name == "MOM_SENS" else self.name


@dataclass(frozen=True)
class MediationModel:
    """Outcome layout and mediator model shape.

    ``outcome_terms`` may use the exposure, the mediator and the clean
    covariates; the exposure must enter linearly for the corrected
    pipelines.
    """

    outcome_terms: tuple[str, ...]
    mediator: MediatorModelSpec

    def __post_init__(self):
        object.__setattr__(self, "outcome_terms",
                           tuple(t.label for t in parse_terms(self.outcome_terms)))

    @classmethod
    def default(cls, roles: RoleMap, interaction: bool = False) -> "MediationModel":
        """``Y ~ 1 + A + Z + C`` plus ``A*Z`` and ``A*moderator`` when requested."""
        if roles.exposure_or_mediator is None:
            raise PreconditionError("mediation roles need the mediator column")
        a, z = roles.error_prone[0], roles.exposure_or_mediator
        terms = ["1", a, z, *roles.clean_covariates]
        if interaction:
            terms.append(f"{a}*{z}")
        if roles.moderator:
            terms.append(f"{a}*{roles.moderator}")
        return cls(tuple(terms), MediatorModelSpec.default(roles))

    @property
    def k_star(self) -> int:
        """Number of outcome terms free of the mediator."""
        z = {Term.parse(b).columns[0] for b in self.mediator.b_terms}
        return sum(1 for t in parse_terms(self.outcome_terms) if not z & set(t.columns))

    def to_dict(self) -> dict:
        return {"outcome_terms": list(self.outcome_terms),
                "mediator": self.mediator.to_dict()}


@dataclass(frozen=True)
class PipelineConfig:
    """Settings shared by every pipeline run.

    Parameters
    ----------
    contrast : (a', a'')
        Exposure values compared.
    moderator_levels : sequence of float, optional
        Report effects within these moderator levels; pooled otherwise.
    inference : {"bootstrap", "sandwich", "none"}
    B, seed, level
        Bootstrap resamples, its seed and the interval level.
    outcome_builder : str
        Constructed-instrument builder for the outcome model.
    mediator_mode : {"simplified", "plugin_optimal"}
        Instrument of the variance-corrected mediator fit.
    conditional_variance
        ``Var(A*|C)`` for the simplified mediator instrument; constant
        when ``None``.
    allow_negative_sigma2 : bool
        Clamp a negative estimated variance to 0 instead of failing.
    """

    contrast: tuple[float, float] = (1.0, 0.0)
    moderator_levels: tuple[float, ...] | None = None
    inference: str = "bootstrap"
    B: int = 500
    seed: int | None = None
    level: float = 0.95
    nuisance: NuisanceConfig = field(default_factory=NuisanceConfig)
    outcome_builder: str = "efficient_star"
    mediator_mode: str = "simplified"
    conditional_variance: object = None
    allow_negative_sigma2: bool = False
    weak_threshold: float = 10.0
    threads: int = 1

    def __post_init__(self):
        if self.inference not in INFERENCE:
            raise PreconditionError(f"inference must be one of {INFERENCE}")
        object.__setattr__(self, "contrast", tuple(float(c) for c in self.contrast))
        if self.moderator_levels is not None:
            object.__setattr__(self, "moderator_levels",
                               tuple(float(v) for v in self.moderator_levels))

    def to_dict(self) -> dict:
        cv = self.conditional_variance
        return {
            "contrast": list(self.contrast),
            "moderator_levels": None if self.moderator_levels is None
            else list(self.moderator_levels),
            "inference": self.inference, "B": self.B, "seed": self.seed,
            "level": self.level, "nuisance": self.nuisance.to_dict(),
            "outcome_builder": self.outcome_builder, "mediator_mode": self.mediator_mode,
            "conditional_variance": cv if cv is None or isinstance(cv, (str, float, int))
            else "array",
            "allow_negative_sigma2": self.allow_negative_sigma2,
            "weak_threshold": self.weak_threshold, "threads": self.threads,
        }


class FitCache:
    """Constructed-instrument fits of one dataset, shared across pipelines."""

    def __init__(self, ds: Dataset):
        self.ds = ds
        self._store: dict = {}

    def get(self, ds: Dataset, key, make):
        if ds is not self.ds:
            return make()
        if key not in self._store:
            self._store[key] = make()
        return self._store[key]


@dataclass(frozen=True, eq=False)
class PipelineEstimate:
    """Stage-by-stage estimates of one pipeline run on one dataset."""

    spec: PipelineSpec
    outcome: OutcomeFit
    mediator: MediatorFit
    outcome_method: str
    sigma2: float | None
    sigma2_used: float | None
    sigma2_source: str | None
    sigma2_detail: dict | None
    levels: tuple[LevelEffects, ...]
    masks: list
    warnings: tuple[str, ...]

    def flat(self, moderator: str | None) -> dict[str, float]:
        return {effect_key(e, lv.level, moderator): lv.get(e).point
                for lv in self.levels for e in ESTIMANDS}


@contextlib.contextmanager
def _stage(name: str):
    try:
        yield
    except CivmedError as exc:
        if exc.stage is None:
            exc.stage = name
        raise


def _prefixed(prefix: str, labels: Sequence[str]) -> tuple[str, ...]:
    return tuple(f"{prefix}:{lab}" for lab in labels)


def _outcome_roles(roles: RoleMap) -> RoleMap:
    return RoleMap(outcome=roles.outcome, error_prone=roles.error_prone,
                   clean_covariates=roles.clean_covariates,
                   exposure_or_mediator=roles.exposure_or_mediator,
                   moderator=roles.moderator)


def _raw_outcome_fit(ds: Dataset, roles: RoleMap, layout, sigma2: float | None) -> OutcomeFit:
    """Least squares, or its known-variance correction when ``sigma2`` is set."""
    terms = resolve_layout(roles, layout)
    X = evaluate_terms(terms, ds)
    y = ds[roles.outcome]
    labels = tuple(t.label for t in terms)
    if sigma2 is None:
        gmm = solve_linear_moments(X, X, y, labels=labels)
        kind = "naive_ols"
    else:
        gmm = corrected_least_squares(ds, terms, y, roles.error_prone[0], sigma2, labels)
        kind = "sigma_corrected"
    S = InstrumentMatrix(S=X, builder="raw_design", terms=terms)
    return OutcomeFit(gmm=gmm, roles=roles, theta_labels=labels, terms=terms,
                      instrument=S, kind=kind)


def _checked_sigma2(sigma2: float, config: PipelineConfig) -> float:
    if sigma2 < 0 and not config.allow_negative_sigma2:
        raise NegativeVarianceError(
            f"estimated measurement-error variance {sigma2:.4g} is negative; refusing "
            "to correct (allow_negative_sigma2 uses max(sigma2, 0))")
    return max(sigma2, 0.0)


def estimate_pipeline(ds: Dataset, roles: RoleMap, model: MediationModel,
                      pipeline, config: PipelineConfig,
                      cache: FitCache | None = None) -> PipelineEstimate:
    """Point estimates of every stage of one pipeline (no inference)."""
    spec = PipelineSpec.parse(pipeline)
    roles = _outcome_roles(roles)
    a = roles.error_prone[0]
    notes: list[str] = []
    cache = cache or FitCache(ds)

    def outcome_iv() -> OutcomeFit:
        return cache.get(ds, ("outcome_iv", config.outcome_builder), lambda: fit_constructed_iv(
            ds, roles, model.outcome_terms, config.outcome_builder, config.nuisance,
            weak_threshold=config.weak_threshold))

    def mediator_iv() -> MediatorFit:
        return cache.get(ds, ("mediator_iv",), lambda: fit_mediator(
            ds, roles, model.mediator, "constructed_iv", nuisance_config=config.nuisance,
            weak_threshold=config.weak_threshold))

    def mediator_corrected(s2: float) -> MediatorFit:
        return fit_mediator(ds, roles, model.mediator, "gmm_sigma_corrected", s2,
                            mode=config.mediator_mode,
                            conditional_variance=config.conditional_variance,
                            allow_negative_sigma2=config.allow_negative_sigma2)

    sigma2 = used = source = detail = None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        name = spec.name
        if name == "NAIVE":
            with _stage("outcome_fit"):
                outcome = _raw_outcome_fit(ds, roles, model.outcome_terms, None)
            with _stage("mediator_fit"):
                mediator = fit_mediator(ds, roles, model.mediator, "naive_ols")
        elif name == "IVZ_IVY":
            with _stage("outcome_fit"):
                outcome = outcome_iv()
            with _stage("mediator_fit"):
                mediator = mediator_iv()
        elif name == "GMMZ_IVY":
            with _stage("outcome_fit"):
                outcome = outcome_iv()
            with _stage("me_variance"):
                est = estimate_me_variance(ds, roles, outcome, emit_warnings=False)
                sigma2, source, detail = est.sigma2, "outcome", est.to_dict()
                notes.extend(est.warnings)
            with _stage("mediator_fit"):
                used = _checked_sigma2(sigma2, config)
                mediator = mediator_corrected(used)
        elif name == "IVZ_GMMY":
            with _stage("mediator_fit"):
                mediator = mediator_iv()
            with _stage("me_variance"):
                est = estimate_me_variance(ds, roles, mediator, emit_warnings=False)
                sigma2, source, detail = est.sigma2, "mediator", est.to_dict()
                notes.extend(est.warnings)
            with _stage("outcome_fit"):
                used = _checked_sigma2(sigma2, config)
                outcome = _raw_outcome_fit(ds, roles, model.outcome_terms, used)
        else:
            with _stage("me_variance"):
                sigma2 = used = (1.0 - spec.rr) * float(np.var(ds[a]))
                source = "reliability"
                detail = {"sigma2": sigma2, "reliability": spec.rr}
            with _stage("outcome_fit"):
                outcome = _raw_outcome_fit(ds, roles, model.outcome_terms, sigma2)
            with _stage("mediator_fit"):
                mediator = mediator_corrected(sigma2)
        with _stage("effects"):
            em = effect_model_for(outcome, mediator)
            nde, nie = em.row_effects(ds, outcome.theta, mediator_betas(mediator),
                                      config.contrast)
            masks = level_masks(ds, roles.moderator, config.moderator_levels)
            levels = effects_from_rows(nde, nie, masks)
    notes.extend(str(w.message) for w in caught)
    outcome_method = {"NAIVE": "naive_ols", "IVZ_GMMY": "sigma_corrected",
                      "MOM_SENS": "sigma_corrected"}.get(spec.name, "constructed_iv")
    return PipelineEstimate(spec=spec, outcome=outcome, mediator=mediator,
                            outcome_method=outcome_method, sigma2=sigma2, sigma2_used=used,
                            sigma2_source=source, sigma2_detail=detail, levels=levels,
                            masks=masks, warnings=tuple(dict.fromkeys(notes)))


def _effect_system(ds: Dataset, est: PipelineEstimate, y_labels, m_labels: dict,
                   contrast, moderator) -> MomentSystem:
    em = effect_model_for(est.outcome, est.mediator)
    z = est.mediator.roles.exposure_or_mediator
    powers = {b: Term.parse(b).power_of(z) for b in m_labels}
    out_labels = tuple(effect_key(e, lv, moderator) for lv, _ in est.masks for e in ESTIMANDS)
    labels = tuple(y_labels) + tuple(lab for b in m_labels for lab in m_labels[b]) + out_labels
    d = len(y_labels)
    sizes = [len(m_labels[b]) for b in m_labels]
    W = np.column_stack([mask.astype(float) for _, mask in est.masks])

    def evaluator(_data, params):
        theta = params[:d]
        betas, pos = {}, d
        for b, k in zip(m_labels, sizes):
            betas[powers[b]] = params[pos:pos + k]
            pos += k
        nde, nie = em.row_effects(ds, theta, betas, contrast)
        eff = params[pos:].reshape(-1, 3)
        cols = []
        for j in range(W.shape[1]):
            w = W[:, j]
            cols += [w * (nde - eff[j, 0]), w * (nie - eff[j, 1]),
                     w * (nde + nie - eff[j, 2])]
        return np.column_stack(cols)

    return MomentSystem(evaluator=evaluator, labels=labels, dim_moments=len(out_labels))


def joint_system(ds: Dataset, est: PipelineEstimate, config: PipelineConfig,
                 model: MediationModel) -> tuple[MomentSystem, np.ndarray]:
    """Stacked moments of every stage and the stage-wise estimates.

    Blocks: outcome moments, the ``sigma^2`` moment when it is estimated,
    one block per mediator transformation, and indicator-weighted effect
    rows per moderator level.
    """
    outcome, mediator = est.outcome, est.mediator
    roles = outcome.roles
    a = roles.error_prone[0]
    y_labels = _prefixed("Y", outcome.theta_labels)
    X = evaluate_terms(outcome.terms, ds)
    y = ds[roles.outcome]
    blocks: list[MomentSystem] = []
    values: dict[str, float] = dict(zip(y_labels, outcome.theta))
    if est.outcome_method == "sigma_corrected":
        dX = design_derivative(outcome.terms, ds, a)
        blocks.append(corrected_system(X, X, y, dX, dX, y_labels))
    else:
        blocks.append(linear_moment_system(outcome.instrument.S, X, y, y_labels))

    m_labels = {b: _prefixed("M", fit.labels) for b, fit in mediator.fits.items()}
    for b, fit in mediator.fits.items():
        values.update(zip(m_labels[b], fit.theta))
    primary_labels = m_labels[mediator.primary]

    name = est.spec.name
    if name == "GMMZ_IVY":
        blocks.append(sigma2_moment_system(outcome, ds, theta_labels=y_labels))
    elif name == "IVZ_GMMY":
        blocks.append(sigma2_moment_system(mediator, ds, theta_labels=primary_labels))
    elif name == "MOM_SENS":
        a_star = ds[a]
        keep = 1.0 - est.spec.rr
        blocks.append(MomentSystem(
            evaluator=lambda _d, t: np.column_stack(
                [a_star - t[0], keep * (a_star - t[0]) ** 2 - t[1]]),
            labels=("mean_A", SIGMA2), dim_moments=2,
            jacobian=lambda _d, t: np.array(
                [[-1.0, 0.0], [-2.0 * keep * np.mean(a_star - t[0]), -1.0]])))
        values["mean_A"] = float(np.mean(a_star))
    if est.sigma2_used is not None:
        values[SIGMA2] = est.sigma2_used

    for b, blk in mediator.blocks.items():
        if mediator.method == "gmm_sigma_corrected":
            blocks.append(corrected_system(blk.S, blk.X, blk.y, blk.dS, blk.dX, m_labels[b]))
        else:
            blocks.append(linear_moment_system(blk.S, blk.X, blk.y, m_labels[b]))
    blocks.append(_effect_system(ds, est, y_labels, m_labels, config.contrast,
                                 roles.moderator))
    for lv in est.levels:
        for e in ESTIMANDS:
            values[effect_key(e, lv.level, roles.moderator)] = lv.get(e).point

    counts: dict[str, int] = {}
    for s in blocks:
        for lab in s.labels:
            counts[lab] = counts.get(lab, 0) + 1
    shared = [lab for lab, c in counts.items() if c > 1]
    system = stack_moments(blocks, shared=shared)
    params = np.array([values[lab] for lab in system.labels])
    return system, params


def _diagnostics(est: PipelineEstimate) -> dict:
    out = {
        "pipeline": est.spec.label,
        "outcome_method": est.outcome_method,
        "outcome": {"labels": list(est.outcome.theta_labels),
                    "theta": est.outcome.theta.tolist()},
        "mediator_method": est.mediator.method,
        "mediator": {b: {"labels": list(f.labels), "theta": f.theta.tolist()}
                     for b, f in est.mediator.fits.items()},
        "sigma2": est.sigma2,
        "sigma2_used": est.sigma2_used,
        "sigma2_source": est.sigma2_source,
        "sigma2_detail": est.sigma2_detail,
        "f_tests": [f.to_dict() for f in est.outcome.f_tests + est.mediator.f_tests],
    }
    out["weak_instrument"] = any(f["is_weak"] for f in out["f_tests"])
    return out


def _with_intervals(levels, lower: dict, upper: dict, se: dict, moderator):
    out = []
    for lv in levels:
        parts = {}
        for e in ESTIMANDS:
            k = effect_key(e, lv.level, moderator)
            parts[e] = EffectEstimate(lv.get(e).point, lower[k], upper[k], se[k])
        out.append(LevelEffects(level=lv.level, nde=parts["NDE"], nie=parts["NIE"],
                                te=parts["TE"], n_rows=lv.n_rows))
    return tuple(out)


def run_pipeline(ds: Dataset, roles: RoleMap, model: MediationModel | None = None,
                 pipeline="IVZ_IVY", config: PipelineConfig | None = None,
                 cache: FitCache | None = None) -> EffectReport:
    """Run one pipeline and attach intervals.

    Parameters
    ----------
    roles : RoleMap
        Outcome ``Y``, one error-prone exposure, clean covariates, the
        mediator as ``exposure_or_mediator`` and an optional moderator.
    model : MediationModel, optional
        Defaults to :meth:`MediationModel.default`.
    pipeline : str or PipelineSpec
    config : PipelineConfig
        ``inference="bootstrap"`` (the default) needs ``seed``.

    Raises
    ------
    CivmedError
        Any stage failure, with ``stage`` naming the failing step.
    """
    config = config or PipelineConfig()
    spec = PipelineSpec.parse(pipeline)
    if roles.exposure_or_mediator is None:
        raise PreconditionError("mediation roles need the mediator column")
    if config.inference == "bootstrap" and config.seed is None:
        raise PreconditionError("bootstrap inference needs an explicit seed")
    model = model or MediationModel.default(roles)
    est = estimate_pipeline(ds, roles, model, spec, config, cache)
    moderator = roles.moderator
    report_warnings = list(est.warnings)
    levels = est.levels
    n_failed, draws, B = 0, None, None

    if config.inference == "sandwich":
        with _stage("inference"):
            system, params = joint_system(ds, est, config, model)
            fit = sandwich_at(system, ds, params)
        zq = float(scipy.stats.norm.ppf(0.5 + config.level / 2))
        se = {lab: float(s) for lab, s in zip(fit.labels, fit.se)}
        lower = {k: est.flat(moderator)[k] - zq * se[k] for k in est.flat(moderator)}
        upper = {k: est.flat(moderator)[k] + zq * se[k] for k in est.flat(moderator)}
        levels = _with_intervals(levels, lower, upper, se, moderator)
    elif config.inference == "bootstrap":
        def closure(data: Dataset) -> dict[str, float]:
            return estimate_pipeline(data, roles, model, spec, config).flat(moderator)

        with _stage("inference"):
            boot = bootstrap_ci(closure, ds, config.B, config.seed, config.level,
                                threads=config.threads)
        levels = _with_intervals(levels, boot.lower, boot.upper, boot.se, moderator)
        n_failed, draws, B = boot.n_failed, boot.draws, boot.B
        outside = [k for k, v in boot.point.items()
                   if not boot.lower[k] <= v <= boot.upper[k]]
        if outside:
            report_warnings.append(
                f"percentile interval excludes the point estimate for {', '.join(outside)}; "
                "the bootstrap distribution is skewed or the estimator is unstable")

    return EffectReport(method=spec.label, contrast=config.contrast, levels=levels,
                        moderator=moderator, inference=config.inference,
                        confidence_level=config.level, bootstrap_B=B, n_failed=n_failed,
                        diagnostics=_diagnostics(est), warnings=tuple(report_warnings),
                        draws=draws)


def run_pipelines(ds: Dataset, roles: RoleMap, model: MediationModel | None = None,
                  pipelines: Sequence = PIPELINES[:4],
                  config: PipelineConfig | None = None) -> dict[str, EffectReport]:
    """Run several pipelines on one dataset, sharing constructed-instrument fits."""
    cache = FitCache(ds)
    out = {}
    for p in pipelines:
        spec = PipelineSpec.parse(p)
        out[spec.label] = run_pipeline(ds, roles, model, spec, config, cache)
    return out
