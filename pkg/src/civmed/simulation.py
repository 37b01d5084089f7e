"""Synthetic data with known truth and a Monte Carlo harness for the pipelines.

Mediation data (one covariate ``C``, latent exposure ``A`` with unit
variance, mediator ``Z``, outcome ``Y``)::

    C ~ N(0, 1)
    A = 0.5 C + 0.5 (C^2 - 1) + 0.5 u          valid scenarios
    A = 0.5 C + sqrt(0.75) u                    linear_nuisance_violation
    Z = beta0 + beta_C C + beta_A A + N(0, 1)
    Y = theta0 + theta_C C + theta_A A + theta_Z Z (+ theta_AZ A Z) + N(0, 1)
    A* = A + N(0, sigma^2),  sigma^2 = (1 - rr) / rr

Outcome-model data for the constructed-instrument fits::

    C1 ~ N(2, 1),  Z = C1^2 + N(0, 1),  Y = 1 + 2 C1 + 1.5 Z + N(0, 1)
    C1* = C1 + N(0, sigma^2)
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from civmed.data import Dataset, RoleMap
from civmed.errors import NumericalError, PreconditionError
from civmed.mediation.correction import design_derivative, solve_corrected_moments
from civmed.mediation.effects import ESTIMANDS, EffectModel
from civmed.mediation.pipelines import (
    MediationModel,
    PipelineConfig,
    PipelineSpec,
    FitCache,
    run_pipeline,
)
from civmed.terms import evaluate_terms, parse_terms

SCENARIOS = ("no_interaction", "exposure_mediator_interaction", "linear_nuisance_violation")
DEFAULT_COEFFICIENTS = {
    "beta0": 0.0, "beta_C": 0.5, "beta_A": 0.5,
    "theta0": 0.0, "theta_C": 0.5, "theta_A": 1.0, "theta_Z": 0.5, "theta_AZ": 0.25,
}
DEFAULT_PIPELINES = ("NAIVE", "IVZ_IVY", "GMMZ_IVY", "IVZ_GMMY", "MOM_SENS")
UNRELIABLE_FRACTION = 0.10
MEDIATION_ROLES = RoleMap(outcome="Y", error_prone=("A",), clean_covariates=("C",),
                          exposure_or_mediator="Z")
OUTCOME_ROLES = RoleMap(outcome="Y", error_prone=("C1",), exposure_or_mediator="Z")


def error_variance(reliability: float, latent_variance: float = 1.0) -> float:
    """``sigma^2`` giving ``latent / (latent + sigma^2) = reliability``."""
    if not 0 < reliability <= 1:
        raise PreconditionError(f"reliability must lie in (0, 1], got {reliability!r}")
    return latent_variance * (1.0 - reliability) / reliability


@dataclass(frozen=True)
class DgpSpec:
    """One mediation data-generating process.

    ``theta_AZ`` only acts in the interaction scenario.
    """

    scenario: str = "no_interaction"
    reliability: float = 0.7
    n: int = 1000
    coefficients: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise PreconditionError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        error_variance(self.reliability)
        if self.n < 2:
            raise PreconditionError(f"n must be at least 2, got {self.n}")
        unknown = set(self.coefficients) - set(DEFAULT_COEFFICIENTS)
        if unknown:
            raise PreconditionError(f"unknown coefficient(s) {sorted(unknown)}")
        object.__setattr__(self, "coefficients",
                           {**DEFAULT_COEFFICIENTS, **{k: float(v) for k, v in
                                                       self.coefficients.items()}})

    @property
    def sigma2(self) -> float:
        return error_variance(self.reliability)

    @property
    def interaction(self) -> float:
        if self.scenario == "exposure_mediator_interaction":
            return self.coefficients["theta_AZ"]
        return 0.0

    def model(self, roles: RoleMap = MEDIATION_ROLES) -> MediationModel:
        """The correctly specified fitting model for this scenario."""
        return MediationModel.default(roles, interaction=self.interaction != 0.0)

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "reliability": self.reliability, "n": self.n,
                "coefficients": dict(sorted(self.coefficients.items())),
                "seed": self.seed, "sigma2": self.sigma2}


@dataclass(frozen=True, eq=False)
class SimulatedData:
    """Observed data plus the hidden truth."""

    dataset: Dataset
    latent: np.ndarray
    sigma2: float
    truth: dict[str, float]


def true_effects(spec: DgpSpec, contrast=(1.0, 0.0)) -> dict[str, float]:
    """NDE, NIE and TE with ``C`` averaged out (``E C = 0``)."""
    a1, a0 = map(float, contrast)
    c = spec.coefficients
    t_az = spec.interaction
    nde = (a1 - a0) * (c["theta_A"] + t_az * (c["beta0"] + c["beta_A"] * a0))
    nie = (c["theta_Z"] + t_az * a1) * c["beta_A"] * (a1 - a0)
    return {"NDE": nde, "NIE": nie, "TE": nde + nie}


def _latent_exposure(scenario: str, c: np.ndarray, u: np.ndarray) -> np.ndarray:
    if scenario == "linear_nuisance_violation":
        return 0.5 * c + math.sqrt(0.75) * u
    return 0.5 * c + 0.5 * (c * c - 1.0) + 0.5 * u


def _mediation_columns(spec: DgpSpec, c, u, e_z, e_y, e_a):
    k = spec.coefficients
    a = _latent_exposure(spec.scenario, c, u)
    z = k["beta0"] + k["beta_C"] * c + k["beta_A"] * a + e_z
    y = (k["theta0"] + k["theta_C"] * c + k["theta_A"] * a + k["theta_Z"] * z
         + spec.interaction * a * z + e_y)
    a_star = a + math.sqrt(spec.sigma2) * e_a
    return a, {"Y": y, "Z": z, "A": a_star, "C": c}


def generate_dataset(spec: DgpSpec, rng: np.random.Generator | None = None,
                     contrast=(1.0, 0.0)) -> SimulatedData:
    """Draw ``(Y, Z, A*, C)``; the observed exposure column is ``A``.

    ``rng`` overrides the generator seeded by ``spec.seed``.
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    draws = rng.standard_normal((5, spec.n))
    a, cols = _mediation_columns(spec, *draws)
    return SimulatedData(dataset=Dataset(cols), latent=a, sigma2=spec.sigma2,
                         truth=true_effects(spec, contrast))


def quadrature_dataset(spec: DgpSpec, nodes: int = 8) -> tuple[Dataset, np.ndarray]:
    """Tensor Gauss-Hermite nodes over the five standard normals.

    Weighted averages over the returned rows equal population means of any
    polynomial of total degree below ``2 * nodes`` in the shocks.
    """
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / w.sum()
    grids = np.meshgrid(*([x] * 5), indexing="ij")
    weights = np.prod(np.meshgrid(*([w] * 5), indexing="ij"), axis=0).reshape(-1)
    shocks = [g.reshape(-1) for g in grids]
    _, cols = _mediation_columns(spec, *shocks)
    return Dataset(cols), weights


def mom_sens_limit(spec: DgpSpec, assumed_reliability: float,
                   contrast=(1.0, 0.0)) -> dict[str, float]:
    """Probability limit of the ``MOM_SENS`` effects at an assumed reliability.

    Population moments come from :func:`quadrature_dataset`, so the result
    is exact for this polynomial data-generating process.
    """
    ds, w = quadrature_dataset(spec)
    a = ds["A"]
    var_a = float(np.dot(w, (a - np.dot(w, a)) ** 2))
    sigma2 = (1.0 - assumed_reliability) * var_a
    # Rows scaled by sqrt(n w) turn the weighted moments into plain means.
    sw = np.sqrt(w * ds.n)[:, None]
    model = spec.model()

    def limit(terms, y):
        X = evaluate_terms(terms, ds) * sw
        dX = design_derivative(terms, ds, "A") * sw
        return solve_corrected_moments(X, X, y * sw[:, 0], dX, dX, sigma2,
                                       [t.label for t in terms]).theta

    out_terms = parse_terms(model.outcome_terms)
    theta = limit(out_terms, ds["Y"])
    beta = limit(model.mediator.design_terms("A"), ds["Z"])
    em = EffectModel(outcome_terms=out_terms, exposure="A", mediator="Z",
                     h1_terms=parse_terms(model.mediator.h1_terms),
                     h2_terms=parse_terms(model.mediator.h2_terms),
                     b_terms=parse_terms(model.mediator.b_terms))
    nde, nie = em.row_effects(ds, theta, {1: beta}, contrast)
    d, i = float(np.dot(w, nde)), float(np.dot(w, nie))
    return {"NDE": d, "NIE": i, "TE": d + i}


@dataclass(frozen=True)
class OutcomeDgpSpec:
    """Outcome-model data ``Y = 1 + 2 C1 + 1.5 Z`` with ``Z = C1^2 + noise``.

    ``c1_mean`` must be non-zero: with ``C1`` centred at 0 the regression of
    ``C1`` on ``Z`` is flat and no function of ``Z`` identifies the model.
    """

    reliability: float = 0.7
    n: int = 2000
    c1_mean: float = 2.0
    seed: int = 0
    error_free: bool = False

    @property
    def sigma2(self) -> float:
        return 0.0 if self.error_free else error_variance(self.reliability)

    @property
    def theta(self) -> dict[str, float]:
        return {"1": 1.0, "C1": 2.0, "Z": 1.5}


def generate_outcome_dataset(spec: OutcomeDgpSpec,
                             rng: np.random.Generator | None = None) -> SimulatedData:
    """Draw ``(Y, Z, C1*)``; the observed covariate column is ``C1``."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    e = rng.standard_normal((4, spec.n))
    c1 = spec.c1_mean + e[0]
    z = c1 * c1 + e[1]
    y = 1.0 + 2.0 * c1 + 1.5 * z + e[2]
    c1_star = c1 + math.sqrt(spec.sigma2) * e[3]
    return SimulatedData(dataset=Dataset({"Y": y, "Z": z, "C1": c1_star}), latent=c1,
                         sigma2=spec.sigma2, truth=dict(spec.theta))


# --------------------------------------------------------------------------
# Monte Carlo


@dataclass(frozen=True)
class MonteCarloGrid:
    """Scenarios x reliabilities at one sample size, and the pipelines to run.

    A bare ``"MOM_SENS"`` pipeline assumes the cell's true reliability.
    """

    scenarios: tuple[str, ...] = ("no_interaction",)
    reliabilities: tuple[float, ...] = (0.7, 0.8, 0.9)
    n: int = 1000
    pipelines: tuple[str, ...] = DEFAULT_PIPELINES
    coefficients: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "scenarios", tuple(self.scenarios))
        object.__setattr__(self, "reliabilities", tuple(float(r) for r in self.reliabilities))
        object.__setattr__(self, "pipelines", tuple(self.pipelines))
        if not self.scenarios or not self.reliabilities or not self.pipelines:
            raise PreconditionError("a grid needs scenarios, reliabilities and pipelines")
        for p in self.pipelines:
            if p.strip().upper() != "MOM_SENS":
                PipelineSpec.parse(p)
        self.specs()

    @classmethod
    def named(cls, name: str) -> "MonteCarloGrid":
        if name == "default":
            return cls()
        if name == "quick":
            return cls(reliabilities=(0.7,), n=500)
        raise PreconditionError(f"unknown grid {name!r}; use 'default', 'quick' or a file")

    @classmethod
    def from_dict(cls, d: dict) -> "MonteCarloGrid":
        allowed = {"scenarios", "reliabilities", "n", "pipelines", "coefficients"}
        unknown = set(d) - allowed
        if unknown:
            raise PreconditionError(f"unknown grid field(s) {sorted(unknown)}")
        return cls(**d)

    def specs(self) -> list[DgpSpec]:
        return [DgpSpec(scenario=s, reliability=r, n=self.n,
                        coefficients=dict(self.coefficients))
                for s in self.scenarios for r in self.reliabilities]

    def pipeline_for(self, name: str, reliability: float) -> PipelineSpec:
        if name.strip().upper() == "MOM_SENS":
            return PipelineSpec("MOM_SENS", reliability)
        return PipelineSpec.parse(name)

    def to_dict(self) -> dict:
        return {"scenarios": list(self.scenarios), "reliabilities": list(self.reliabilities),
                "n": self.n, "pipelines": list(self.pipelines),
                "coefficients": dict(sorted(self.coefficients.items()))}


@dataclass(frozen=True)
class CellSummary:
    """Bias, variance and coverage of one estimand in one grid cell."""

    scenario: str
    reliability: float
    pipeline: str
    estimand: str
    truth: float
    bias: float
    variance: float
    coverage: float
    mc_se: float
    mean_se: float
    n_ok: int
    n_failed: int
    n_weak: int
    unreliable: bool

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def summarize_cell(estimates: Sequence[float], lower: Sequence[float],
                   upper: Sequence[float], truth: float) -> dict[str, float]:
    """Bias, ``R - 1`` variance, coverage and the MC SE of the mean."""
    est = np.asarray(estimates, dtype=float)
    if est.size == 0:
        return {"bias": math.nan, "variance": math.nan, "coverage": math.nan,
                "mc_se": math.nan}
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    var = float(np.var(est, ddof=1)) if est.size > 1 else math.nan
    return {"bias": float(est.mean() - truth), "variance": var,
            "coverage": float(np.mean((lo <= truth) & (truth <= hi))),
            "mc_se": math.sqrt(var / est.size) if est.size > 1 else math.nan}


@dataclass(frozen=True)
class MonteCarloReport:
    cells: tuple[CellSummary, ...]
    R: int
    seed: int
    grid: MonteCarloGrid
    inference: str
    level: float
    truths: dict

    def cell(self, pipeline: str, estimand: str, reliability: float | None = None,
             scenario: str | None = None) -> CellSummary:
        for c in self.cells:
            if (c.pipeline == pipeline and c.estimand == estimand
                    and (reliability is None or c.reliability == reliability)
                    and (scenario is None or c.scenario == scenario)):
                return c
        raise KeyError((pipeline, estimand, reliability, scenario))

    def to_dict(self) -> dict:
        return {"R": self.R, "seed": self.seed, "grid": self.grid.to_dict(),
                "inference": self.inference, "level": self.level, "truths": self.truths,
                "cells": [c.to_dict() for c in self.cells]}


def _replicate(spec: DgpSpec, grid: MonteCarloGrid, rng, config: PipelineConfig):
    sim = generate_dataset(spec, rng, config.contrast)
    ds = sim.dataset
    model = spec.model()
    cache = FitCache(ds)
    out = {}
    for name in grid.pipelines:
        p = grid.pipeline_for(name, spec.reliability)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                rep = run_pipeline(ds, MEDIATION_ROLES, model, p, config, cache)
        except NumericalError:
            out[p.label] = None
            continue
        out[p.label] = ({e: (rep.get(e).point, rep.get(e).lower, rep.get(e).upper,
                             rep.get(e).se) for e in ESTIMANDS},
                        bool(rep.diagnostics.get("weak_instrument")))
    return out


def run_monte_carlo(grid: MonteCarloGrid, R: int, seed: int, *, inference: str = "sandwich",
                    level: float = 0.95, config: PipelineConfig | None = None,
                    pipelines: Sequence[str] | None = None, threads: int = 1,
                    bootstrap_B: int = 200) -> MonteCarloReport:
    """Replicate every grid cell ``R`` times and summarise each pipeline.

    Replicate ``r`` of cell ``k`` draws from ``default_rng([seed, k, r])``,
    so the report depends only on ``(grid, R, seed)``. Numerical failures
    are excluded from the summaries and counted; a cell with more than 10%
    failures is flagged unreliable.
    """
    if R < 2:
        raise PreconditionError(f"Monte Carlo needs R >= 2, got {R}")
    if pipelines is not None:
        grid = replace(grid, pipelines=tuple(pipelines))
    base = config or PipelineConfig()
    cfg = replace(base, inference=inference, level=level, B=bootstrap_B,
                  seed=seed if inference == "bootstrap" else base.seed)
    cells: list[CellSummary] = []
    truths = {}
    for k, spec in enumerate(grid.specs()):
        truth = true_effects(spec, cfg.contrast)
        truths[f"{spec.scenario}@{spec.reliability:g}"] = truth

        def one(r, spec=spec, k=k):
            return _replicate(spec, grid, np.random.default_rng([seed, k, r]), cfg)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(one, range(R)))
        else:
            results = [one(r) for r in range(R)]
        for name in grid.pipelines:
            label = grid.pipeline_for(name, spec.reliability).label
            ok = [res[label] for res in results if res[label] is not None]
            failed = R - len(ok)
            n_weak = sum(1 for _, weak in ok if weak)
            for e in ESTIMANDS:
                vals = [o[0][e] for o in ok]
                summ = summarize_cell([v[0] for v in vals],
                                      [math.nan if v[1] is None else v[1] for v in vals],
                                      [math.nan if v[2] is None else v[2] for v in vals],
                                      truth[e])
                ses = [v[3] for v in vals if v[3] is not None]
                cells.append(CellSummary(
                    scenario=spec.scenario, reliability=spec.reliability, pipeline=label,
                    estimand=e, truth=truth[e], n_ok=len(ok), n_failed=failed,
                    n_weak=n_weak, unreliable=failed > UNRELIABLE_FRACTION * R,
                    mean_se=float(np.mean(ses)) if ses else math.nan, **summ))
    return MonteCarloReport(cells=tuple(cells), R=R, seed=seed, grid=grid,
                            inference=inference, level=level, truths=truths)


# --------------------------------------------------------------------------
# Rendering

_COLUMNS = ("scenario", "reliability", "pipeline", "estimand", "truth", "bias",
            "variance", "coverage", "mc_se", "n_ok", "n_failed", "n_weak", "unreliable")
_TEXT = {"scenario", "pipeline", "estimand"}


def _fixed(value, digits: int = 3) -> str:
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, int):
        return str(value)
    if value is None or isinstance(value, float) and math.isnan(value):
        return "NA"
    return f"{value:.{digits}f}"


def render_report(report: MonteCarloReport, fmt: str = "markdown_table") -> str:
    """Markdown (3 decimals), CSV (full precision) or JSON text."""
    if fmt in ("markdown", "markdown_table", "md"):
        head = "| " + " | ".join(_COLUMNS) + " |"
        sep = "|" + "|".join("---" for _ in _COLUMNS) + "|"
        rows = ["| " + " | ".join(str(getattr(c, k)) if k in _TEXT else _fixed(getattr(c, k))
                                  for k in _COLUMNS) + " |" for c in report.cells]
        foot = (f"R = {report.R} replications, seed {report.seed}, "
                f"{report.inference} intervals at level {report.level:g}")
        return "\n".join([head, sep, *rows, foot]) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(_COLUMNS)
        for c in report.cells:
            w.writerow([getattr(c, k) if k in _TEXT or isinstance(getattr(c, k), (bool, int))
                        else repr(float(getattr(c, k))) for k in _COLUMNS])
        return buf.getvalue()
    if fmt == "json":
        from civmed.report import dumps
        return dumps(report.to_dict())
    raise PreconditionError(f"unknown report format {fmt!r}")


def load_report_csv(text: str) -> list[dict]:
    """Parse :func:`render_report` CSV back into typed rows."""
    rows = []
    for raw in csv.DictReader(io.StringIO(text)):
        row = {}
        for k, v in raw.items():
            if k in _TEXT:
                row[k] = v
            elif k == "unreliable":
                row[k] = v == "True"
            elif k in ("n_ok", "n_failed", "n_weak"):
                row[k] = int(v)
            else:
                row[k] = float(v)
        rows.append(row)
    return rows
