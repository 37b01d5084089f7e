"""Mediation analysis with an error-prone exposure."""

from civmed.mediation.bootstrap import BootstrapResult, bootstrap_ci, resample_indices
from civmed.mediation.correction import (
    corrected_least_squares,
    corrected_system,
    design_derivative,
    solve_corrected_moments,
)
from civmed.mediation.effects import (
    EffectEstimate,
    EffectModel,
    EffectReport,
    LevelEffects,
    effect_key,
    estimate_effects,
)
from civmed.mediation.mediator import (
    MediatorFit,
    MediatorInstrument,
    MediatorModelSpec,
    build_mediator_instrument,
    fit_mediator,
    plugin_instrument,
)
from civmed.mediation.pipelines import (
    PIPELINES,
    FitCache,
    MediationModel,
    PipelineConfig,
    PipelineSpec,
    estimate_pipeline,
    joint_system,
    run_pipeline,
    run_pipelines,
)

__all__ = [
    "BootstrapResult", "EffectEstimate", "EffectModel", "EffectReport", "FitCache",
    "LevelEffects", "MediationModel", "MediatorFit", "MediatorInstrument",
    "MediatorModelSpec", "PIPELINES", "PipelineConfig", "PipelineSpec",
    "bootstrap_ci", "build_mediator_instrument", "corrected_least_squares",
    "corrected_system", "design_derivative", "effect_key", "estimate_effects",
    "estimate_pipeline", "fit_mediator", "joint_system", "plugin_instrument",
    "resample_indices", "run_pipeline", "run_pipelines", "solve_corrected_moments",
]
