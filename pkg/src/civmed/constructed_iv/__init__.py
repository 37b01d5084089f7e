"""Constructed instrumental variables for error-prone covariates."""

from civmed.constructed_iv.ftest import FTestResult, first_stage_f_test, nuisance_f_test
from civmed.constructed_iv.instruments import InstrumentMatrix, build_instrument
from civmed.constructed_iv.nuisance import (
    NuisanceConfig,
    NuisanceFit,
    fit_nuisance_conditional_mean,
    polynomial_basis,
    with_outcome_variance,
)
from civmed.constructed_iv.outcome import (
    NonlinearPartialModel,
    OutcomeFit,
    ate_contrast,
    fit_constructed_iv,
    fit_outcome_linear_iv,
    fit_outcome_partially_linear,
)

__all__ = [
    "FTestResult", "InstrumentMatrix", "NonlinearPartialModel", "NuisanceConfig",
    "NuisanceFit", "OutcomeFit", "ate_contrast", "build_instrument",
    "first_stage_f_test", "fit_constructed_iv", "fit_nuisance_conditional_mean",
    "fit_outcome_linear_iv", "fit_outcome_partially_linear", "nuisance_f_test",
    "polynomial_basis", "with_outcome_variance",
]
