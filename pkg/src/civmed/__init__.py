"""Constructed instrumental variables for covariate and exposure measurement error."""

__version__ = "0.1.0"

from civmed.data import Dataset, RoleMap, load_dataset, transform_column
from civmed.errors import CivmedError, NumericalError, UserInputError

__all__ = ["CivmedError", "Dataset", "NumericalError", "RoleMap", "UserInputError",
           "__version__", "load_dataset", "transform_column"]
