"""Multi-group latent factor models with per-group time delays, fit by
variational inference in the time domain, with inducing points, or in the
frequency domain."""

from .data import Dataset, load_dataset, save_dataset
from .evaluate import leave_unit_out_r2, predict_lgo, r2_lgo
from .fit_freq import fit_frequency
from .fit_inducing import fit_inducing
from .fit_time import fit_time
from .numerics import ConfigError, NumericalError, ResourceGuardError
from .state import (
    FitReport,
    GpParams,
    Groups,
    Hyperparams,
    ModelState,
    RegressionPosterior,
    load_checkpoint,
    save_checkpoint,
)
from .synthesis import generate_scenario, ground_truth_state, make_scenario

__all__ = [
    "ConfigError",
    "Dataset",
    "FitReport",
    "GpParams",
    "Groups",
    "Hyperparams",
    "ModelState",
    "NumericalError",
    "RegressionPosterior",
    "ResourceGuardError",
    "fit_frequency",
    "fit_inducing",
    "fit_time",
    "generate_scenario",
    "ground_truth_state",
    "leave_unit_out_r2",
    "load_checkpoint",
    "load_dataset",
    "make_scenario",
    "predict_lgo",
    "r2_lgo",
    "save_checkpoint",
    "save_dataset",
    "__version__",
]

__version__ = "0.1.0"
