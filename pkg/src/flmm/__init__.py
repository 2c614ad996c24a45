"""Functional linear mixed-effects models.

Scalar responses regressed on functional covariates with a subject-level
random intercept and random slope function, fitted by penalized splines
and a REML-based EM algorithm, with GCV smoothing selection, FPCA
denoising of noisy curves and a Monte Carlo simulation harness.
"""

from .basis import BasisSystem, RoughnessOperator, d2, harmonic, make_bspline_basis, make_fourier_basis
from .design import Dataset, FunctionalSample, QuadratureRule, Subject, Visit, build_design
from .em import EmConfig, FitResult, Lambdas, VarianceComponents, make_penalties, run_em
from .fpca import fit_fpca, reconstruct
from .inference import beta_band, gamma_surface, intercept_ci
from .selection import gcv_search
from .sim import Scenario, run_study

__version__ = "0.1.0"

__all__ = [
    "BasisSystem", "RoughnessOperator", "d2", "harmonic", "make_bspline_basis", "make_fourier_basis",
    "Dataset", "FunctionalSample", "QuadratureRule", "Subject", "Visit", "build_design",
    "EmConfig", "FitResult", "Lambdas", "VarianceComponents", "make_penalties", "run_em",
    "fit_fpca", "reconstruct", "beta_band", "gamma_surface", "intercept_ci", "gcv_search",
    "Scenario", "run_study", "__version__",
]
