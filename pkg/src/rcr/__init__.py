"""Robust Chauvenet rejection for samples and model fits."""

from .calibration import CorrectionTable, build_correction_table, load_table
from .fitting import EnsembleKind, FitError, FitResult, enumerate_solutions, functional_rcr
from .models import DataSet, ModelSpec, gaussian_prior, get_model, uniform_prior
from .rejection import (
    Contaminants,
    DistributionAssumption,
    RejectionError,
    RejectionResult,
    Symmetry,
    meets_criterion,
    rcr,
    select_plan,
    traditional_cr,
)
from .stats import CentralTendency, Sample, SigmaEstimate, Sidedness, Technique

__version__ = "0.1.0"

__all__ = [
    "CentralTendency",
    "Contaminants",
    "CorrectionTable",
    "DataSet",
    "DistributionAssumption",
    "EnsembleKind",
    "FitError",
    "FitResult",
    "ModelSpec",
    "RejectionError",
    "RejectionResult",
    "Sample",
    "SigmaEstimate",
    "Sidedness",
    "Symmetry",
    "Technique",
    "build_correction_table",
    "enumerate_solutions",
    "functional_rcr",
    "gaussian_prior",
    "get_model",
    "load_table",
    "meets_criterion",
    "rcr",
    "select_plan",
    "traditional_cr",
    "uniform_prior",
]
