"""Sparse additive instrumental-variable regression.

A two-stage estimator for linear models with many endogenous treatments and
many instruments: each treatment is regressed on B-spline expansions of the
instruments by group lasso, the outcome is regressed on the fitted treatments
by lasso, and a one-step correction built from a constrained L1 precision
estimate yields coordinatewise confidence intervals.
"""

from .core import DataError, Dataset, SeededRng, load_dataset
from .pipeline import AdditiveIVFit, AdditiveIVInference, fit_additive_iv, infer_additive_iv
from .tuning import TuningConfig

__version__ = "0.1.0"

__all__ = [
    "AdditiveIVFit",
    "AdditiveIVInference",
    "DataError",
    "Dataset",
    "SeededRng",
    "TuningConfig",
    "fit_additive_iv",
    "infer_additive_iv",
    "load_dataset",
]
