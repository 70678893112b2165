"""End-to-end two-stage estimation and debiased inference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dataset, SeededRng
from .inference import InferenceResult, confidence_intervals, debias, omega_hat
from .lasso import SecondStageFit
from .precision import PrecisionEstimate, estimate_precision, sample_sigma_f, select_upsilon
from .tuning import CVResult, FirstStageSelection, TuningConfig, select_first_stage, select_mu_cv


@dataclass
class AdditiveIVFit:
    first: FirstStageSelection
    cv: CVResult

    @property
    def second(self) -> SecondStageFit:
        return self.cv.fit

    @property
    def beta_hat(self) -> np.ndarray:
        return self.cv.fit.beta_hat


@dataclass
class AdditiveIVInference:
    fit: AdditiveIVFit
    precision: PrecisionEstimate
    result: InferenceResult


def fit_additive_iv(dataset: Dataset, config: TuningConfig | None = None,
                    rng: SeededRng | None = None) -> AdditiveIVFit:
    """BIC-tuned group lasso first stage, then CV-tuned lasso on X-hat."""
    config = config or TuningConfig()
    rng = rng or SeededRng(0)
    first = select_first_stage(dataset, config)
    cv = select_mu_cv(first.fit, dataset, config, rng)
    return AdditiveIVFit(first, cv)


def infer_additive_iv(fit: AdditiveIVFit, dataset: Dataset, alpha: float = 0.05,
                      upsilon_grid=None) -> AdditiveIVInference:
    """Precision rows, one-step update and per-coordinate normal intervals."""
    sigma = sample_sigma_f(fit.first.fit)
    upsilon = select_upsilon(sigma, upsilon_grid)
    precision = estimate_precision(sigma, upsilon)
    beta_tilde = debias(fit.beta_hat, precision, fit.first.fit, dataset)
    sigma0 = fit.second.sigma0_hat
    omega = omega_hat(precision, fit.first.fit, sigma0)
    result = confidence_intervals(beta_tilde, omega, dataset.n, alpha, sigma0)
    return AdditiveIVInference(fit, precision, result)
