"""One-step debiasing, plug-in standard errors and normal confidence intervals."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import Dataset, standard_normal_quantile
from .group_lasso import FirstStageFit
from .precision import PrecisionEstimate


class DecompositionError(AssertionError):
    """The remainder identity failed: an implementation bug, never a data issue."""


@dataclass(frozen=True)
class InferenceResult:
    beta_tilde: np.ndarray
    omega_hat: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    alpha: float
    sigma0_hat: float

    def covers(self, beta) -> np.ndarray:
        beta = np.asarray(beta)
        return (self.ci_lower <= beta) & (beta <= self.ci_upper)

    @property
    def lengths(self) -> np.ndarray:
        return self.ci_upper - self.ci_lower


def _theta(precision) -> np.ndarray:
    return precision.theta_rows if isinstance(precision, PrecisionEstimate) else np.asarray(precision)


def _x_hat(first_stage) -> np.ndarray:
    return first_stage.x_hat if isinstance(first_stage, FirstStageFit) else np.asarray(first_stage)


def debias(beta_hat, precision, first_stage, dataset: Dataset) -> np.ndarray:
    """beta_hat + Omega_hat X_hat^T (y - x beta_hat) / n, residual on the observed x."""
    beta_hat = np.asarray(beta_hat, dtype=float)
    omega = _theta(precision)
    x_hat = _x_hat(first_stage)
    n, p = dataset.x.shape
    if beta_hat.shape != (p,) or omega.shape != (p, p) or x_hat.shape != (n, p):
        raise ValueError("dimension mismatch between estimate, precision and fitted treatments")
    resid = dataset.y - dataset.x @ beta_hat
    return beta_hat + omega @ (x_hat.T @ resid) / n


def omega_hat(precision, first_stage, sigma0_hat: float, sigma_hat_f=None) -> np.ndarray:
    """sigma0_hat * sqrt(theta_l^T S theta_l) per row, S = X_hat^T X_hat / n.

    Negative quadratic forms (rounding) are clamped at zero with a warning.
    """
    theta = _theta(precision)
    if sigma_hat_f is None:
        if isinstance(precision, PrecisionEstimate):
            sigma_hat_f = precision.sigma_hat_f
        else:
            x_hat = _x_hat(first_stage)
            sigma_hat_f = x_hat.T @ x_hat / x_hat.shape[0]
    quad = np.einsum("ij,jk,ik->i", theta, sigma_hat_f, theta)
    if np.any(quad < 0):
        warnings.warn(
            f"clamped {int((quad < 0).sum())} negative variance quadratic form(s) to zero",
            RuntimeWarning,
            stacklevel=2,
        )
        quad = np.maximum(quad, 0.0)
    return sigma0_hat * np.sqrt(quad)


def confidence_intervals(beta_tilde, omega, n: int, alpha: float = 0.05,
                         sigma0_hat: float = float("nan")) -> InferenceResult:
    beta_tilde = np.asarray(beta_tilde, dtype=float)
    omega = np.asarray(omega, dtype=float)
    half = standard_normal_quantile(alpha) * omega / np.sqrt(n)
    return InferenceResult(
        beta_tilde=beta_tilde,
        omega_hat=omega,
        ci_lower=beta_tilde - half,
        ci_upper=beta_tilde + half,
        alpha=float(alpha),
        sigma0_hat=float(sigma0_hat),
    )


@dataclass(frozen=True)
class Decomposition:
    leading: np.ndarray
    remainders: tuple
    lhs: np.ndarray

    @property
    def sup_norms(self) -> np.ndarray:
        return np.array([np.abs(r).max() for r in self.remainders])

    @property
    def identity_error(self) -> float:
        return float(np.abs(self.lhs - self.leading - sum(self.remainders)).max())


def decomposition_check(beta_hat, beta_tilde, precision, first_stage, dataset: Dataset,
                        true_beta, true_eta, true_d, true_omega, atol: float = 1e-8,
                        return_terms: bool = False):
    """Split sqrt(n)(beta_tilde - beta) into its leading term and four remainders.

    Returns the sup-norms of the four remainders and raises
    :class:`DecompositionError` when the terms fail to add up within ``atol``.
    """
    theta = _theta(precision)
    x_hat = _x_hat(first_stage)
    x = dataset.x
    n, p = x.shape
    rn = np.sqrt(n)
    beta = np.asarray(true_beta, dtype=float)
    eta = np.asarray(true_eta, dtype=float)
    D = np.asarray(true_d, dtype=float)
    Om = np.asarray(true_omega, dtype=float)
    sigma_f = x_hat.T @ x_hat / n
    diff = beta - beta_hat

    leading = Om @ (D.T @ eta) / rn
    r1 = (theta - Om) @ (D.T @ eta) / rn
    r2 = theta @ ((x_hat - D).T @ eta) / rn
    r3 = theta @ (x_hat.T @ ((x - x_hat) @ diff)) / rn
    r4 = rn * ((theta @ sigma_f - np.eye(p)) @ diff)
    lhs = rn * (np.asarray(beta_tilde) - beta)
    dec = Decomposition(leading, (r1, r2, r3, r4), lhs)
    if dec.identity_error > atol:
        raise DecompositionError(f"remainder identity off by {dec.identity_error:.3e}")
    return dec if return_terms else dec.sup_norms
