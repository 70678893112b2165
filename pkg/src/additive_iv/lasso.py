"""Second-stage lasso by cyclic coordinate descent."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .core import Dataset, FitDiagnostics
from .group_lasso import FirstStageFit

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 50_000


@dataclass
class SecondStageFit:
    beta_hat: np.ndarray
    mu: float
    active_set: list
    sigma0_hat: float
    diagnostics: FitDiagnostics


def lambda_max_lasso(design: np.ndarray, target: np.ndarray) -> float:
    n = design.shape[0]
    if design.shape[1] == 0:
        return 0.0
    return float(np.abs(design.T @ target).max() / n)


@numba.njit(cache=True)
def _lasso_kkt(c, gb, beta, mu, diag):
    kkt = 0.0
    for k in range(beta.shape[0]):
        g = c[k] - gb[k]
        if beta[k] > 0.0:
            v = abs(g - mu)
        elif beta[k] < 0.0:
            v = abs(g + mu)
        else:
            if diag[k] <= 0.0:
                continue
            v = abs(g) - mu
            if v < 0.0:
                v = 0.0
        if v > kkt:
            kkt = v
    return kkt


@numba.njit(cache=True)
def _cd(G, c, yy, mu, beta, tol, max_iter, trace):
    p = G.shape[0]
    diag = np.empty(p)
    for k in range(p):
        diag[k] = G[k, k]
    gb = G @ beta
    kkt = _lasso_kkt(c, gb, beta, mu, diag)
    it = 0
    if trace.shape[0] > 0:
        trace[0] = 0.5 * yy - c @ beta + 0.5 * beta @ gb + mu * np.abs(beta).sum()
    while kkt > tol and it < max_iter:
        it += 1
        for k in range(p):
            d = diag[k]
            if d <= 0.0:
                continue
            z = c[k] - gb[k] + d * beta[k]
            if z > mu:
                nb = (z - mu) / d
            elif z < -mu:
                nb = (z + mu) / d
            else:
                nb = 0.0
            delta = nb - beta[k]
            if delta != 0.0:
                beta[k] = nb
                for i in range(p):
                    gb[i] += G[i, k] * delta
        gb = G @ beta
        kkt = _lasso_kkt(c, gb, beta, mu, diag)
        if trace.shape[0] > it:
            trace[it] = 0.5 * yy - c @ beta + 0.5 * beta @ gb + mu * np.abs(beta).sum()
    obj = 0.5 * yy - c @ beta + 0.5 * beta @ gb + mu * np.abs(beta).sum()
    return it, kkt, obj


def solve_lasso_gram(G, c, yy, mu, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                     beta0=None, trace=None) -> tuple[np.ndarray, FitDiagnostics]:
    """Lasso from Gram quantities G = X^T X / n, c = X^T y / n, yy = y^T y / n."""
    beta = np.zeros(c.shape[0]) if beta0 is None else np.array(beta0, dtype=float)
    it, kkt, obj = _cd(
        np.ascontiguousarray(G, dtype=float), np.ascontiguousarray(c, dtype=float), float(yy),
        float(mu), beta, float(tol), int(max_iter), np.zeros(0) if trace is None else trace,
    )
    return beta, FitDiagnostics(it, obj, kkt, kkt <= tol)


def solve_lasso(design, target, mu: float, tol: float = DEFAULT_TOL,
                max_iter: int = DEFAULT_MAX_ITER, beta0=None, trace=None):
    """Minimize (1/2n)||target - design beta||^2 + mu ||beta||_1."""
    if mu < 0:
        raise ValueError("mu must be non-negative")
    design = np.asarray(design, dtype=float)
    target = np.asarray(target, dtype=float)
    n = design.shape[0]
    G = design.T @ design / n
    c = design.T @ target / n
    return solve_lasso_gram(G, c, target @ target / n, mu, tol, max_iter, beta0, trace)


def lasso_objective(design, target, beta, mu) -> float:
    n = design.shape[0]
    r = target - design @ beta
    return float(r @ r / (2 * n) + mu * np.abs(beta).sum())


def lasso_kkt_residual(design, target, beta, mu) -> float:
    n = design.shape[0]
    g = design.T @ (target - design @ beta) / n
    zero_col = (design ** 2).sum(axis=0) == 0
    v = np.where(beta > 0, np.abs(g - mu), np.where(beta < 0, np.abs(g + mu),
                                                     np.maximum(np.abs(g) - mu, 0.0)))
    v[zero_col & (beta == 0)] = 0.0
    return float(v.max()) if v.size else 0.0


def lasso_path(G, c, yy, mus, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """Warm-started solutions along a decreasing penalty sequence.

    Returns a (len(mus), p) coefficient array and the per-point diagnostics.
    """
    betas = np.zeros((len(mus), c.shape[0]))
    diags = []
    beta = np.zeros(c.shape[0])
    for i, mu in enumerate(mus):
        beta, diag = solve_lasso_gram(G, c, yy, mu, tol, max_iter, beta0=beta)
        betas[i] = beta
        diags.append(diag)
    return betas, diags


def fit_second_stage(first_stage: FirstStageFit, dataset: Dataset, mu: float,
                     tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> SecondStageFit:
    """Lasso of y on the fitted treatments; residual scale uses the observed x."""
    beta, diag = solve_lasso(first_stage.x_hat, dataset.y, mu, tol, max_iter)
    return second_stage_from_beta(beta, mu, dataset, diag)


def second_stage_from_beta(beta, mu, dataset: Dataset, diag: FitDiagnostics) -> SecondStageFit:
    resid = dataset.y - dataset.x @ beta
    sigma0 = float(np.linalg.norm(resid) / np.sqrt(dataset.n))
    return SecondStageFit(
        beta_hat=beta,
        mu=float(mu),
        active_set=[int(k) for k in np.flatnonzero(beta)],
        sigma0_hat=sigma0,
        diagnostics=diag,
    )
