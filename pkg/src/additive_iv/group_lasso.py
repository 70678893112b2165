"""First-stage group lasso: one problem per treatment, groups = instruments.

Each problem is

    min_gamma  (1/2n) ||x_l - U gamma||^2 + lam * sum_j ||gamma_j||_2

solved by cyclic block coordinate descent. A block update is a group
soft-threshold of a gradient step with step size 1/t_j, where t_j is the
largest eigenvalue of U_j^T U_j / n; the step is repeated on the same block
until it settles, which keeps every update closed-form and the objective
monotone. All work happens in Gram space (G = U^T U / n, c = U^T x / n) so an
inactive block costs O(m) per sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .core import Dataset, FitDiagnostics
from .splines import SplineDesign

DEFAULT_TOL = 1e-7
DEFAULT_MAX_ITER = 10_000


@dataclass
class GroupLassoProblem:
    u: np.ndarray
    target: np.ndarray
    lam: float
    group_offsets: np.ndarray
    group_size_m: int

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        n, P = self.u.shape
        if self.target.shape != (n,):
            raise ValueError("target length must match the rows of u")
        if P != len(self.group_offsets) * self.group_size_m:
            raise ValueError("u width must equal q * m")


@dataclass
class FirstStageFit:
    gamma_hat: np.ndarray  # (q*m, p)
    x_hat: np.ndarray  # (n, p)
    lambdas: np.ndarray
    active_groups: list
    diagnostics: list = field(default_factory=list)
    m: int = 0

    @property
    def converged(self) -> bool:
        return all(d.converged for d in self.diagnostics)


class GramCache:
    """Gram quantities of a design shared across treatments and penalties."""

    def __init__(self, u: np.ndarray, m: int):
        n, P = u.shape
        self.n = n
        self.m = m
        self.q = P // m
        self.gram = np.ascontiguousarray(u.T @ u / n)
        self.step = np.array(
            [_block_max_eig(self.gram[j * m:(j + 1) * m, j * m:(j + 1) * m]) for j in range(self.q)]
        )

    def correlations(self, target: np.ndarray, u: np.ndarray) -> np.ndarray:
        return u.T @ target / self.n


def _block_max_eig(block: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(block)[-1])


def lambda_max_group(u: np.ndarray, target: np.ndarray, group_size_m: int) -> float:
    """Smallest penalty whose solution is exactly zero: max_j ||U_j^T x||_2 / n."""
    n = u.shape[0]
    g = (u.T @ target / n).reshape(-1, group_size_m)
    return float(np.sqrt((g * g).sum(axis=1)).max())


@numba.njit(cache=True)
def _norm(v):
    s = 0.0
    for i in range(v.shape[0]):
        s += v[i] * v[i]
    return np.sqrt(s)


@numba.njit(cache=True)
def _recompute_gg(G, gamma, m, q, gg):
    P = G.shape[0]
    for i in range(P):
        gg[i] = 0.0
    for j in range(q):
        o = j * m
        nz = False
        for k in range(m):
            if gamma[o + k] != 0.0:
                nz = True
                break
        if not nz:
            continue
        for k in range(m):
            gk = gamma[o + k]
            if gk == 0.0:
                continue
            for i in range(P):
                gg[i] += G[i, o + k] * gk


@numba.njit(cache=True)
def _kkt_and_objective(G, c, yy, lam, m, q, gamma, gg):
    kkt = 0.0
    pen = 0.0
    quad = 0.0
    lin = 0.0
    g = np.empty(m)
    for j in range(q):
        o = j * m
        for k in range(m):
            g[k] = c[o + k] - gg[o + k]
        nrm = _norm(gamma[o:o + m])
        if nrm > 0.0:
            s = 0.0
            for k in range(m):
                d = g[k] - lam * gamma[o + k] / nrm
                s += d * d
            v = np.sqrt(s)
            pen += nrm
        else:
            v = _norm(g) - lam
            if v < 0.0:
                v = 0.0
        if v > kkt:
            kkt = v
        for k in range(m):
            quad += gamma[o + k] * gg[o + k]
            lin += gamma[o + k] * c[o + k]
    obj = 0.5 * yy - lin + 0.5 * quad + lam * pen
    return kkt, obj


@numba.njit(cache=True)
def _bcd(G, c, yy, lam, m, step, gamma, tol, max_iter, inner_max, trace):
    """Block coordinate descent; ``gamma`` is updated in place (warm start)."""
    P = G.shape[0]
    q = P // m
    gg = np.zeros(P)
    _recompute_gg(G, gamma, m, q, gg)
    g = np.empty(m)
    v = np.empty(m)
    old = np.empty(m)
    new = np.empty(m)
    delta = np.empty(m)
    kkt, obj = _kkt_and_objective(G, c, yy, lam, m, q, gamma, gg)
    it = 0
    if trace.shape[0] > 0:
        trace[0] = obj
    while kkt > tol and it < max_iter:
        it += 1
        for j in range(q):
            o = j * m
            t = step[j]
            for k in range(m):
                old[k] = gamma[o + k]
                new[k] = old[k]
                g[k] = c[o + k] - gg[o + k]
            if t <= 0.0:
                continue
            cur_zero = _norm(new) == 0.0
            if cur_zero and _norm(g) <= lam:
                continue
            # repeated majorized steps on this block; g tracks the local gradient
            for inner in range(inner_max):
                for k in range(m):
                    v[k] = new[k] + g[k] / t
                nv = _norm(v)
                if nv * t <= lam:
                    shrink = 0.0
                else:
                    shrink = 1.0 - lam / (t * nv)
                change = 0.0
                size = 0.0
                for k in range(m):
                    nk = shrink * v[k]
                    delta[k] = nk - new[k]
                    change += delta[k] * delta[k]
                    size += nk * nk
                    new[k] = nk
                if change == 0.0:
                    break
                for k in range(m):
                    s = 0.0
                    for kk in range(m):
                        s += G[o + k, o + kk] * delta[kk]
                    g[k] -= s
                if shrink == 0.0 or change <= 1e-26 * max(size, 1e-300):
                    break
            moved = False
            for k in range(m):
                delta[k] = new[k] - old[k]
                if delta[k] != 0.0:
                    moved = True
                gamma[o + k] = new[k]
            if moved:
                for k in range(m):
                    dk = delta[k]
                    if dk == 0.0:
                        continue
                    for i in range(P):
                        gg[i] += G[i, o + k] * dk
        _recompute_gg(G, gamma, m, q, gg)
        kkt, obj = _kkt_and_objective(G, c, yy, lam, m, q, gamma, gg)
        if trace.shape[0] > it:
            trace[it] = obj
    return it, kkt, obj


_EMPTY_TRACE = np.zeros(0)


def _solve_gram(
    cache: GramCache,
    c: np.ndarray,
    yy: float,
    lam: float,
    tol: float,
    max_iter: int,
    gamma0: np.ndarray | None = None,
    trace: np.ndarray | None = None,
) -> tuple[np.ndarray, FitDiagnostics]:
    gamma = np.zeros(c.shape[0]) if gamma0 is None else np.array(gamma0, dtype=float)
    it, kkt, obj = _bcd(
        cache.gram, np.ascontiguousarray(c), float(yy), float(lam), cache.m, cache.step,
        gamma, float(tol), int(max_iter), 200, _EMPTY_TRACE if trace is None else trace,
    )
    return gamma, FitDiagnostics(it, obj, kkt, kkt <= tol)


def solve_group_lasso(
    problem: GroupLassoProblem,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    gamma0: np.ndarray | None = None,
    cache: GramCache | None = None,
    trace: np.ndarray | None = None,
) -> tuple[np.ndarray, FitDiagnostics]:
    """Solve one group lasso problem.

    Returns the coefficient vector (length q*m) and diagnostics. When
    ``max_iter`` sweeps are exhausted the current iterate is returned with
    ``converged=False``. Pass ``trace`` (a float array) to record the
    objective after every sweep.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    m = problem.group_size_m
    if cache is None:
        cache = GramCache(problem.u, m)
    n = problem.u.shape[0]
    c = problem.u.T @ problem.target / n
    yy = float(problem.target @ problem.target) / n
    return _solve_gram(cache, c, yy, problem.lam, tol, max_iter, gamma0, trace)


def group_objective(u, target, gamma, lam, m) -> float:
    n = u.shape[0]
    r = target - u @ gamma
    return float(r @ r / (2 * n) + lam * np.sqrt((gamma.reshape(-1, m) ** 2).sum(axis=1)).sum())


def group_kkt_residual(u, target, gamma, lam, m) -> float:
    """Largest violation of the group lasso optimality conditions."""
    n = u.shape[0]
    g = (u.T @ (target - u @ gamma) / n).reshape(-1, m)
    gam = gamma.reshape(-1, m)
    norms = np.sqrt((gam ** 2).sum(axis=1))
    worst = 0.0
    for j in range(gam.shape[0]):
        if norms[j] > 0:
            v = np.linalg.norm(g[j] - lam * gam[j] / norms[j])
        else:
            v = max(0.0, np.linalg.norm(g[j]) - lam)
        worst = max(worst, v)
    return float(worst)


def active_groups_of(gamma: np.ndarray, m: int) -> list[int]:
    blocks = gamma.reshape(-1, m)
    return [int(j) for j in np.flatnonzero(np.any(blocks != 0.0, axis=1))]


def fit_first_stage(
    design: SplineDesign,
    dataset: Dataset,
    lambdas,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    cache: GramCache | None = None,
) -> FirstStageFit:
    """Solve the group lasso for every treatment column and assemble X-hat."""
    lambdas = np.asarray(lambdas, dtype=float)
    p = dataset.p
    if lambdas.shape != (p,):
        raise ValueError(f"need {p} penalties, got shape {lambdas.shape}")
    u = design.u
    m = design.m
    if cache is None:
        cache = GramCache(u, m)
    n = u.shape[0]
    C = u.T @ dataset.x / n
    yy = (dataset.x ** 2).sum(axis=0) / n
    gamma_hat = np.zeros((u.shape[1], p))
    diags = []
    for ell in range(p):
        gamma, diag = _solve_gram(cache, C[:, ell], yy[ell], lambdas[ell], tol, max_iter)
        gamma_hat[:, ell] = gamma
        diags.append(diag)
    return assemble_first_stage(u, gamma_hat, lambdas, diags, m)


def assemble_first_stage(u, gamma_hat, lambdas, diags, m) -> FirstStageFit:
    x_hat = u @ gamma_hat
    active = [active_groups_of(gamma_hat[:, ell], m) for ell in range(gamma_hat.shape[1])]
    return FirstStageFit(
        gamma_hat=gamma_hat,
        x_hat=x_hat,
        lambdas=np.asarray(lambdas, dtype=float),
        active_groups=active,
        diagnostics=list(diags),
        m=m,
    )


def lambda_path(lam_max: float, size: int = 50, ratio: float = 0.01) -> np.ndarray:
    """Decreasing log-spaced penalties from ``lam_max`` down to ``ratio * lam_max``."""
    if lam_max <= 0:
        return np.zeros(1)
    return np.geomspace(lam_max, ratio * lam_max, size)
