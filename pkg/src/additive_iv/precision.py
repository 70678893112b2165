"""Row-wise constrained L1 precision estimation (CLIME-type) via dense simplex.

For each row ell the linear program

    min ||theta||_1   s.t.   ||S theta - e_ell||_inf <= upsilon

is written in standard form with theta = theta_plus - theta_minus and solved
by a two-phase tableau simplex using Bland's rule, so pivoting is fully
deterministic and cannot cycle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .group_lasso import FirstStageFit

OPTIMAL, INFEASIBLE, UNBOUNDED, ITERATION_LIMIT = 0, 1, 2, 3
_PIVOT_EPS = 1e-11


class SimplexFailure(RuntimeError):
    """The simplex hit its pivot cap; distinct from a proven infeasibility."""


class NoFeasibleUpsilon(RuntimeError):
    pass


@dataclass(frozen=True)
class PrecisionEstimate:
    theta_rows: np.ndarray
    upsilon: float
    sigma_hat_f: np.ndarray
    feasibility_flags: np.ndarray

    @property
    def all_feasible(self) -> bool:
        return bool(np.all(self.feasibility_flags))


def sample_sigma_f(first_stage: FirstStageFit | np.ndarray) -> np.ndarray:
    """X-hat^T X-hat / n, symmetrized."""
    x_hat = first_stage.x_hat if isinstance(first_stage, FirstStageFit) else np.asarray(first_stage)
    n = x_hat.shape[0]
    a = x_hat.T @ x_hat / n
    return (a + a.T) / 2.0


@numba.njit(cache=True)
def _pivot(T, r, col):
    M1, N1 = T.shape
    pv = T[r, col]
    for j in range(N1):
        T[r, j] /= pv
    for i in range(M1):
        if i == r:
            continue
        f = T[i, col]
        if f != 0.0:
            for j in range(N1):
                T[i, j] -= f * T[r, j]
            T[i, col] = 0.0
    T[r, col] = 1.0


@numba.njit(cache=True)
def _bland(T, basis, n_allowed, max_pivots):
    """Minimize the objective in the last tableau row; columns >= n_allowed never enter."""
    M = T.shape[0] - 1
    N = T.shape[1] - 1
    pivots = 0
    while True:
        col = -1
        for j in range(n_allowed):
            if T[M, j] < -_PIVOT_EPS:
                col = j
                break
        if col < 0:
            return OPTIMAL, pivots
        if pivots >= max_pivots:
            return ITERATION_LIMIT, pivots
        r = -1
        best = np.inf
        for i in range(M):
            a = T[i, col]
            if a > _PIVOT_EPS:
                ratio = T[i, N] / a
                if ratio < best - 1e-14 or (abs(ratio - best) <= 1e-14 and basis[i] < basis[r]):
                    best = ratio
                    r = i
        if r < 0:
            return UNBOUNDED, pivots
        _pivot(T, r, col)
        basis[r] = col
        pivots += 1


@numba.njit(cache=True)
def _simplex(c, A, b, max_pivots, phase1_only):
    """min c^T w  s.t.  A w <= b, w >= 0.  Returns (status, basis, pivots)."""
    M, n = A.shape
    n_art = 0
    for i in range(M):
        if b[i] < 0.0:
            n_art += 1
    N = n + M + n_art
    T = np.zeros((M + 1, N + 1))
    basis = np.empty(M, dtype=np.int64)
    a_col = n + M
    for i in range(M):
        sgn = 1.0 if b[i] >= 0.0 else -1.0
        for j in range(n):
            T[i, j] = sgn * A[i, j]
        T[i, n + i] = sgn
        T[i, N] = sgn * b[i]
        if sgn > 0:
            basis[i] = n + i
        else:
            T[i, a_col] = 1.0
            basis[i] = a_col
            a_col += 1
    pivots = 0
    if n_art > 0:
        # phase one: minimize the sum of artificials, priced out of the basis rows
        for i in range(M):
            if basis[i] >= n + M:
                for j in range(N + 1):
                    T[M, j] -= T[i, j]
        for k in range(n + M, N):
            T[M, k] = 0.0
        status, pv = _bland(T, basis, n + M, max_pivots)
        pivots += pv
        if status == ITERATION_LIMIT:
            return status, basis, pivots
        if -T[M, N] > 1e-9 * max(1.0, np.abs(b).max()):
            return INFEASIBLE, basis, pivots
        # drive zero-level artificials out of the basis
        for i in range(M):
            if basis[i] >= n + M:
                for j in range(n + M):
                    if abs(T[i, j]) > 1e-9:
                        _pivot(T, i, j)
                        basis[i] = j
                        break
    if phase1_only:
        return OPTIMAL, basis, pivots
    for j in range(N + 1):
        T[M, j] = 0.0
    for j in range(n):
        T[M, j] = c[j]
    for i in range(M):
        cb = c[basis[i]] if basis[i] < n else 0.0
        if cb != 0.0:
            for j in range(N + 1):
                T[M, j] -= cb * T[i, j]
    status, pv = _bland(T, basis, n + M, max_pivots - pivots)
    pivots += pv
    return status, basis, pivots


def _row_problem(sigma: np.ndarray, ell: int, upsilon: float):
    p = sigma.shape[0]
    A = np.block([[sigma, -sigma], [-sigma, sigma]])
    e = np.zeros(p)
    e[ell] = 1.0
    b = np.concatenate([e + upsilon, upsilon - e])
    return np.ascontiguousarray(A), b


def _basic_solution(A, b, basis, n):
    """Recompute the basic solution from the original data for accuracy."""
    M = A.shape[0]
    aug = np.hstack([A, np.eye(M)])
    cols = [k for k in basis if k < n + M]
    rows = np.arange(M)
    w = np.zeros(n + M)
    if len(cols) == M:
        try:
            w[basis] = np.linalg.solve(aug[:, basis], b)
        except np.linalg.LinAlgError:
            return None
    else:
        sol, *_ = np.linalg.lstsq(aug[rows][:, cols], b, rcond=None)
        w[cols] = sol
    return np.maximum(w[:n], 0.0)


def solve_clime_row(sigma, ell: int, upsilon: float, max_pivots: int | None = None,
                    phase1_only: bool = False) -> tuple[np.ndarray, bool]:
    """Minimum-L1 row ``theta`` with ||sigma theta - e_ell||_inf <= upsilon.

    Returns ``(theta, feasible)``; an infeasible program gives the zero vector
    and ``False``. Raises :class:`SimplexFailure` if the pivot cap is hit.
    """
    if upsilon <= 0:
        raise ValueError("upsilon must be positive")
    sigma = np.asarray(sigma, dtype=float)
    p = sigma.shape[0]
    scale = float(np.abs(sigma).max())
    if scale == 0.0:
        feasible = upsilon >= 1.0
        return np.zeros(p), feasible
    # the program is exactly covariant: solve(c S, u) = solve(S, u) / c
    S = sigma / scale
    A, b = _row_problem(S, ell, upsilon)
    n = 2 * p
    if max_pivots is None:
        max_pivots = 50 * (A.shape[0] + A.shape[1]) + 1000
    status, basis, _ = _simplex(np.ones(n), A, b, max_pivots, phase1_only)
    if status == ITERATION_LIMIT:
        raise SimplexFailure(f"pivot cap {max_pivots} reached on row {ell}")
    if status == INFEASIBLE:
        return np.zeros(p), False
    if phase1_only:
        return np.zeros(p), True
    w = _basic_solution(A, b, basis, n)
    if w is None:
        raise SimplexFailure(f"singular final basis on row {ell}")
    theta = (w[:p] - w[p:]) / scale
    return theta, True


def estimate_precision(sigma, upsilon: float) -> PrecisionEstimate:
    sigma = np.asarray(sigma, dtype=float)
    p = sigma.shape[0]
    rows = np.zeros((p, p))
    flags = np.zeros(p, dtype=bool)
    for ell in range(p):
        rows[ell], flags[ell] = solve_clime_row(sigma, ell, upsilon)
    return PrecisionEstimate(rows, float(upsilon), sigma, flags)


def default_upsilon_grid(size: int = 20) -> np.ndarray:
    return np.geomspace(0.01, 1.0, size)


def _all_rows_feasible(sigma, upsilon) -> bool:
    for ell in range(sigma.shape[0]):
        _, ok = solve_clime_row(sigma, ell, upsilon, phase1_only=True)
        if not ok:
            return False
    return True


def select_upsilon(sigma, grid=None) -> float:
    """Smallest grid tolerance for which every row's program is feasible.

    Feasibility is monotone in the tolerance, so the grid is bisected.
    """
    sigma = np.asarray(sigma, dtype=float)
    grid = default_upsilon_grid() if grid is None else np.asarray(grid, dtype=float)
    if np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be positive and strictly ascending")
    lo, hi = 0, len(grid) - 1
    if not _all_rows_feasible(sigma, grid[hi]):
        raise NoFeasibleUpsilon(
            f"no feasible tolerance up to {grid[hi]:.4g}; extend the grid upward"
        )
    while lo < hi:
        mid = (lo + hi) // 2
        if _all_rows_feasible(sigma, grid[mid]):
            hi = mid
        else:
            lo = mid + 1
    return float(grid[lo])


def constraint_violation(sigma, theta_rows) -> float:
    """||S Omega^T - I||_inf with rows of Omega stacked in ``theta_rows``."""
    p = sigma.shape[0]
    return float(np.abs(theta_rows @ sigma - np.eye(p)).max())
