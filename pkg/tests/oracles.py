"""Independent reference solvers used only by the tests.

None of these share code with the package's solvers.
"""

import itertools
import warnings

import numpy as np


def de_boor_naive(knots, order, k, x):
    """Textbook recursive definition of the k-th B-spline of the given order.

    The right end of the last nonempty interval is closed so the clamped basis
    sums to one at b.
    """
    t = knots
    last = len(t) - 1

    def N(i, r):
        if r == 1:
            if t[i] <= x < t[i + 1]:
                return 1.0
            # close the final nondegenerate interval at the right endpoint
            if x == t[-1] and t[i] < t[i + 1] == t[-1]:
                return 1.0
            return 0.0
        out = 0.0
        d1 = t[i + r - 1] - t[i]
        d2 = t[i + r] - t[i + 1]
        if d1 > 0:
            out += (x - t[i]) / d1 * N(i, r - 1)
        if d2 > 0:
            out += (t[i + r] - x) / d2 * N(i + 1, r - 1)
        return out

    assert k + order <= last
    return N(k, order)


def lasso_sign_enumeration(X, y, mu):
    """Exact lasso minimum by enumerating every sign pattern (p <= 10)."""
    n, p = X.shape
    G = X.T @ X / n
    c = X.T @ y / n
    best_val = float(y @ y / (2 * n))
    best_beta = np.zeros(p)
    for pattern in itertools.product((-1, 0, 1), repeat=p):
        s = np.array(pattern, dtype=float)
        S = np.flatnonzero(s)
        if S.size == 0:
            continue
        try:
            b = np.linalg.solve(G[np.ix_(S, S)], c[S] - mu * s[S])
        except np.linalg.LinAlgError:
            continue
        if np.any(np.sign(b) != s[S]):
            continue
        beta = np.zeros(p)
        beta[S] = b
        r = y - X @ beta
        val = float(r @ r / (2 * n) + mu * np.abs(beta).sum())
        if val < best_val:
            best_val, best_beta = val, beta
    return best_val, best_beta


def clime_vertex_enumeration(S, ell, upsilon):
    """Minimum of ||theta||_1 s.t. ||S theta - e_ell||_inf <= upsilon by brute force.

    The objective is piecewise linear on the arrangement of the 3p hyperplanes
    theta_i = 0 and (S theta)_i = e_i +- upsilon, so the minimum sits at one of
    its vertices; every p-subset of hyperplanes is tried.
    """
    p = S.shape[0]
    e = np.zeros(p)
    e[ell] = 1.0
    rows = []
    rhs = []
    for i in range(p):
        unit = np.zeros(p)
        unit[i] = 1.0
        rows.append(unit)
        rhs.append(0.0)
        rows.append(S[i])
        rhs.append(e[i] + upsilon)
        rows.append(S[i])
        rhs.append(e[i] - upsilon)
    rows = np.array(rows)
    rhs = np.array(rhs)
    best = np.inf
    best_theta = None
    for combo in itertools.combinations(range(3 * p), p):
        A = rows[list(combo)]
        if abs(np.linalg.det(A)) < 1e-12:
            continue
        theta = np.linalg.solve(A, rhs[list(combo)])
        if np.abs(S @ theta - e).max() <= upsilon + 1e-10:
            val = np.abs(theta).sum()
            if val < best:
                best, best_theta = val, theta
    return best, best_theta


def group_lasso_conic(u, x, lam, m):
    """Group lasso objective minimum from an interior-point conic solver."""
    import cvxpy as cp

    n, P = u.shape
    v = cp.Variable(P)
    pen = sum(cp.norm(v[j * m:(j + 1) * m]) for j in range(P // m))
    prob = cp.Problem(cp.Minimize(cp.sum_squares(x - u @ v) / (2 * n) + lam * pen))
    with warnings.catch_warnings():
        # accuracy is checked by the caller against the objective tolerance
        warnings.simplefilter("ignore", UserWarning)
        prob.solve(solver="CLARABEL", tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10)
    return float(prob.value), np.asarray(v.value)


def accelerated_prox_group(u, x, lam, m, iters=20000):
    """FISTA on the same objective; a second, first-order reference."""
    n, P = u.shape
    L = np.linalg.eigvalsh(u.T @ u / n)[-1]
    w = np.zeros(P)
    z = w.copy()
    t = 1.0
    for _ in range(iters):
        g = u.T @ (u @ z - x) / n
        v = (z - g / L).reshape(-1, m)
        nrm = np.linalg.norm(v, axis=1, keepdims=True)
        scale = np.maximum(0.0, 1 - lam / (L * np.maximum(nrm, 1e-300)))
        w_new = (v * scale).ravel()
        t_new = (1 + np.sqrt(1 + 4 * t * t)) / 2
        z = w_new + (t - 1) / t_new * (w_new - w)
        w, t = w_new, t_new
    r = x - u @ w
    obj = r @ r / (2 * n) + lam * np.linalg.norm(w.reshape(-1, m), axis=1).sum()
    return float(obj), w
