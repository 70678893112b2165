"""Tuning: BIC for the first stage, K-fold CV for the second, stability selection."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .core import Dataset, FitDiagnostics, SeededRng
from .group_lasso import (
    DEFAULT_MAX_ITER as GL_MAX_ITER,
    DEFAULT_TOL as GL_TOL,
    FirstStageFit,
    GramCache,
    _solve_gram,
    active_groups_of,
    assemble_first_stage,
    lambda_path,
)
from .lasso import (
    DEFAULT_MAX_ITER as LASSO_MAX_ITER,
    DEFAULT_TOL as LASSO_TOL,
    SecondStageFit,
    lambda_max_lasso,
    lasso_path,
    second_stage_from_beta,
)
from .splines import SplineDesign, build_design, default_knots


@dataclass
class TuningConfig:
    k_grid: tuple | None = None  # None: floor(n^0.2) and its two neighbours
    degree_L: int = 4
    lambda_path_size: int = 50
    lambda_path_ratio: float = 0.01
    mu_path_size: int = 50
    mu_path_ratio: float = 0.01
    cv_folds: int = 5
    cv_rule: str = "min"  # "min" or "1se" (largest mu within one SE of the minimum)
    stability_subsamples: int = 100
    stability_threshold: float = 0.5
    shared_lambda: bool = False
    # a lambda path stops once m * (active groups) reaches this fraction of n
    saturation: float = 0.5
    gl_tol: float = GL_TOL
    gl_max_iter: int = GL_MAX_ITER
    lasso_tol: float = LASSO_TOL
    lasso_max_iter: int = LASSO_MAX_ITER

    def __post_init__(self):
        if self.cv_rule not in ("min", "1se"):
            raise ValueError("cv_rule must be 'min' or '1se'")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be at least 2")
        if not 0.0 < self.stability_threshold < 1.0:
            raise ValueError("stability_threshold must lie in (0, 1)")
        if self.degree_L < 2:
            raise ValueError("degree_L must be at least 2")
        if self.k_grid is not None:
            self.k_grid = tuple(int(k) for k in self.k_grid)
            if not self.k_grid or min(self.k_grid) < 0:
                raise ValueError("k_grid must hold non-negative integers")

    def resolved_k_grid(self, n: int) -> tuple:
        if self.k_grid is not None:
            return self.k_grid
        k0 = max(default_knots(n), 1)
        return tuple(sorted({max(k0 - 1, 0), k0, k0 + 1}))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["k_grid"] = list(self.k_grid) if self.k_grid is not None else None
        return d


def bic_score(n: int, rss: float, df: float) -> float:
    """n log(rss / n) + df log(n); a perfect fit scores -inf."""
    if rss < 0 or df < 0:
        raise ValueError("rss and df must be non-negative")
    if rss == 0:
        return -np.inf
    return float(n * np.log(rss / n) + df * np.log(n))


def _bic_path(cache: GramCache, u, x_col, lams, config: TuningConfig, keep_all=False):
    n, P = u.shape
    m = cache.m
    c = u.T @ x_col / n
    yy = float(x_col @ x_col) / n
    gamma = np.zeros(P)
    bic = np.full(len(lams), np.inf)
    best = (np.inf, -1, np.zeros(P), FitDiagnostics())
    gammas = [] if keep_all else None
    for i, lam in enumerate(lams):
        gamma, diag = _solve_gram(cache, c, yy, lam, config.gl_tol, config.gl_max_iter, gamma)
        r = x_col - u @ gamma
        k = len(active_groups_of(gamma, m))
        bic[i] = bic_score(n, float(r @ r), m * k)
        if keep_all:
            gammas.append(gamma.copy())
        if bic[i] < best[0]:
            best = (bic[i], i, gamma.copy(), diag)
        if m * k >= config.saturation * n:
            break
    return bic, best, gammas


@dataclass
class FirstStageSelection:
    k: int
    lambdas: np.ndarray
    fit: FirstStageFit
    design: SplineDesign
    bic_by_k: dict = field(default_factory=dict)


def _first_stage_at_k(dataset: Dataset, K: int, config: TuningConfig):
    design = build_design(dataset, K, config.degree_L)
    u = design.u
    cache = GramCache(u, design.m)
    n, p = dataset.n, dataset.p
    C = u.T @ dataset.x / n
    g = C.reshape(design.q, design.m, p)
    lam_max = np.sqrt((g ** 2).sum(axis=1)).max(axis=0)  # per treatment
    if config.shared_lambda:
        lams = lambda_path(float(lam_max.max()), config.lambda_path_size, config.lambda_path_ratio)
        table = np.zeros((p, len(lams)))
        paths = []
        for ell in range(p):
            bic, _, gammas = _bic_path(cache, u, dataset.x[:, ell], lams, config, keep_all=True)
            table[ell] = bic
            paths.append(gammas)
        total = table.sum(axis=0)
        i = int(np.argmin(total))
        gamma_hat = np.zeros((u.shape[1], p))
        diags = []
        for ell in range(p):
            start = paths[ell][min(i, len(paths[ell]) - 1)]
            xl = dataset.x[:, ell]
            gam, diag = _solve_gram(cache, C[:, ell], float(xl @ xl) / n, lams[i],
                                    config.gl_tol, config.gl_max_iter, start)
            gamma_hat[:, ell] = gam
            diags.append(diag)
        lambdas = np.full(p, lams[i])
        score = float(total[i])
    else:
        gamma_hat = np.zeros((u.shape[1], p))
        lambdas = np.zeros(p)
        diags = []
        score = 0.0
        for ell in range(p):
            lams = lambda_path(float(lam_max[ell]), config.lambda_path_size,
                               config.lambda_path_ratio)
            _, (b, i, gam, diag), _ = _bic_path(cache, u, dataset.x[:, ell], lams, config)
            gamma_hat[:, ell] = gam
            lambdas[ell] = lams[i]
            diags.append(diag)
            score += b
    fit = assemble_first_stage(u, gamma_hat, lambdas, diags, design.m)
    return score, fit, design


def select_first_stage(dataset: Dataset, config: TuningConfig | None = None) -> FirstStageSelection:
    """Pick K (hence m) and per-treatment penalties by BIC.

    For every K the warm-started penalty path of each treatment is scored with
    BIC using df = m * (active groups); the per-treatment minimizers are
    summed and the K with the smallest total wins.
    """
    config = config or TuningConfig()
    best = None
    scores = {}
    for K in config.resolved_k_grid(dataset.n):
        score, fit, design = _first_stage_at_k(dataset, K, config)
        scores[K] = score
        if best is None or score < best[0]:
            best = (score, K, fit, design)
    _, K, fit, design = best
    return FirstStageSelection(K, fit.lambdas, fit, design, scores)


def cv_folds(n: int, n_folds: int, rng: SeededRng) -> list[np.ndarray]:
    """Random partition of range(n) into folds whose sizes differ by at most one."""
    if n_folds > n:
        raise ValueError(f"{n_folds} folds requested for {n} rows")
    folds = np.array_split(rng.permutation(n), n_folds)
    if min(len(f) for f in folds) < 2:
        raise ValueError("every fold needs at least two rows")
    return [np.sort(f) for f in folds]


def mu_path(design: np.ndarray, target: np.ndarray, size: int = 50, ratio: float = 0.01):
    mmax = lambda_max_lasso(design, target)
    if mmax <= 0:
        return np.zeros(1)
    return np.geomspace(mmax, ratio * mmax, size)


@dataclass
class CVResult:
    mu: float
    fit: SecondStageFit
    mus: np.ndarray
    cv_error: np.ndarray
    betas: np.ndarray


def cv_lasso(design: np.ndarray, target: np.ndarray, config: TuningConfig, rng: SeededRng,
             mus: np.ndarray | None = None):
    """K-fold CV over a warm-started penalty path; returns (index, mus, errors, betas)."""
    n = design.shape[0]
    mus = mu_path(design, target, config.mu_path_size, config.mu_path_ratio) if mus is None else mus
    G_all = design.T @ design
    c_all = design.T @ target
    yy_all = float(target @ target)
    folds = cv_folds(n, config.cv_folds, rng)
    per_fold = np.zeros((len(folds), len(mus)))
    err = np.zeros(len(mus))
    for f, fold in enumerate(folds):
        Xf, yf = design[fold], target[fold]
        n_tr = n - len(fold)
        G = (G_all - Xf.T @ Xf) / n_tr
        c = (c_all - Xf.T @ yf) / n_tr
        yy = (yy_all - yf @ yf) / n_tr
        betas, _ = lasso_path(G, c, yy, mus, config.lasso_tol, config.lasso_max_iter)
        sq = (yf[:, None] - Xf @ betas.T) ** 2
        err += sq.sum(axis=0)
        per_fold[f] = sq.mean(axis=0)
    err /= n
    best = int(np.argmin(err))
    if config.cv_rule == "1se":
        se = per_fold[:, best].std(ddof=1) / np.sqrt(len(folds))
        best = int(np.flatnonzero(err <= err[best] + se)[0])
    betas, diags = lasso_path(G_all / n, c_all / n, yy_all / n, mus[:best + 1],
                              config.lasso_tol, config.lasso_max_iter)
    return best, mus, err, betas, diags


def select_mu_cv(first_stage: FirstStageFit, dataset: Dataset, config: TuningConfig,
                 rng: SeededRng) -> CVResult:
    """Choose the second-stage penalty by K-fold CV on (X-hat, y) and refit on all rows."""
    best, mus, err, betas, diags = cv_lasso(first_stage.x_hat, dataset.y, config, rng)
    beta = betas[best]
    fit = second_stage_from_beta(beta, mus[best], dataset, diags[best])
    return CVResult(float(mus[best]), fit, mus, err, betas)


def _subsample_first_stage(design: SplineDesign, dataset: Dataset, rows, lambdas, config):
    u = design.u[rows]
    u = u - u.mean(axis=0)
    x = dataset.x[rows]
    x = x - x.mean(axis=0)
    y = dataset.y[rows]
    y = y - y.mean()
    n = len(rows)
    cache = GramCache(u, design.m)
    C = u.T @ x / n
    gamma_hat = np.zeros((u.shape[1], x.shape[1]))
    for ell in range(x.shape[1]):
        gamma_hat[:, ell], _ = _solve_gram(cache, C[:, ell], float(x[:, ell] @ x[:, ell]) / n,
                                           lambdas[ell], config.gl_tol, config.gl_max_iter)
    return u @ gamma_hat, y


def stability_selection(dataset: Dataset, design: SplineDesign, lambdas, config: TuningConfig,
                        rng: SeededRng, mus=None) -> np.ndarray:
    """Selection frequency of each treatment over half-size subsamples.

    In each of ``config.stability_subsamples`` subsamples of size floor(n/2)
    the first stage is refit at ``lambdas`` and the second-stage lasso is run
    along ``mus``; a treatment counts as selected when it is nonzero anywhere
    on that path. ``mus`` defaults to the penalties between the full-data CV
    choice and the null threshold.
    """
    n = dataset.n
    if n < 4:
        raise ValueError("stability selection needs n >= 4")
    lambdas = np.asarray(lambdas, dtype=float)
    if mus is None:
        fs = assemble_first_stage(design.u, _full_gamma(design, dataset, lambdas, config),
                                  lambdas, [], design.m)
        cv = select_mu_cv(fs, dataset, config, rng.child(10**9))
        top = lambda_max_lasso(fs.x_hat, dataset.y)
        mus = np.geomspace(top, cv.mu, config.mu_path_size) if cv.mu > 0 else cv.mus
    mus = np.asarray(mus, dtype=float)
    counts = np.zeros(dataset.p)
    half = n // 2
    for b in range(config.stability_subsamples):
        rows = np.sort(rng.child(b).permutation(n)[:half])
        x_hat, y = _subsample_first_stage(design, dataset, rows, lambdas, config)
        G = x_hat.T @ x_hat / half
        c = x_hat.T @ y / half
        betas, _ = lasso_path(G, c, float(y @ y) / half, mus, config.lasso_tol,
                              config.lasso_max_iter)
        counts += np.any(betas != 0.0, axis=0)
    return counts / config.stability_subsamples


def _full_gamma(design, dataset, lambdas, config):
    cache = GramCache(design.u, design.m)
    n = dataset.n
    C = design.u.T @ dataset.x / n
    out = np.zeros((design.u.shape[1], dataset.p))
    for ell in range(dataset.p):
        xl = dataset.x[:, ell]
        out[:, ell], _ = _solve_gram(cache, C[:, ell], float(xl @ xl) / n, lambdas[ell],
                                     config.gl_tol, config.gl_max_iter)
    return out


def stable_set(probabilities, threshold: float = 0.5) -> np.ndarray:
    """Indices whose selection probability strictly exceeds ``threshold``."""
    return np.flatnonzero(np.asarray(probabilities) > threshold)
