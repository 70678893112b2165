"""Data-generating processes, baselines and the Monte-Carlo experiment runner."""

from __future__ import annotations

import enum
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .core import Dataset, SeededRng, load_dataset
from .lasso import solve_lasso_gram
from .pipeline import fit_additive_iv, infer_additive_iv
from .tuning import TuningConfig, bic_score, cv_lasso

log = logging.getLogger(__name__)

# floor for |z| inside log(z^2) in the hard design
LOG_FLOOR = 1e-8
MIN_EIGENVALUE = 1e-6


class DesignKind(str, enum.Enum):
    LINEAR = "linear"
    NONLINEAR = "nonlinear"
    NONLINEAR_HARD = "nonlinear-hard"


class Method(str, enum.Enum):
    ADDITIVE_IV = "additive-iv"
    TWO_SLS_LASSO = "2sls-l"
    PLS = "pls"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DgpConfig:
    n: int = 300
    p: int = 100
    q: int = 100
    r: int = 5
    s: int = 5
    design_kind: DesignKind = DesignKind.NONLINEAR
    z_corr_base: float = 0.2
    noise_corr_base: float = 0.2
    endogeneity_value: float = 0.3
    n_extra_endog: int = 5
    seed: int = 0
    # nonlinear designs: draw each treatment's five instruments at random
    # (True) or use instruments 1..5 for every treatment (False)
    random_nonlinear_support: bool = True

    def __post_init__(self):
        object.__setattr__(self, "design_kind", DesignKind(self.design_kind))
        if min(self.n, self.p, self.q) < 1 or self.n < 2:
            raise ConfigError("n, p and q must be positive (n >= 2)")
        if not 0 <= self.r <= self.q:
            raise ConfigError(f"r={self.r} must lie in [0, q={self.q}]")
        if not 0 <= self.s <= self.p:
            raise ConfigError(f"s={self.s} must lie in [0, p={self.p}]")
        for name in ("z_corr_base", "noise_corr_base"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {v}")
        if self.design_kind is not DesignKind.LINEAR and (self.q < 5 or self.r != 5):
            raise ConfigError("nonlinear designs use five instruments per treatment, need r = 5 <= q")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["design_kind"] = self.design_kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DgpConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown DGP field(s): {sorted(extra)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class SimulatedData:
    dataset: Dataset
    x_raw: np.ndarray
    y_raw: np.ndarray
    true_beta: np.ndarray
    true_gamma: np.ndarray  # q x p for the linear design, 5 x p otherwise
    true_d: np.ndarray
    true_eta: np.ndarray
    true_eps: np.ndarray
    true_support_first: list
    true_support_second: np.ndarray
    noise_cov: np.ndarray
    spd_shrink_factor: float = 1.0


def ar1_covariance(dim: int, base: float) -> np.ndarray:
    if not 0.0 <= base < 1.0:
        raise ValueError("base must lie in [0, 1)")
    idx = np.arange(dim)
    return base ** np.abs(idx[:, None] - idx[None, :]).astype(float)


def build_noise_covariance(p: int, config: DgpConfig, rng: SeededRng):
    """Joint covariance of (eta, eps_1..eps_p) with endogeneity in the first row.

    Returns ``(sigma, shrink)`` where ``shrink`` is the factor applied to the
    first row/column to restore positive definiteness (1.0 when untouched).
    """
    if p < 5 + config.n_extra_endog:
        raise ConfigError(f"p={p} too small for 5 + {config.n_extra_endog} endogenous entries")
    sigma = np.zeros((p + 1, p + 1))
    sigma[0, 0] = 1.0
    sigma[1:, 1:] = ar1_covariance(p, config.noise_corr_base)
    cols = list(range(1, 6))
    if config.n_extra_endog:
        extra = rng.choice(np.arange(6, p + 1), size=config.n_extra_endog, replace=False)
        cols += sorted(int(c) for c in extra)
    sigma[0, cols] = config.endogeneity_value
    sigma[cols, 0] = config.endogeneity_value

    def min_eig(f):
        s = sigma.copy()
        s[0, 1:] *= f
        s[1:, 0] *= f
        return np.linalg.eigvalsh(s)[0]

    shrink = 1.0
    if min_eig(1.0) < MIN_EIGENVALUE:
        lo, hi = 0.0, 1.0
        for _ in range(60):
            mid = (lo + hi) / 2
            if min_eig(mid) >= MIN_EIGENVALUE:
                lo = mid
            else:
                hi = mid
        shrink = lo
        log.warning("noise covariance not SPD; shrank endogeneity row by %.6f", shrink)
        sigma[0, 1:] *= shrink
        sigma[1:, 0] *= shrink
    return sigma, shrink


def _uniform_coefficients(rng: SeededRng, size):
    return rng.uniform(0.75, 1.0, size=size)


def _sample_beta(p: int, s: int, rng: SeededRng) -> np.ndarray:
    beta = np.zeros(p)
    support = np.sort(rng.choice(p, size=s, replace=False))
    sign = np.where(rng.uniform(size=s) < 0.5, -1.0, 1.0)
    beta[support] = sign * rng.uniform(0.75, 1.0, size=s)
    return beta


def _floored(z):
    z = np.where(z == 0.0, LOG_FLOOR, z)
    return np.where(np.abs(z) < LOG_FLOOR, np.sign(z) * LOG_FLOOR, z)


def _component_functions(kind: DesignKind):
    if kind is DesignKind.NONLINEAR:
        return (
            lambda z: z ** 2,
            lambda z: z,
            lambda z: z ** 2,
            lambda z: np.sin(np.pi * z),
            lambda z: z ** 2,
        )
    if kind is DesignKind.NONLINEAR_HARD:
        return (
            lambda z: -8 * z ** 2,
            lambda z: np.sin(np.pi * z),
            lambda z: 2 * np.log(_floored(z) ** 2),
            lambda z: (10 * z) ** 3,
            lambda z: z ** 2,
        )
    raise ValueError(kind)


def treatment_means(z: np.ndarray, gamma: np.ndarray, support, kind: DesignKind) -> np.ndarray:
    """Noiseless treatment means F for the nonlinear designs.

    ``gamma`` is 5 x p; column ell applies the k-th component function to
    instrument ``support[ell][k]`` with weight ``gamma[k, ell]``.
    """
    funcs = _component_functions(kind)
    F = np.zeros((z.shape[0], gamma.shape[1]))
    for ell, cols in enumerate(support):
        for k, j in enumerate(cols):
            F[:, ell] += gamma[k, ell] * funcs[k](z[:, j])
    return F


def simulate(config: DgpConfig, replication: int = 0, n_override: int | None = None) -> SimulatedData:
    """Draw one dataset; depends only on (config.seed, replication)."""
    n = n_override or config.n
    p, q = config.p, config.q
    rng = SeededRng(config.seed, replication)
    z = rng.multivariate_normal(ar1_covariance(q, config.z_corr_base), n)
    sigma, shrink = build_noise_covariance(p, config, rng)
    noise = rng.multivariate_normal(sigma, n)
    eta, eps = noise[:, 0], noise[:, 1:]

    if config.design_kind is DesignKind.LINEAR:
        gamma = np.zeros((q, p))
        support = []
        for ell in range(p):
            rows = np.sort(rng.choice(q, size=config.r, replace=False))
            gamma[rows, ell] = _uniform_coefficients(rng, config.r)
            support.append([int(j) for j in rows])
        F = z @ gamma
    else:
        gamma = _uniform_coefficients(rng, (5, p))
        if config.random_nonlinear_support:
            support = [[int(j) for j in np.sort(rng.choice(q, size=5, replace=False))]
                       for _ in range(p)]
        else:
            support = [list(range(5)) for _ in range(p)]
        F = treatment_means(z, gamma, support, config.design_kind)

    beta = _sample_beta(p, config.s, rng)
    x = F + eps
    y = x @ beta + eta
    # store the noise as recomputed differences so the bookkeeping identities
    # x - F == eps and y - x beta == eta hold bit for bit
    eps = x - F
    eta = y - x @ beta
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ConfigError("simulated data contain non-finite values")
    return SimulatedData(
        dataset=load_dataset(y, x, z),
        x_raw=x,
        y_raw=y,
        true_beta=beta,
        true_gamma=gamma,
        true_d=F,
        true_eta=eta,
        true_eps=eps,
        true_support_first=support,
        true_support_second=np.flatnonzero(beta),
        noise_cov=sigma,
        spd_shrink_factor=shrink,
    )


def _as_dataset(data) -> Dataset:
    return data.dataset if isinstance(data, SimulatedData) else data


def baseline_pls(data, config: TuningConfig | None = None, rng: SeededRng | None = None) -> np.ndarray:
    """One-stage lasso of y on x, penalty chosen by K-fold CV."""
    ds = _as_dataset(data)
    config = config or TuningConfig()
    best, _, _, betas, _ = cv_lasso(ds.x, ds.y, config, rng or SeededRng(0))
    return betas[best]


def linear_first_stage(z: np.ndarray, x: np.ndarray, config: TuningConfig,
                       lam: float | None = None) -> np.ndarray:
    """Lasso of each treatment on the centered raw instruments.

    The penalty is picked by BIC (df = nonzero count) along a warm-started
    path unless ``lam`` fixes it. Returns the fitted treatments.
    """
    n = z.shape[0]
    zc = z - z.mean(axis=0)
    G = zc.T @ zc / n
    C = zc.T @ x / n
    coef = np.zeros((z.shape[1], x.shape[1]))
    for ell in range(x.shape[1]):
        xl = x[:, ell]
        yy = float(xl @ xl) / n
        top = float(np.abs(C[:, ell]).max())
        if lam is not None:
            mus = [lam]
        elif top == 0.0:
            continue
        else:
            mus = np.geomspace(top, config.lambda_path_ratio * top, config.lambda_path_size)
        best_score, best_beta = np.inf, np.zeros(z.shape[1])
        beta = np.zeros(z.shape[1])
        for mu in mus:
            beta, _ = solve_lasso_gram(G, C[:, ell], yy, mu, config.lasso_tol,
                                       config.lasso_max_iter, beta0=beta)
            df = int(np.count_nonzero(beta))
            r = xl - zc @ beta
            score = bic_score(n, float(r @ r), df)
            if score < best_score:
                best_score, best_beta = score, beta.copy()
            if df >= config.saturation * n:
                break
        coef[:, ell] = best_beta
    return zc @ coef


def baseline_2sls_lasso(data, config: TuningConfig | None = None, rng: SeededRng | None = None,
                        first_stage_lambda: float | None = None) -> np.ndarray:
    """Linear lasso first stage on raw instruments, CV lasso second stage."""
    ds = _as_dataset(data)
    config = config or TuningConfig()
    x_hat = linear_first_stage(ds.z, ds.x, config, first_stage_lambda)
    best, _, _, betas, _ = cv_lasso(x_hat, ds.y, config, rng or SeededRng(0))
    return betas[best]


@dataclass
class ReplicationRecord:
    config_index: int
    replication: int
    method: str
    l1_error: float = float("nan")
    coverage: float | None = None
    ci_length: float | None = None
    failed: bool = False
    error: str = ""


@dataclass
class ExperimentReport:
    method: str
    config: dict
    replications: int
    n_failed: int
    l1_error_mean: float
    l1_error_sd: float
    sd_defined: bool
    coverage_mean: float | None
    ci_length_mean: float | None
    wall_time: float = 0.0
    records: list = field(default_factory=list, repr=False)

    def to_dict(self, with_records: bool = False) -> dict:
        d = asdict(self)
        if not with_records:
            d.pop("records")
        return d

    def deterministic_dict(self) -> dict:
        d = self.to_dict(with_records=True)
        d.pop("wall_time")
        return d


def _method_rng(config: DgpConfig, replication: int, method: Method) -> SeededRng:
    return SeededRng(config.seed, replication).child(1 + list(Method).index(method))


def run_replication(config: DgpConfig, config_index: int, replication: int, methods,
                    tuning: TuningConfig, inference: bool, alpha: float):
    """Simulate once and run every method on the same draw."""
    with threadpool_limits(1):
        out = []
        start = time.perf_counter()
        data = simulate(config, replication)
        sim_time = time.perf_counter() - start
        for method in methods:
            method = Method(method)
            rec = ReplicationRecord(config_index, replication, method.value)
            t0 = time.perf_counter()
            try:
                rng = _method_rng(config, replication, method)
                if method is Method.ADDITIVE_IV:
                    fit = fit_additive_iv(data.dataset, tuning, rng)
                    beta = fit.beta_hat
                    if inference:
                        res = infer_additive_iv(fit, data.dataset, alpha).result
                        rec.coverage = float(res.covers(data.true_beta).mean())
                        rec.ci_length = float(res.lengths.mean())
                elif method is Method.TWO_SLS_LASSO:
                    beta = baseline_2sls_lasso(data, tuning, rng)
                else:
                    beta = baseline_pls(data, tuning, rng)
                rec.l1_error = float(np.abs(beta - data.true_beta).sum())
            except Exception as exc:  # recorded, counted and excluded downstream
                rec.failed = True
                rec.error = f"{type(exc).__name__}: {exc}"
                log.warning("replication %d of %s failed: %s", replication, method.value, rec.error)
            out.append((rec, time.perf_counter() - t0 + sim_time / len(methods)))
        return out


def _aggregate(method: str, config: DgpConfig, records, times) -> ExperimentReport:
    ok = [r for r in records if not r.failed]
    l1 = np.array([r.l1_error for r in ok])
    cov = [r.coverage for r in ok if r.coverage is not None]
    lens = [r.ci_length for r in ok if r.ci_length is not None]
    k = len(ok)
    return ExperimentReport(
        method=method,
        config=config.to_dict(),
        replications=len(records),
        n_failed=len(records) - k,
        l1_error_mean=float(l1.mean()) if k else float("nan"),
        l1_error_sd=float(l1.std(ddof=1)) if k > 1 else 0.0,
        sd_defined=k > 1,
        coverage_mean=float(np.mean(cov)) if cov else None,
        ci_length_mean=float(np.mean(lens)) if lens else None,
        wall_time=float(sum(times)),
        records=[asdict(r) for r in records],
    )


def run_experiment(configs, methods=tuple(Method), replications: int = 20, parallelism: int = 1,
                   tuning: TuningConfig | None = None, inference: bool = False,
                   alpha: float = 0.05) -> list[ExperimentReport]:
    """Seeded Monte-Carlo over every (config, method) pair.

    Replication ``k`` of a config uses the random stream ``(config.seed, k)``
    whatever the degree of parallelism, and results are aggregated in index
    order, so reports are reproducible bit for bit. Failed replications are
    counted in ``n_failed`` and excluded from the averages.
    """
    if replications < 1:
        raise ValueError("replications must be at least 1")
    configs = [configs] if isinstance(configs, DgpConfig) else list(configs)
    methods = [Method(m) for m in methods]
    tuning = tuning or TuningConfig()
    tasks = [(c, i, k) for i, c in enumerate(configs) for k in range(replications)]
    args = [(c, i, k, methods, tuning, inference, alpha) for c, i, k in tasks]
    if parallelism > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(_run_star, args))
    else:
        results = [_run_star(a) for a in args]

    reports = []
    for i, config in enumerate(configs):
        for method in methods:
            recs, times = [], []
            for (c, ci, k), res in zip(tasks, results):
                if ci != i:
                    continue
                for rec, t in res:
                    if rec.method == method.value:
                        recs.append(rec)
                        times.append(t)
            reports.append(_aggregate(method.value, config, recs, times))
    return reports


def _run_star(a):
    return run_replication(*a)


def with_n(config: DgpConfig, n: int) -> DgpConfig:
    return replace(config, n=n)
