"""Shared data model: datasets, seeded random streams and fit diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


@dataclass(frozen=True)
class Dataset:
    """Centered outcome and treatments plus raw-scale instruments.

    ``y`` and the columns of ``x`` have zero empirical mean; ``center_y`` and
    ``center_x`` hold the removed means. ``z`` is kept on its original scale.
    """

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    center_y: float
    center_x: np.ndarray

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def q(self) -> int:
        return self.z.shape[1]

    def subset(self, rows: np.ndarray) -> "Dataset":
        """Return the dataset restricted to ``rows``, re-centered."""
        rows = np.asarray(rows)
        return load_dataset(
            self.y[rows] + self.center_y, self.x[rows] + self.center_x, self.z[rows]
        )


@dataclass
class FitDiagnostics:
    iterations: int = 0
    final_objective: float = float("nan")
    kkt_residual: float = float("inf")
    converged: bool = False

    def to_dict(self) -> dict:
        return {
            "iterations": int(self.iterations),
            "final_objective": float(self.final_objective),
            "kkt_residual": float(self.kkt_residual),
            "converged": bool(self.converged),
        }


@dataclass
class SeededRng:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    Streams with different ``stream_id`` are statistically independent, and
    the draws of one stream do not depend on how many other streams were
    consumed before it. Backed by the counter-based Philox bit generator.
    """

    seed: int
    stream_id: int = 0
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.seed < 0 or self.stream_id < 0:
            raise ValueError("seed and stream_id must be non-negative")
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(int(self.stream_id),))
        self.generator = np.random.Generator(np.random.Philox(ss))

    def child(self, stream_id: int) -> "SeededRng":
        """Derive a stream for a sub-task; depends only on (seed, stream_id, child id)."""
        ss = np.random.SeedSequence(
            entropy=int(self.seed), spawn_key=(int(self.stream_id), int(stream_id))
        )
        rng = SeededRng.__new__(SeededRng)
        rng.seed = self.seed
        rng.stream_id = self.stream_id
        rng.generator = np.random.Generator(np.random.Philox(ss))
        return rng

    # thin pass-throughs used across the package
    def normal(self, *args, **kwargs):
        return self.generator.normal(*args, **kwargs)

    def uniform(self, *args, **kwargs):
        return self.generator.uniform(*args, **kwargs)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, *args, **kwargs):
        return self.generator.choice(*args, **kwargs)

    def multivariate_normal(self, cov: np.ndarray, size: int) -> np.ndarray:
        chol = np.linalg.cholesky(cov)
        return self.generator.standard_normal((size, cov.shape[0])) @ chol.T


def _check_finite(name: str, arr: np.ndarray) -> None:
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = np.argwhere(bad)[0]
        if arr.ndim == 1:
            raise DataError(f"non-finite entry in {name} at row {idx[0]}")
        raise DataError(f"non-finite entry in {name} at row {idx[0]}, column {idx[1]}")


def load_dataset(y_raw, x_raw, z_raw) -> Dataset:
    """Validate raw arrays and center ``y`` and the columns of ``x``.

    Parameters
    ----------
    y_raw : array-like, shape (n,)
    x_raw : array-like, shape (n, p)
    z_raw : array-like, shape (n, q)

    Raises
    ------
    DataError
        On dimension mismatch or any non-finite value.
    """
    y = np.asarray(y_raw, dtype=float)
    x = np.asarray(x_raw, dtype=float)
    z = np.asarray(z_raw, dtype=float)
    if y.ndim == 2 and y.shape[1] == 1:
        y = y[:, 0]
    if x.ndim == 1:
        x = x[:, None]
    if z.ndim == 1:
        z = z[:, None]
    if y.ndim != 1 or x.ndim != 2 or z.ndim != 2:
        raise DataError("y must be a vector, x and z matrices")
    n = y.shape[0]
    if x.shape[0] != n or z.shape[0] != n:
        raise DataError(
            f"row count mismatch: y has {n}, x has {x.shape[0]}, z has {z.shape[0]}"
        )
    if n < 2 or x.shape[1] < 1 or z.shape[1] < 1:
        raise DataError("need n >= 2, p >= 1 and q >= 1")
    _check_finite("y", y)
    _check_finite("x", x)
    _check_finite("z", z)

    center_y = float(y.mean())
    center_x = x.mean(axis=0)
    yc = y - center_y
    xc = x - center_x
    # second pass removes the rounding left by the first
    yc = yc - yc.mean()
    xc = xc - xc.mean(axis=0)
    for arr in (yc, xc, z, center_x):
        arr.setflags(write=False)
    return Dataset(y=yc, x=xc, z=z, center_y=center_y, center_x=center_x)


def normal_cdf(x):
    return ndtr(x)


def standard_normal_quantile(alpha: float) -> float:
    """Two-sided critical value ``Phi^{-1}(1 - alpha/2)``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    return float(ndtri(1.0 - alpha / 2.0))
