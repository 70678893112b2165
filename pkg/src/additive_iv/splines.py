"""Clamped B-spline bases on equally spaced knots and the centered design U."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DataError, Dataset


class DegenerateInstrumentError(DataError):
    """An instrument column is constant, so no knot partition exists."""


@dataclass(frozen=True)
class SplineSpec:
    """Knot layout for one instrument.

    ``degree_L`` is the spline order: pieces are polynomials of degree
    ``degree_L - 1`` and there are ``basis_size_m = K + L`` basis functions.
    """

    degree_L: int
    interior_knots_K: int
    range_a: float
    range_b: float

    @property
    def basis_size_m(self) -> int:
        return self.interior_knots_K + self.degree_L

    @property
    def interior_knots(self) -> np.ndarray:
        K = self.interior_knots_K
        return np.linspace(self.range_a, self.range_b, K + 2)[1:-1]

    @property
    def knot_vector(self) -> np.ndarray:
        L = self.degree_L
        return np.concatenate(
            [np.full(L, self.range_a), self.interior_knots, np.full(L, self.range_b)]
        )


def make_knots(z_col, K: int, L: int) -> SplineSpec:
    z_col = np.asarray(z_col, dtype=float)
    if z_col.shape[0] < 2:
        raise DataError("need at least two observations to place knots")
    if K < 0 or L < 2:
        raise ValueError(f"need K >= 0 and L >= 2, got K={K}, L={L}")
    lo, hi = float(z_col.min()), float(z_col.max())
    if hi == lo:
        raise DegenerateInstrumentError(f"instrument is constant (value {lo})")
    delta = 1e-9 * (hi - lo + 1.0)
    return SplineSpec(degree_L=L, interior_knots_K=K, range_a=lo - delta, range_b=hi + delta)


def _basis_matrix(spec: SplineSpec, z) -> np.ndarray:
    """Evaluate all m basis functions at every point of ``z`` (Cox-de Boor).

    Returns an array of shape (len(z), m). Points are clamped into [a, b].
    """
    z = np.clip(np.atleast_1d(np.asarray(z, dtype=float)), spec.range_a, spec.range_b)
    t = spec.knot_vector
    L = spec.degree_L
    m = spec.basis_size_m
    n_int = spec.interior_knots_K + 1

    # span index s: t[L-1+s] <= z < t[L+s], last span closed on the right
    width = (spec.range_b - spec.range_a) / n_int
    span = np.floor((z - spec.range_a) / width).astype(np.int64)
    span = np.clip(span, 0, n_int - 1)
    # guard against rounding at the knots themselves
    left = t[L - 1 + span]
    span = np.where(z < left, span - 1, span)
    span = np.clip(span, 0, n_int - 1)
    right = t[L + span]
    span = np.where((z >= right) & (span < n_int - 1), span + 1, span)

    mu = span + L - 1  # index in t of the left knot of the span
    npts = z.shape[0]
    # N[:, r] holds the nonzero function with index mu - (order-1) + r
    N = np.zeros((npts, L))
    N[:, 0] = 1.0
    rows = np.arange(npts)
    for k in range(1, L):
        saved = np.zeros(npts)
        for r in range(k):
            tr = t[mu + r + 1]
            tl = t[mu + r + 1 - k]
            denom = tr - tl
            temp = N[:, r] / denom
            N[:, r] = saved + (tr - z) * temp
            saved = (z - tl) * temp
        N[:, k] = saved
    out = np.zeros((npts, m))
    first = mu - (L - 1)
    for r in range(L):
        out[rows, first + r] = N[:, r]
    return out


def eval_basis(spec: SplineSpec, z_point: float) -> np.ndarray:
    return _basis_matrix(spec, [z_point])[0]


@dataclass(frozen=True)
class SplineDesign:
    specs: tuple
    u: np.ndarray
    group_offsets: np.ndarray
    column_means: np.ndarray

    @property
    def m(self) -> int:
        return self.specs[0].basis_size_m

    @property
    def q(self) -> int:
        return len(self.specs)

    def block(self, j: int) -> slice:
        o = int(self.group_offsets[j])
        return slice(o, o + self.m)

    def centered_basis(self, j: int, z) -> np.ndarray:
        """psi_k(z) for instrument ``j`` at arbitrary points."""
        return _basis_matrix(self.specs[j], z) - self.column_means[j]

    def transform(self, z: np.ndarray) -> np.ndarray:
        """Build U for new instrument rows using the training knots and means."""
        z = np.asarray(z, dtype=float)
        return np.hstack([self.centered_basis(j, z[:, j]) for j in range(self.q)])


def build_design(dataset: Dataset | np.ndarray, K: int, L: int) -> SplineDesign:
    """Centered B-spline design for every instrument.

    Accepts a :class:`Dataset` or a bare instrument matrix.
    """
    z = dataset.z if isinstance(dataset, Dataset) else np.asarray(dataset, dtype=float)
    n, q = z.shape
    specs = []
    blocks = []
    means = []
    for j in range(q):
        try:
            spec = make_knots(z[:, j], K, L)
        except DegenerateInstrumentError as exc:
            raise DegenerateInstrumentError(f"instrument {j}: {exc}") from None
        phi = _basis_matrix(spec, z[:, j])
        mean = phi.mean(axis=0)
        specs.append(spec)
        blocks.append(phi - mean)
        means.append(mean)
    m = K + L
    u = np.hstack(blocks)
    column_means = np.vstack(means)
    offsets = np.arange(q) * m
    u.setflags(write=False)
    return SplineDesign(tuple(specs), u, offsets, column_means)


def eval_fitted_function(design: SplineDesign, gamma_block, j: int, z_grid) -> np.ndarray:
    """Evaluate the additive component sum_k gamma_k psi_k(z) on ``z_grid``."""
    gamma_block = np.asarray(gamma_block, dtype=float)
    if gamma_block.shape != (design.m,):
        raise ValueError(f"gamma_block must have length {design.m}")
    return design.centered_basis(j, z_grid) @ gamma_block


def default_knots(n: int) -> int:
    """Interior knot count floor(n ** (1/5)), the sieve rate for smoothness 2."""
    return max(int(np.floor(n ** 0.2)), 0)
