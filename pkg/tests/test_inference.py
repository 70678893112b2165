import numpy as np
import pytest

from additive_iv.core import load_dataset
from additive_iv.group_lasso import FirstStageFit
from additive_iv.inference import (
    DecompositionError,
    confidence_intervals,
    debias,
    decomposition_check,
    omega_hat,
)
from additive_iv.precision import PrecisionEstimate


def _fit(x_hat):
    p = x_hat.shape[1]
    return FirstStageFit(np.zeros((1, p)), x_hat, np.zeros(p), [[] for _ in range(p)])


def _setup(seed, n=60, p=3):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, p))
    x = d + 0.5 * rng.normal(size=(n, p))
    beta = rng.normal(size=p)
    ds = load_dataset(x @ beta + rng.normal(size=n), x, rng.normal(size=(n, 2)))
    x_hat = ds.x + 0.2 * rng.normal(size=(n, p))
    return rng, ds, beta, x_hat


def test_perfect_fit_gives_no_correction():
    rng, ds, beta, x_hat = _setup(0)
    ds0 = load_dataset(ds.x @ beta, ds.x, ds.z)
    out = debias(beta, rng.normal(size=(3, 3)), _fit(x_hat), ds0)
    assert np.abs(out - beta).max() < 1e-12


def test_zero_precision_gives_no_correction():
    rng, ds, beta, x_hat = _setup(1)
    b = rng.normal(size=3)
    np.testing.assert_array_equal(debias(b, np.zeros((3, 3)), _fit(x_hat), ds), b)


def test_debias_matches_hand_expansion():
    rng, ds, _, x_hat = _setup(2)
    b = rng.normal(size=3)
    om = rng.normal(size=(3, 3))
    n = ds.n
    want = np.empty(3)
    for k in range(3):
        acc = 0.0
        for j in range(3):
            s = 0.0
            for i in range(n):
                r = ds.y[i] - sum(ds.x[i, t] * b[t] for t in range(3))
                s += x_hat[i, j] * r
            acc += om[k, j] * s / n
        want[k] = b[k] + acc
    assert np.abs(debias(b, om, _fit(x_hat), ds) - want).max() < 1e-12


def test_debias_dimension_mismatch():
    _, ds, beta, x_hat = _setup(3)
    with pytest.raises(ValueError):
        debias(beta, np.eye(2), _fit(x_hat), ds)


def test_omega_zero_scale():
    _, _, _, x_hat = _setup(4)
    np.testing.assert_array_equal(omega_hat(np.eye(3), _fit(x_hat), 0.0), 0.0)


def test_omega_identity_quadratic_form():
    est = PrecisionEstimate(np.eye(3), 0.1, np.eye(3), np.ones(3, bool))
    np.testing.assert_allclose(omega_hat(est, None, 1.7), 1.7, rtol=1e-15)


def test_omega_factorized_form():
    rng, _, _, x_hat = _setup(5)
    theta = rng.normal(size=(3, 3))
    got = omega_hat(theta, _fit(x_hat), 0.8)
    want = 0.8 * np.linalg.norm(x_hat @ theta.T, axis=0) / np.sqrt(x_hat.shape[0])
    assert np.abs(got - want).max() < 1e-10


def test_negative_quadratic_form_clamped_with_warning():
    est = PrecisionEstimate(np.eye(2), 0.1, np.diag([1.0, -1e-18]), np.ones(2, bool))
    with pytest.warns(RuntimeWarning, match="clamped 1"):
        out = omega_hat(est, None, 1.0)
    np.testing.assert_array_equal(out, [1.0, 0.0])


def test_interval_half_width_equals_quantile():
    n = 49
    res = confidence_intervals(np.zeros(2), np.full(2, np.sqrt(n)), n, 0.05)
    np.testing.assert_allclose(res.ci_upper, 1.95996398454005, atol=1e-9)
    np.testing.assert_allclose(res.lengths, 2 * 1.95996398454005, atol=1e-9)


def test_degenerate_interval():
    res = confidence_intervals([0.3], [0.0], 10)
    assert res.ci_lower[0] == res.ci_upper[0] == 0.3
    assert res.covers([0.3])[0]


def test_interval_symmetry_and_width_ordering():
    rng = np.random.default_rng(6)
    bt = rng.normal(size=20)
    om = rng.uniform(0.1, 2, size=20)
    wide = confidence_intervals(bt, om, 100, 0.01)
    narrow = confidence_intervals(bt, om, 100, 0.10)
    # midpoint up to rounding of the two additions
    assert np.all(np.abs((wide.ci_lower + wide.ci_upper) / 2 - bt) <= 4 * np.spacing(np.abs(bt) + 2))
    assert np.all(wide.lengths > narrow.lengths)
    assert np.all(wide.ci_lower <= wide.ci_upper)


def _decomp_inputs(seed, n=150, p=6):
    rng = np.random.default_rng(seed)
    D = rng.normal(size=(n, p))
    beta = rng.normal(size=p)
    x = D + rng.normal(size=(n, p))
    y = x @ beta + rng.normal(size=n)
    ds = load_dataset(y, x, rng.normal(size=(n, 2)))
    eta = ds.y - ds.x @ beta
    x_hat = ds.x + 0.3 * rng.normal(size=(n, p))
    theta = rng.normal(size=(p, p))
    Om = np.linalg.inv(D.T @ D / n)
    b_hat = beta + 0.1 * rng.normal(size=p)
    b_tilde = debias(b_hat, theta, _fit(x_hat), ds)
    return ds, beta, eta, D, Om, x_hat, theta, b_hat, b_tilde


@pytest.mark.parametrize("seed", range(10))
def test_decomposition_identity(seed):
    ds, beta, eta, D, Om, x_hat, theta, b_hat, b_tilde = _decomp_inputs(seed)
    dec = decomposition_check(b_hat, b_tilde, theta, _fit(x_hat), ds, beta, eta, D, Om,
                              return_terms=True)
    assert dec.identity_error < 1e-10
    assert dec.sup_norms.shape == (4,)


def test_exact_plug_ins_give_zero_remainders():
    ds, beta, eta, D, Om, x_hat, theta, b_hat, _ = _decomp_inputs(11)
    b_tilde = debias(beta, Om, _fit(D), ds)
    norms = decomposition_check(beta, b_tilde, Om, _fit(D), ds, beta, eta, D, Om)
    np.testing.assert_array_equal(norms, 0.0)


def test_true_beta_zeroes_last_two_remainders():
    ds, beta, eta, D, Om, x_hat, theta, _, _ = _decomp_inputs(12)
    b_tilde = debias(beta, theta, _fit(x_hat), ds)
    norms = decomposition_check(beta, b_tilde, theta, _fit(x_hat), ds, beta, eta, D, Om)
    assert norms[2] == 0.0 and norms[3] == 0.0


def test_broken_identity_is_a_hard_failure():
    ds, beta, eta, D, Om, x_hat, theta, b_hat, b_tilde = _decomp_inputs(13)
    with pytest.raises(DecompositionError):
        decomposition_check(b_hat, b_tilde + 1e-3, theta, _fit(x_hat), ds, beta, eta, D, Om)
