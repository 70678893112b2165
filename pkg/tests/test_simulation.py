import numpy as np
import pytest

from additive_iv import simulation as sim
from additive_iv.core import SeededRng
from additive_iv.lasso import solve_lasso
from additive_iv.simulation import (
    ConfigError,
    DesignKind,
    DgpConfig,
    Method,
    ar1_covariance,
    baseline_2sls_lasso,
    baseline_pls,
    build_noise_covariance,
    run_experiment,
    simulate,
)
from additive_iv.tuning import TuningConfig, cv_lasso

SMALL = dict(p=20, q=20)


def test_ar1_entries():
    a = ar1_covariance(5, 0.2)
    assert a[0, 0] == 1.0
    assert a[0, 2] == pytest.approx(0.04, abs=1e-15)
    np.testing.assert_array_equal(a, a.T)


def test_ar1_cholesky_at_full_scale():
    np.linalg.cholesky(ar1_covariance(600, 0.2))
    np.linalg.cholesky(ar1_covariance(600, 0.95))


def test_ar1_rejects_bad_base():
    with pytest.raises(ValueError):
        ar1_covariance(3, 1.0)


def test_noise_covariance_default_row():
    sigma, shrink = build_noise_covariance(100, DgpConfig(), SeededRng(0))
    assert sigma.shape == (101, 101)
    assert np.count_nonzero(sigma[0, 1:]) == 10
    np.testing.assert_array_equal(sigma[0, 1:6], 0.3)
    np.testing.assert_array_equal(sigma, sigma.T)
    assert shrink == 1.0
    assert np.linalg.eigvalsh(sigma)[0] >= 1e-6


def test_noise_covariance_without_endogeneity_is_block_diagonal():
    cfg = DgpConfig(endogeneity_value=0.0)
    sigma, _ = build_noise_covariance(30, cfg, SeededRng(0))
    assert sigma[0, 0] == 1.0 and np.all(sigma[0, 1:] == 0)
    np.testing.assert_array_equal(sigma[1:, 1:], ar1_covariance(30, 0.2))


def test_noise_covariance_repair_is_recorded():
    cfg = DgpConfig(endogeneity_value=0.9, n_extra_endog=5)
    sigma, shrink = build_noise_covariance(20, cfg, SeededRng(1))
    assert 0 < shrink < 1
    assert np.linalg.eigvalsh(sigma)[0] >= 1e-6 * (1 - 1e-9)


def test_noise_covariance_needs_enough_columns():
    with pytest.raises(ConfigError):
        build_noise_covariance(9, DgpConfig(), SeededRng(0))


@pytest.mark.parametrize("bad", [dict(r=200), dict(s=-1), dict(z_corr_base=1.0),
                                 dict(design_kind="cubic"), dict(n=1),
                                 dict(design_kind="nonlinear", r=3)])
def test_invalid_config(bad):
    with pytest.raises((ConfigError, ValueError)):
        DgpConfig(**bad)


def test_from_dict_round_trip_and_unknown_keys():
    cfg = DgpConfig(n=50, design_kind="linear", seed=4)
    assert DgpConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError, match="unknown"):
        DgpConfig.from_dict({"n": 5, "bogus": 1})


@pytest.mark.parametrize("kind", list(DesignKind))
def test_ground_truth_bookkeeping(kind):
    d = simulate(DgpConfig(n=80, design_kind=kind, **SMALL))
    np.testing.assert_array_equal(d.x_raw - d.true_d, d.true_eps)
    np.testing.assert_array_equal(d.y_raw - d.x_raw @ d.true_beta, d.true_eta)
    assert np.count_nonzero(d.true_beta) == 5
    b = np.abs(d.true_beta[d.true_beta != 0])
    assert b.min() >= 0.75 and b.max() <= 1.0
    assert all(len(s) == 5 for s in d.true_support_first)


def test_stored_identity_exact_in_centered_data():
    d = simulate(DgpConfig(n=60, **SMALL))
    assert np.abs(d.dataset.x - (d.x_raw - d.x_raw.mean(axis=0))).max() < 1e-12


def test_linear_design_gamma():
    d = simulate(DgpConfig(n=40, design_kind="linear", **SMALL))
    assert np.all(np.count_nonzero(d.true_gamma, axis=0) == 5)
    nz = d.true_gamma[d.true_gamma != 0]
    assert nz.min() >= 0.75 and nz.max() <= 1.0
    np.testing.assert_allclose(d.true_d, d.dataset.z @ d.true_gamma, atol=1e-12)


def test_fixed_nonlinear_support_uses_first_five_instruments():
    d = simulate(DgpConfig(n=40, random_nonlinear_support=False, **SMALL))
    assert all(s == [0, 1, 2, 3, 4] for s in d.true_support_first)
    z, g = d.dataset.z, d.true_gamma
    want = (g[0, 3] * z[:, 0] ** 2 + g[1, 3] * z[:, 1] + g[2, 3] * z[:, 2] ** 2
            + g[3, 3] * np.sin(np.pi * z[:, 3]) + g[4, 3] * z[:, 4] ** 2)
    np.testing.assert_allclose(d.true_d[:, 3], want, rtol=1e-13)


def test_hard_design_components():
    d = simulate(DgpConfig(n=40, design_kind="nonlinear-hard", **SMALL))
    z, g = d.dataset.z, d.true_gamma
    cols = d.true_support_first[2]
    want = (-8 * g[0, 2] * z[:, cols[0]] ** 2 + g[1, 2] * np.sin(np.pi * z[:, cols[1]])
            + 2 * g[2, 2] * np.log(z[:, cols[2]] ** 2) + g[3, 2] * (10 * z[:, cols[3]]) ** 3
            + g[4, 2] * z[:, cols[4]] ** 2)
    np.testing.assert_allclose(d.true_d[:, 2], want, rtol=1e-12)


def test_log_floor():
    z = np.array([0.0, 1e-12, -1e-12, 0.5])
    np.testing.assert_array_equal(sim._floored(z), [1e-8, 1e-8, -1e-8, 0.5])


def test_exogenous_design_uncorrelated_with_outcome_noise():
    d = simulate(DgpConfig(n=2000, endogeneity_value=0.0, s=0, **SMALL))
    eta = d.true_eta
    r = [np.corrcoef(d.x_raw[:, k], eta)[0, 1] for k in range(20)]
    assert np.max(np.abs(r)) < 0.1


def test_endogenous_columns_correlate_with_outcome_noise():
    d = simulate(DgpConfig(n=2000, **SMALL))
    cols = np.flatnonzero(d.noise_cov[0, 1:])
    r = [np.corrcoef(d.true_eps[:, k], d.true_eta)[0, 1] for k in cols]
    assert np.mean(r) > 0.1


def test_instrument_moments():
    d = simulate(DgpConfig(n=5000, **SMALL))
    emp = np.cov(d.dataset.z[:, :5], rowvar=False)
    assert np.abs(emp - ar1_covariance(5, 0.2)).max() < 0.05


def test_seed_isolation():
    cfg = DgpConfig(n=30, **SMALL)
    a = simulate(cfg, replication=3)
    b = simulate(cfg, replication=3)
    c = simulate(cfg, replication=4)
    assert a.x_raw.tobytes() == b.x_raw.tobytes()
    assert not np.array_equal(a.x_raw, c.x_raw)


def test_pls_is_cv_lasso_on_observed_treatments():
    d = simulate(DgpConfig(n=80, **SMALL))
    tc = TuningConfig()
    beta = baseline_pls(d, tc, SeededRng(5))
    best, mus, *_ = cv_lasso(d.dataset.x, d.dataset.y, tc, SeededRng(5))
    want, _ = solve_lasso(d.dataset.x, d.dataset.y, mus[best])
    assert np.abs(beta - want).max() < 1e-6


def test_pls_exact_model_recovery():
    rng = np.random.default_rng(0)
    from additive_iv.core import load_dataset
    x = rng.normal(size=(200, 10))
    beta = np.zeros(10)
    beta[[0, 4]] = [1.0, -0.8]
    ds = load_dataset(x @ beta, x, rng.normal(size=(200, 2)))
    est = baseline_pls(ds, TuningConfig(), SeededRng(1))
    assert np.abs(est - beta).sum() < 0.05


def test_2sls_null_cascade():
    d = simulate(DgpConfig(n=60, design_kind="linear", **SMALL))
    beta = baseline_2sls_lasso(d, TuningConfig(), SeededRng(0), first_stage_lambda=1e6)
    np.testing.assert_array_equal(beta, 0.0)


def test_single_replication_sd_flag():
    (rep,) = run_experiment(DgpConfig(n=60, design_kind="linear", **SMALL), [Method.PLS], 1)
    assert rep.l1_error_sd == 0.0 and not rep.sd_defined
    assert rep.replications == 1 and rep.n_failed == 0


def test_aggregation_matches_records():
    reps = run_experiment(DgpConfig(n=60, design_kind="linear", **SMALL),
                          ["pls", "2sls-l"], 3)
    for rep in reps:
        l1 = np.array([r["l1_error"] for r in rep.records])
        assert abs(rep.l1_error_mean - l1.mean()) <= 1e-12
        assert abs(rep.l1_error_sd - l1.std(ddof=1)) <= 1e-12
        assert rep.config["design_kind"] == "linear"


def test_parallel_matches_sequential():
    cfg = DgpConfig(n=60, design_kind="linear", **SMALL)
    a = run_experiment(cfg, ["pls", "additive-iv"], 2, parallelism=1,
                       tuning=TuningConfig(k_grid=[1]))
    b = run_experiment(cfg, ["pls", "additive-iv"], 2, parallelism=2,
                       tuning=TuningConfig(k_grid=[1]))
    assert [r.deterministic_dict() for r in a] == [r.deterministic_dict() for r in b]


def test_failures_counted_not_dropped(monkeypatch):
    calls = {"n": 0}

    def flaky(data, config=None, rng=None):
        calls["n"] += 1
        if calls["n"] == 2:
            raise FloatingPointError("boom")
        return np.zeros(data.dataset.p)

    monkeypatch.setattr(sim, "baseline_pls", flaky)
    (rep,) = run_experiment(DgpConfig(n=40, design_kind="linear", **SMALL), ["pls"], 3)
    assert rep.replications == 3 and rep.n_failed == 1
    failed = [r for r in rep.records if r["failed"]]
    assert len(failed) == 1 and "boom" in failed[0]["error"]
    ok = [r["l1_error"] for r in rep.records if not r["failed"]]
    assert rep.l1_error_mean == pytest.approx(np.mean(ok))


def test_replications_must_be_positive():
    with pytest.raises(ValueError):
        run_experiment(DgpConfig(**SMALL), ["pls"], 0)
