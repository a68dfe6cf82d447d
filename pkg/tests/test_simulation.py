import math

import numpy as np
import pytest
from scipy import stats

import isscohort.simulation as sim
from isscohort.simulation import (TRUE_BETA, ReplicateResult, SimConfig, _allocate, _covariates, _times,
                                  format_table, generate_cohort, latent_correlation, run_replicate, run_study,
                                  summarize)

SMALL = dict(N=800, n_sc=60, n1=120, M=2, L=2, event_fraction=0.06, replicates=3, seed=99)


def test_true_beta_vector():
    assert TRUE_BETA == (1.5, 0.5, 0.1, 0.2, 0.4, 0.1, 0.1, 0.1, 0.3, 0.5, 0.3)
    assert SimConfig().lp_beta[-1] == 0 and SimConfig(interaction=True).lp_beta[-1] == 0.3
    assert len(SimConfig().true_beta) == 10 and len(SimConfig().terms) == 10
    assert SimConfig(interaction=True).terms[-1] == "z1:xc1"


def test_covariate_moments():
    n = 1_000_000
    z, _ = _covariates(n, np.random.default_rng(0))
    c = np.corrcoef(z[:, :3].T)
    for (i, j), target in {(0, 1): 0.05, (0, 2): -0.05, (1, 2): 0.01}.items():
        se = (1 - target**2) / math.sqrt(n)
        assert abs(c[i, j] - target) <= 3 * se, (i, j, c[i, j])
    assert abs(z[:, 2].mean() - 0.5) <= 3 * math.sqrt(0.25 / n)


def test_latent_correlation_closed_form():
    rng = np.random.default_rng(1)
    rho = latent_correlation(0.3)
    zu = rng.multivariate_normal([0, 0], [[1, rho], [rho, 1]], 400_000)
    assert np.corrcoef(zu[:, 0], zu[:, 1] > 0)[0, 1] == pytest.approx(0.3, abs=0.005)


def test_other_death_rate():
    n = 1_000_000
    rng = np.random.default_rng(2)
    # no events (tiny hazard) and entry at time 0, so follow-up ends at 15 unless C2 < 15
    t, d = _times(n, rng, np.zeros(n), -60.0, 1.0, 0.0, 15.0, 0.1)
    assert not d.any()
    p = np.mean(t == 15.0)
    assert abs(p - 0.9) <= 3 * math.sqrt(0.09 / n)


def test_inverse_transform_ks():
    n = 100_000
    beta0 = -1.3
    t, d = _times(n, np.random.default_rng(3), np.zeros(n), beta0, 1.0, 0.0, 1e9, 1e-12)
    assert d.all()
    res = stats.kstest(t, lambda s: 1 - np.exp(-math.exp(beta0) * s))
    assert res.statistic < 1.63 / math.sqrt(n)  # 1% critical value


def test_weibull_shape():
    n = 100_000
    t, _ = _times(n, np.random.default_rng(4), np.zeros(n), 0.0, 2.0, 0.0, 1e9, 1e-12)
    assert stats.kstest(t, lambda s: 1 - np.exp(-(s**2))).statistic < 1.63 / math.sqrt(n)


def test_calibrated_event_count_paper_scale():
    cfg = SimConfig.paper_scale(replicates=1)
    ds = generate_cohort(cfg, 5)
    assert abs(ds.n_events - 250) <= 3 * math.sqrt(250)
    assert cfg.resolved_beta0() == pytest.approx(cfg.resolved_beta0())


def test_generate_cohort_structure_and_determinism():
    cfg = SimConfig(**SMALL)
    a, b = generate_cohort(cfg, 1), generate_cohort(cfg, 1)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.time, b.time)
    assert a.n == 800 and a.z_names == sim.Z_COLUMNS and a.x_names == sim.X_COLUMNS
    assert np.all(a.time <= 15.0) and np.all(a.time > 0)
    assert set(np.unique(a.z[:, 3] + 2 * a.z[:, 4])) <= {0, 1, 2}
    strat = generate_cohort(SimConfig(**SMALL, stratified=True), 1)
    assert set(strat.strata) == {"0", "1"}


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(N=100, n_sc=50, n1=50)
    with pytest.raises(ValueError):
        SimConfig(methods=("bogus",))
    with pytest.raises(ValueError):
        SimConfig(M=1)


def test_allocate_largest_remainder():
    assert _allocate(10, {"a": 1, "b": 1, "c": 1}) == {"a": 4, "b": 3, "c": 3}
    out = _allocate(100, {"x": 2537, "y": 2463})
    assert out == {"x": 51, "y": 49}
    assert sum(_allocate(7, {1: 5, 2: 9, 3: 13}).values()) == 7


# metrics

def _res(method, est, se=(1.0,), ok=True, rep=0):
    return ReplicateResult(rep, method, ("b",), np.array(est, float), np.array(se, float), 0.5,
                           "ok" if ok else "failed: x")


def test_summarize_hand_example():
    t = summarize([_res("full", [1.0]), _res("full", [3.0], rep=1)], [2.0])
    assert t.bias["full"][0] == 0 and t.mc_se["full"][0] == pytest.approx(math.sqrt(2))
    assert t.coverage["full"][0] == 1.0 and t.rel_eff["full"][0] == 1.0


def test_summarize_rel_eff_and_failures():
    rs = [_res("full", [v], rep=i) for i, v in enumerate([1.0, 3.0])]
    rs += [_res("cc", [v], rep=i) for i, v in enumerate([0.0, 4.0, 2.0])]
    rs += [_res("cc", [np.nan], ok=False, rep=3)]
    t = summarize(rs, [2.0])
    assert t.n_ok["cc"] == 3
    assert t.rel_eff["cc"][0] == pytest.approx(2.0 / 4.0)
    with pytest.raises(ValueError):
        summarize([_res("full", [1.0])], [1.0])


def test_format_table_layout():
    rs = [_res("full", [v], rep=i) for i, v in enumerate([1.0, 3.0])]
    text = format_table(summarize(rs, [2.0]), "demo")
    assert "Full Cohort" in text and "demo" in text and "mc.se" in text
    assert "time" not in format_table(summarize(rs, [2.0]), timing=False).lower()


# pipeline

def test_full_method_near_truth():
    cfg = SimConfig(N=4000, n_sc=100, n1=200, M=2, L=1, event_fraction=0.1, seed=3, replicates=1)
    r = run_replicate(cfg, 0, ("full",))[0]
    assert r.ok
    assert np.all(np.abs(r.estimate - cfg.true_beta) <= 4 * r.se)


def test_replicate_determinism_and_method_independence():
    cfg = SimConfig(**SMALL)
    a = run_replicate(cfg, 1, ("cc", "smc_iss"))
    b = run_replicate(cfg, 1, ("smc_iss",))
    c = run_replicate(cfg, 1, ("cc", "smc_iss"))
    assert a[1].status == b[0].status == "ok"
    np.testing.assert_array_equal(a[1].estimate, b[0].estimate)
    np.testing.assert_array_equal(a[1].se, c[1].se)


def test_stage_failure_recorded(monkeypatch):
    def boom(*args, **kw):
        raise ArithmeticError("forced")
    monkeypatch.setattr(sim, "run_method", boom)
    out = run_replicate(SimConfig(**SMALL), 0, ("full", "cc"))
    assert all(r.status.startswith("failed") and np.isnan(r.estimate).all() for r in out)


def test_study_threads_identical():
    cfg = SimConfig(**SMALL, methods=("full", "cc", "mice_rss"))
    a = run_study(cfg, threads=1)
    b = run_study(cfg, threads=2)
    assert [(r.replicate, r.method) for r in a] == [(r.replicate, r.method) for r in b]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.estimate, y.estimate)


def test_stratified_replicate_runs():
    cfg = SimConfig(**SMALL, stratified=True)
    out = run_replicate(cfg, 0, ("cc", "mice_rss", "smc_iss"))
    assert all(r.ok for r in out), [r.status for r in out]
