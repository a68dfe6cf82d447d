import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from conftest import random_cohort
from isscohort.cox import (ConvergenceError, CoxFitError, CoxModelSpec, MonotoneLikelihoodError,
                           SingularInformationError, dfbeta, dfbeta_arrays, fit_cox_arrays, fit_weighted_cox,
                           log_pseudo_likelihood, risk_accumulators)
from isscohort.survival import CohortDataset


def test_accumulators_hand_sum():
    s0, s1, s2 = risk_accumulators([1, 1, 1], [[1.0], [0.0], [2.0]], [0.0], [1, 1, 1], 0.5)
    assert (s0, s1[0], s2[0, 0]) == (3.0, 3.0, 5.0)


def test_accumulators_empty_and_linear():
    s0, s1, s2 = risk_accumulators([1, 2], [[1.0], [2.0]], [0.3], [1, 1], 5.0)
    assert s0 == 0 and not s1.any() and not s2.any()
    a = risk_accumulators([1, 2, 3], [[1.0], [2.0], [0.5]], [0.3], [1, 2, 3], 1.5)
    b = risk_accumulators([1, 2, 3], [[1.0], [2.0], [0.5]], [0.3], [2, 4, 6], 1.5)
    assert b[0] == pytest.approx(2 * a[0])
    np.testing.assert_allclose(b[1], 2 * a[1])
    np.testing.assert_allclose(b[2], 2 * a[2])


def test_accumulators_match_oracle():
    ds = random_cohort(20, 3, seed=4)
    beta, w = np.array([0.1, -0.2, 0.3]), np.linspace(0.5, 2, 20)
    for t in ds.time[::4]:
        mine = risk_accumulators(ds.time, ds.z, beta, w, t)
        ref = oracles.accumulators(ds.time, ds.z, beta, w, t)
        for m, r in zip(mine, ref):
            np.testing.assert_allclose(m, r, rtol=1e-12)


def test_symmetric_dataset_gives_zero():
    ds = CohortDataset.from_arrays([1, 1, 2, 2], [1, 1, 0, 0], [[0.0], [1.0], [0.0], [1.0]])
    fit = fit_weighted_cox(ds, CoxModelSpec(("z1",)))
    assert abs(fit.beta[0]) < 1e-12


@pytest.mark.parametrize("seed", range(8))
def test_matches_golden_section_oracle(seed):
    ds = random_cohort(20, 1, seed=seed, ties=seed % 2 == 0)
    w = np.random.default_rng(seed).uniform(0.5, 3, 20) if seed % 3 == 0 else np.ones(20)
    fit = fit_weighted_cox(ds, CoxModelSpec(("z1",)), w)
    ref = oracles.golden_max_1d(lambda b: oracles.loglik(b, ds.time, ds.event, ds.z, w))
    assert abs(fit.beta[0] - ref) <= 1e-6
    assert fit.loglik == pytest.approx(oracles.loglik(fit.beta, ds.time, ds.event, ds.z, w), rel=1e-12)


def test_loglik_matches_oracle():
    ds = random_cohort(30, 2, seed=5, ties=True)
    w = np.random.default_rng(0).uniform(0.5, 2, 30)
    for beta in ([0, 0], [0.4, -1.2], [2.0, 1.0]):
        assert log_pseudo_likelihood(beta, ds.time, ds.event, ds.z, w) == pytest.approx(
            oracles.loglik(beta, ds.time, ds.event, ds.z, w), rel=1e-12)


def _score_fd(beta, time, event, z, w, h=1e-6):
    g = np.zeros_like(beta)
    for j in range(beta.size):
        e = np.zeros_like(beta)
        e[j] = h
        g[j] = (log_pseudo_likelihood(beta + e, time, event, z, w)
                - log_pseudo_likelihood(beta - e, time, event, z, w)) / (2 * h)
    return g


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_score_and_information_vs_finite_differences(seed):
    from isscohort.cox import _SortedProblem
    ds = random_cohort(40, 3, seed=seed, ties=seed % 2 == 0)
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.5, 3, 40)
    beta = rng.normal(0, 0.5, 3)
    prob = _SortedProblem(ds.time, ds.event, ds.z, w)
    _, score, info, _ = prob.evaluate(beta)
    fd = _score_fd(beta, ds.time, ds.event, ds.z, w)
    assert np.max(np.abs(score - fd)) <= 1e-5 * max(1.0, np.max(np.abs(fd)))
    h = 1e-5
    num = np.zeros((3, 3))
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        num[:, j] = -(prob.evaluate(beta + e)[1] - prob.evaluate(beta - e)[1]) / (2 * h)
    assert np.max(np.abs(info - num)) <= 1e-4 * max(1.0, np.max(np.abs(num)))
    np.testing.assert_allclose(info, oracles.information(beta, ds.time, ds.event, ds.z, w), rtol=1e-10, atol=1e-12)


def test_weight_scaling_leaves_beta():
    ds = random_cohort(60, 2, seed=8)
    w = np.random.default_rng(8).uniform(0.5, 2, 60)
    spec = CoxModelSpec(("z1", "z2"))
    a, b = fit_weighted_cox(ds, spec, w), fit_weighted_cox(ds, spec, 7.5 * w)
    np.testing.assert_allclose(a.beta, b.beta, atol=1e-9)


def test_information_symmetric_pd_and_score_small():
    ds = random_cohort(100, 3, seed=1)
    fit = fit_weighted_cox(ds, CoxModelSpec(("z1", "z2", "z3")))
    assert np.allclose(fit.information, fit.information.T)
    assert np.all(np.linalg.eigvalsh(fit.information) > 0)
    assert np.max(np.abs(fit.score)) <= 1e-9
    assert fit.converged and fit.ties == "breslow"


def test_interaction_term_design():
    ds = CohortDataset.from_arrays([1, 2, 3], [1, 0, 1], [[1.0], [2.0], [3.0]], [[2.0], [0.5], [1.0]],
                                   ["z1"], ["xc1"])
    spec = CoxModelSpec(("z1", "xc1", "z1:xc1"))
    np.testing.assert_array_equal(spec.design_matrix(ds)[:, 2], [2.0, 1.0, 3.0])
    with pytest.raises(ValueError):
        CoxModelSpec(("z1", "z1"))


def test_monotone_likelihood_detected():
    # covariate perfectly orders event times: MLE at infinity
    ds = CohortDataset.from_arrays([1, 2, 3, 4], [1, 1, 1, 0], [[3.0], [2.0], [1.0], [0.0]])
    with pytest.raises(MonotoneLikelihoodError):
        fit_weighted_cox(ds, CoxModelSpec(("z1",)))


def test_singular_information():
    ds = random_cohort(30, 1, seed=2)
    z = np.column_stack([ds.z[:, 0], 2 * ds.z[:, 0]])
    with pytest.raises(SingularInformationError):
        fit_cox_arrays(ds.time, ds.event, z)


def test_non_convergence_reported():
    ds = random_cohort(30, 1, seed=2)
    with pytest.raises(ConvergenceError):
        fit_cox_arrays(ds.time, ds.event, ds.z, max_iter=1)


def test_no_events():
    with pytest.raises(CoxFitError):
        fit_cox_arrays([1, 2], [0, 0], [[0.0], [1.0]])


# influence functions

@pytest.mark.parametrize("seed", range(6))
def test_dfbeta_matches_double_loop_oracle(seed):
    ds = random_cohort(18, 2, seed=seed, ties=seed % 2 == 1)
    w = np.random.default_rng(seed).uniform(0.5, 3, 18) if seed >= 3 else None
    fit = fit_weighted_cox(ds, CoxModelSpec(("z1", "z2")), w)
    mine = dfbeta(fit, ds).rows
    ref = oracles.influence(fit.beta, ds.time, ds.event, ds.z, w)
    np.testing.assert_allclose(mine, ref, rtol=1e-9, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_dfbeta_sums_to_zero(seed, weighted):
    ds = random_cohort(50, 2, seed=seed, ties=seed % 2 == 0)
    w = np.random.default_rng(seed).uniform(0.5, 3, 50) if weighted else None
    try:
        fit = fit_weighted_cox(ds, CoxModelSpec(("z1", "z2")), w)
    except CoxFitError:
        return
    assert np.max(np.abs(dfbeta(fit, ds).rows.sum(axis=0))) <= 1e-8


def test_dfbeta_censored_rows_lack_first_term():
    ds = random_cohort(25, 1, seed=11)
    fit = fit_weighted_cox(ds, CoxModelSpec(("z1",)))
    rows = dfbeta(fit, ds).rows
    ref = oracles.influence(fit.beta, ds.time, ds.event, ds.z)
    cens = ds.event == 0
    np.testing.assert_allclose(rows[cens], ref[cens], rtol=1e-10, atol=1e-14)


def test_dfbeta_zero_before_first_event():
    ds = CohortDataset.from_arrays([0.5, 1, 2, 3, 4], [0, 1, 1, 0, 1], [[5.0], [1.0], [0.0], [2.0], [-1.0]])
    fit = fit_weighted_cox(ds, CoxModelSpec(("z1",)))
    assert dfbeta(fit, ds).rows[0, 0] == 0.0


@pytest.mark.parametrize("n, seed", [(15, 21), (15, 22), (80, 5)])
def test_leave_one_out_oracle(n, seed):
    # one-step influence approximates the exact leave-one-out change; the
    # approximation tightens as n grows
    ds = random_cohort(n, 1, seed=seed, beta=[0.8])
    spec = CoxModelSpec(("z1",))
    fit = fit_weighted_cox(ds, spec)
    psi = dfbeta(fit, ds).rows[:, 0]
    loo = np.array([fit.beta[0] - fit_weighted_cox(ds.subset(np.arange(n) != i), spec).beta[0]
                    for i in range(n)])
    assert np.corrcoef(psi, loo)[0, 1] > 0.9
    if n >= 80:
        assert np.max(np.abs(psi - loo)) <= 0.1 * np.max(np.abs(loo))


def test_dfbeta_arrays_respects_input_order():
    ds = random_cohort(20, 1, seed=3)
    perm = np.random.default_rng(0).permutation(20)
    fit = fit_cox_arrays(ds.time, ds.event, ds.z)
    a = dfbeta_arrays(fit.beta, ds.time, ds.event, ds.z)
    b = dfbeta_arrays(fit.beta, ds.time[perm], ds.event[perm], ds.z[perm])
    np.testing.assert_allclose(b, a[perm], atol=1e-15)
