import itertools

import numpy as np
import pytest
from dataclasses import replace

from conftest import random_cohort
from isscohort.calibration import closed_form_weights
from isscohort.cox import CoxFit, CoxModelSpec, dfbeta, fit_weighted_cox
from isscohort.design import Role, SampleAssignment, draw_case_cohort, draw_rss
from isscohort.survival import CohortDataset
from isscohort.variance import (VarianceError, design_variance, lin_ying_variance, phase_two_term, rubin_pool,
                                stratified_variance, supersample_variance)


def stub_fit(p=1):
    return CoxFit(np.zeros(p), np.eye(p), 0.0, 1, True, np.zeros(p), tuple(f"b{j}" for j in range(p)))


def assignment(N, D, m, n1, strata=None):
    role = np.full(N, Role.UNSAMPLED, dtype=np.int8)
    role[:D] = Role.CASE
    role[D:D + m] = Role.SUBCOHORT_NONCASE
    role[D + m:D + m + n1] = Role.SUPERSAMPLE
    sub = np.zeros(N, bool)
    sub[D:D + m] = True
    prob = np.full(N, np.nan)
    return SampleAssignment(role, sub, prob, "rss" if n1 else "cc", strata)


def sample_of(a):
    n = a.sample_index.size
    return CohortDataset.from_arrays(np.arange(1, n + 1, dtype=float), np.zeros(n, int))


def oracle_phase2(psi, groups, factors):
    """Scripted re-derivation: explicit per-unit outer products."""
    p = psi.shape[1]
    out = np.zeros((p, p))
    for rows, f in zip(groups, factors):
        rows = list(rows)
        mean = [sum(psi[i, k] for i in rows) / len(rows) for k in range(p)]
        for i in rows:
            d = [psi[i, k] - mean[k] for k in range(p)]
            out += f * np.array([[d[a] * d[b] for b in range(p)] for a in range(p)])
    return out


def test_lin_ying_hand_example():
    a = assignment(12, 2, 2, 0)
    psi = np.array([[0.0], [0.0], [1.0], [3.0]])
    v = lin_ying_variance(stub_fit(), sample_of(a), a, psi)
    assert v.phase2[0, 0] == pytest.approx(1.6, abs=1e-12)
    assert v.total[0, 0] == pytest.approx(2.6, abs=1e-12)


def test_census_gives_zero_phase2():
    a = assignment(6, 2, 4, 0)
    psi = np.random.default_rng(0).standard_normal((6, 2))
    assert np.abs(lin_ying_variance(stub_fit(2), sample_of(a), a, psi).phase2).max() == 0
    b = assignment(8, 2, 3, 3)
    psi = np.random.default_rng(1).standard_normal((8, 2))
    assert np.abs(supersample_variance(stub_fit(2), sample_of(b), b, psi).phase2).max() == 0


def test_supersample_matches_oracle_and_degenerate():
    rng = np.random.default_rng(2)
    a = assignment(40, 3, 5, 6)
    psi = rng.standard_normal((14, 2))
    v = supersample_variance(stub_fit(2), sample_of(a), a, psi)
    ref = oracle_phase2(psi, [range(3, 14)], [1 - 11 / 37])
    np.testing.assert_allclose(v.phase2, ref, rtol=1e-12, atol=1e-14)
    b = assignment(40, 3, 5, 0)
    psi_b = psi[:8]
    np.testing.assert_allclose(supersample_variance(stub_fit(2), sample_of(b), b, psi_b).total,
                               lin_ying_variance(stub_fit(2), sample_of(b), b, psi_b).total, rtol=0, atol=0)
    with pytest.raises(VarianceError):
        lin_ying_variance(stub_fit(2), sample_of(a), a, psi)


def test_stratified_matches_oracle():
    rng = np.random.default_rng(3)
    N = 60
    strata = np.where(np.arange(N) % 3 == 0, "a", "b")
    a = assignment(N, 4, 10, 8, strata)
    idx = a.sample_index
    psi = rng.standard_normal((idx.size, 2))
    v = stratified_variance(stub_fit(2), sample_of(a), a, psi)
    groups, factors = [], []
    s_idx = strata[idx]
    noncase = a.role[idx] != Role.CASE
    for h in ("a", "b"):
        rows = np.flatnonzero(noncase & (s_idx == h))
        pop = int(np.sum(strata == h)) - int(np.sum((strata == h) & (a.role == Role.CASE)))
        n_h = rows.size
        groups.append(rows)
        factors.append(n_h / (n_h - 1) * (1 - n_h / pop))
    np.testing.assert_allclose(v.phase2, oracle_phase2(psi, groups, factors), rtol=1e-12, atol=1e-14)


def test_single_stratum_formula_reduction():
    rng = np.random.default_rng(4)
    a = assignment(50, 4, 9, 7)
    psi = rng.standard_normal((20, 1))
    plain = supersample_variance(stub_fit(), sample_of(a), a, psi)
    s = replace(a, strata=np.repeat("h", 50))
    strat = stratified_variance(stub_fit(), sample_of(s), s, psi)
    n = 16
    assert strat.phase2[0, 0] == pytest.approx(n / (n - 1) * plain.phase2[0, 0], rel=1e-12)
    np.testing.assert_allclose(design_variance(stub_fit(), sample_of(s), s, psi).total, strat.total)


def test_stratified_census_and_errors():
    strata = np.repeat(["a", "b"], 10)
    role_a = assignment(20, 0, 0, 0, strata)
    role = role_a.role.copy()
    role[:] = Role.SUBCOHORT_NONCASE
    a = replace(role_a, role=role)
    psi = np.random.default_rng(5).standard_normal((20, 1))
    assert stratified_variance(stub_fit(), sample_of(a), a, psi).phase2[0, 0] == 0
    role[1:10] = Role.UNSAMPLED
    b = replace(role_a, role=role)
    with pytest.raises(VarianceError):
        stratified_variance(stub_fit(), sample_of(b), b, psi[np.r_[0, 10:20]])


def test_symmetric_psd_on_real_fit():
    ds = random_cohort(300, 2, seed=6, event_rate=0.2)
    a = draw_rss(draw_case_cohort(ds, 40, 1), 30, 2)
    sample = ds.subset(a.sample_index)
    w = closed_form_weights(a, "supersampled")
    fit = fit_weighted_cox(sample, CoxModelSpec(("z1", "z2")), w)
    v = design_variance(fit, sample, a)
    for m in (v.total, v.phase1, v.phase2):
        assert np.abs(m - m.T).max() <= 1e-12
    assert np.linalg.eigvalsh(v.phase2).min() >= -1e-10
    psi = dfbeta(fit, sample, CoxModelSpec(("z1", "z2")), w).rows
    np.testing.assert_allclose(design_variance(fit, sample, a, psi).total, v.total)


def test_phase_two_term_centered():
    assert phase_two_term(np.array([[1.0], [3.0]]))[0, 0] == pytest.approx(2.0)


def test_sample_size_mismatch():
    a = assignment(12, 2, 2, 0)
    with pytest.raises(VarianceError):
        lin_ying_variance(stub_fit(), CohortDataset.from_arrays([1.0, 2.0], [0, 0]), a, np.zeros((2, 1)))


# Rubin's rules

def test_rubin_hand_example():
    pooled = rubin_pool([1.0, 2.0], [0.5, 0.5])
    assert pooled.beta[0] == 1.5 and pooled.between[0, 0] == 0.5
    assert pooled.covariance[0, 0] == pytest.approx(1.25, abs=1e-12)


def test_rubin_identical_copies():
    v = np.array([[2.0, 0.3], [0.3, 1.0]])
    pooled = rubin_pool([[1.0, -1.0]] * 4, [v] * 4)
    assert not pooled.between.any()
    np.testing.assert_allclose(pooled.covariance, v)


def test_rubin_permutation_invariant_and_total_exceeds_within():
    rng = np.random.default_rng(7)
    est = rng.standard_normal((4, 2))
    var = np.array([np.eye(2) * rng.uniform(0.5, 2) for _ in range(4)])
    ref = rubin_pool(est, var)
    for perm in itertools.permutations(range(4)):
        p = rubin_pool(est[list(perm)], var[list(perm)])
        np.testing.assert_allclose(p.beta, ref.beta, rtol=1e-14)
        np.testing.assert_allclose(p.covariance, ref.covariance, rtol=1e-13)
    assert np.all(np.diag(ref.covariance) >= np.diag(ref.within))
    lo, hi = ref.interval()
    np.testing.assert_allclose((hi - lo) / 2, 1.959963984540054 * ref.se)
    assert ref.table()[0]["term"] == "b0"


def test_rubin_needs_two():
    with pytest.raises(VarianceError):
        rubin_pool([1.0], [0.5])
