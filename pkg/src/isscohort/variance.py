"""Phase-2 variance estimators and Rubin's rules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .cox import CoxFit, CoxModelSpec, dfbeta
from .design import Role, SampleAssignment
from .survival import CohortDataset

__all__ = [
    "VarianceError",
    "PhaseTwoVariance",
    "PooledEstimate",
    "phase_two_term",
    "lin_ying_variance",
    "supersample_variance",
    "stratified_variance",
    "design_variance",
    "rubin_pool",
]

CI_METHOD = "normal quantiles (no Barnard-Rubin df adjustment)"


class VarianceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PhaseTwoVariance:
    total: np.ndarray
    phase1: np.ndarray
    phase2: np.ndarray

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.total))


@dataclass(frozen=True, eq=False)
class PooledEstimate:
    beta: np.ndarray
    covariance: np.ndarray
    within: np.ndarray
    between: np.ndarray
    M: int
    terms: tuple[str, ...] = ()

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    def interval(self, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
        z = stats.norm.ppf(0.5 + level / 2)
        return self.beta - z * self.se, self.beta + z * self.se

    def table(self) -> list[dict]:
        lo, hi = self.interval()
        names = self.terms or tuple(f"b{j}" for j in range(self.beta.size))
        return [dict(term=t, estimate=float(b), se=float(s), lo95=float(l), hi95=float(h))
                for t, b, s, l, h in zip(names, self.beta, self.se, lo, hi)]


def _sym(a):
    return (a + a.T) / 2


def phase_two_term(psi: np.ndarray) -> np.ndarray:
    """Centered outer-product sum ``sum (psi_i - mean)(psi_i - mean)^T``."""
    psi = np.asarray(psi, dtype=float)
    centered = psi - psi.mean(axis=0)
    return _sym(centered.T @ centered)


def _psi_for_sample(fit: CoxFit, sample: CohortDataset, psi) -> np.ndarray:
    if psi is not None:
        return np.asarray(psi, dtype=float)
    return dfbeta(fit, sample, CoxModelSpec(fit.terms)).rows


def _sample_roles(assignment: SampleAssignment, sample: CohortDataset) -> np.ndarray:
    idx = assignment.sample_index
    if idx.size != sample.n:
        raise VarianceError(f"analysis sample has {sample.n} rows, assignment selects {idx.size}")
    return assignment.role[idx]


def lin_ying_variance(fit: CoxFit, sample: CohortDataset, assignment: SampleAssignment,
                      psi=None) -> PhaseTwoVariance:
    """``I_w^-1 + (1 - m / (N - D)) sum_{SC \\ D} (psi_i - mean)(psi_i - mean)^T``.

    ``sample`` is the case-cohort sample in ``assignment.sample_index`` order;
    ``psi`` defaults to the dfbeta rows of the weighted fit.
    """
    role = _sample_roles(assignment, sample)
    if np.any(role == Role.SUPERSAMPLE):
        raise VarianceError("assignment has a supersample; use supersample_variance")
    return supersample_variance(fit, sample, assignment, psi)


def supersample_variance(fit: CoxFit, sample: CohortDataset, assignment: SampleAssignment,
                         psi=None) -> PhaseTwoVariance:
    """Phase-1 plus finite-population-corrected phase-2 term over (SC \\ D) and SS."""
    role = _sample_roles(assignment, sample)
    psi = _psi_for_sample(fit, sample, psi)
    sz = assignment.sizes
    group = (role == Role.SUBCOHORT_NONCASE) | (role == Role.SUPERSAMPLE)
    n_g = int(group.sum())
    if n_g <= 1:
        raise VarianceError(f"need at least 2 sampled non-cases, have {n_g}")
    factor = 1.0 - n_g / (sz["N"] - sz["D"])
    phase1 = fit.covariance
    phase2 = factor * phase_two_term(psi[group])
    return PhaseTwoVariance(_sym(phase1 + phase2), phase1, phase2)


def stratified_variance(fit: CoxFit, sample: CohortDataset, assignment: SampleAssignment,
                        psi=None) -> PhaseTwoVariance:
    """Per-stratum phase-2 terms with factor ``n_h/(n_h - 1) (1 - n_h/(N_h - D_h))``,
    where ``n_h = m_h + n_1h`` and psi is centered within stratum."""
    if assignment.strata is None:
        raise VarianceError("stratified variance needs stratum labels")
    role = _sample_roles(assignment, sample)
    psi = _psi_for_sample(fit, sample, psi)
    strata = assignment.strata[assignment.sample_index]
    group = (role == Role.SUBCOHORT_NONCASE) | (role == Role.SUPERSAMPLE)
    phase2 = np.zeros_like(fit.information)
    for h, s in assignment.stratum_sizes().items():
        rows = group & (strata == h)
        n_h = int(rows.sum())
        pop = s["N"] - s["D"]
        if pop == 0:
            continue
        if n_h < 2:
            raise VarianceError(f"stratum {h!r} has {n_h} sampled non-cases; need at least 2")
        factor = n_h / (n_h - 1) * (1.0 - n_h / pop)
        phase2 = phase2 + factor * phase_two_term(psi[rows])
    phase1 = fit.covariance
    return PhaseTwoVariance(_sym(phase1 + phase2), phase1, _sym(phase2))


def design_variance(fit: CoxFit, sample: CohortDataset, assignment: SampleAssignment,
                    psi=None) -> PhaseTwoVariance:
    """Dispatch on the design: stratified, supersampled or plain case-cohort."""
    if assignment.strata is not None:
        return stratified_variance(fit, sample, assignment, psi)
    return supersample_variance(fit, sample, assignment, psi)


def rubin_pool(estimates, variances, terms: tuple[str, ...] = ()) -> PooledEstimate:
    """Combine ``M >= 2`` completed-data analyses with Rubin's rules."""
    est = np.asarray(estimates, dtype=float)
    var = np.asarray(variances, dtype=float)
    if est.ndim == 1:
        est = est[:, None]
        var = var.reshape(-1, 1, 1)
    M = est.shape[0]
    if M < 2:
        raise VarianceError(f"Rubin pooling needs M >= 2 imputations, got {M}")
    beta = est.mean(axis=0)
    within = _sym(var.mean(axis=0))
    dev = est - beta
    between = _sym(dev.T @ dev / (M - 1))
    total = _sym(within + (M + 1) / M * between)
    return PooledEstimate(beta, total, within, between, M, tuple(terms))
