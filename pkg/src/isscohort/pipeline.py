"""End-to-end analysis of one cohort under one method.

Methods share names with the simulation harness: ``full`` (complete-data Cox),
``cc`` (weighted case-cohort analysis) and ``{mice,smc}[_{rss,iss}]``
(impute the whole pool, a random supersample or an influence-based
supersample, then pool with Rubin's rules).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .calibration import CalibratedWeights, CalibrationError, analysis_weights
from .cox import CoxFit, CoxFitError, CoxModelSpec, dfbeta, fit_weighted_cox
from .design import SampleAssignment, SamplingError, draw_iss, draw_rss
from .imputation import (DEFAULT_REJECT_LIMIT, ImputationError, ImputationSample, ImputedDatasetSet,
                         default_imputation_specs, mice_impute, smcfcs_impute)
from .survival import CohortDataset
from .variance import PooledEstimate, VarianceError, design_variance, rubin_pool

__all__ = ["METHODS", "STAGE_ERRORS", "PipelineSettings", "MethodResult", "parse_method",
           "submodel_influence", "supersample", "run_method"]

METHODS = ("full", "cc", "mice", "mice_rss", "mice_iss", "smc", "smc_rss", "smc_iss")

STAGE_ERRORS = (CoxFitError, CalibrationError, ImputationError, SamplingError, VarianceError,
                ArithmeticError, ValueError, linalg.LinAlgError)


@dataclass(frozen=True)
class PipelineSettings:
    terms: tuple[str, ...]
    submodel_terms: tuple[str, ...]
    imputation_predictors: tuple[str, ...]  # low-cost columns used by the imputation models
    n1: object = 0  # count, or dict of per-stratum counts
    M: int = 10
    L: int = 20
    reject_limit: int = DEFAULT_REJECT_LIMIT


@dataclass(frozen=True, eq=False)
class MethodResult:
    method: str
    terms: tuple[str, ...]
    beta: np.ndarray
    se: np.ndarray
    covariance: np.ndarray
    assignment: SampleAssignment | None = None
    weights: np.ndarray | None = None
    calibration: CalibratedWeights | None = None
    pooled: PooledEstimate | None = None
    fit: CoxFit | None = None
    imputed: ImputedDatasetSet | None = None
    info: dict = field(default_factory=dict)


def parse_method(method: str) -> tuple[str, str]:
    """``"smc_iss"`` -> ``("smc", "iss")``; whole-pool imputation has variant ``"pool"``."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    if method in ("full", "cc"):
        return method, ""
    engine, _, variant = method.partition("_")
    return engine, variant or "pool"


def submodel_influence(cohort: CohortDataset, terms) -> np.ndarray:
    """Influence rows of the unweighted full-cohort Cox fit on the low-cost terms."""
    spec = CoxModelSpec(tuple(terms))
    fit = fit_weighted_cox(cohort, spec)
    return dfbeta(fit, cohort, spec).rows


def _pool_request(cc: SampleAssignment):
    pool = cc.pool
    if cc.strata is None:
        return int(pool.sum())
    return {h: int((pool & (cc.strata == h)).sum()) for h in sorted(np.unique(cc.strata).tolist(), key=str)}


def supersample(cc: SampleAssignment, variant: str, n1, seed, psi=None):
    """Draw the supersample and its analysis weights; returns (assignment, weights, calibration)."""
    if variant == "iss":
        if psi is None:
            raise ValueError("influence-based supersampling needs submodel influence rows")
        assignment = draw_iss(cc, psi, n1, seed)
        w, cal = analysis_weights(assignment, np.linalg.norm(psi, axis=1))
        return assignment, w, cal
    if variant == "rss":
        assignment = draw_rss(cc, n1, seed)
    elif variant == "pool":
        assignment = draw_rss(cc, _pool_request(cc), seed)
    else:
        raise ValueError(f"unknown supersample variant {variant!r}")
    w, _ = analysis_weights(assignment)
    return assignment, w, None


def run_method(settings: PipelineSettings, method: str, cohort: CohortDataset, cc: SampleAssignment | None,
               seed, psi_cache: dict | None = None) -> MethodResult:
    """Run ``method`` on ``cohort``; X outside the case-cohort sample of ``cc`` is treated as missing."""
    engine, variant = parse_method(method)
    spec = CoxModelSpec(tuple(settings.terms))
    if engine == "full":
        fit = fit_weighted_cox(cohort, spec)
        return MethodResult(method, spec.terms, fit.beta, fit.model_se, fit.covariance, fit=fit)
    if cc is None:
        raise ValueError(f"method {method} needs a case-cohort assignment")
    if engine == "cc":
        data = cohort.subset(cc.sample_index)
        w, _ = analysis_weights(cc)
        fit = fit_weighted_cox(data, spec, w)
        var = design_variance(fit, data, cc)
        return MethodResult(method, spec.terms, fit.beta, var.se, var.total, cc, w, fit=fit)
    s_draw, s_imp = seed.spawn(2)
    info = {}
    psi = None
    if variant == "iss":
        cache = {} if psi_cache is None else psi_cache
        if "psi" not in cache:
            cache["psi"] = submodel_influence(cohort, settings.submodel_terms)
        psi = cache["psi"]
    assignment, w, cal = supersample(cc, variant, settings.n1, s_draw, psi)
    if cal is not None:
        info["calibration_iterations"] = cal.iterations
        info["cube_flight_residual"] = float(max(np.max(r.flight_residual)
                                                 for r in assignment.metadata["cube"].values()))
    sample = ImputationSample.from_assignment(cohort.mask_x(cc.case_cohort), assignment)
    specs = default_imputation_specs(sample.data, "mice" if engine == "mice" else "smcfcs",
                                     settings.imputation_predictors)
    if engine == "mice":
        imputed = mice_impute(sample, specs, settings.M, settings.L, s_imp)
    else:
        imputed = smcfcs_impute(sample, spec, specs, w, settings.M, settings.L, s_imp, settings.reject_limit)
        info["limit_hits"] = int(sum(s["limit_hits"] for s in imputed.rejection))
        info["mean_attempts"] = float(np.nanmean([s["mean_attempts"] for s in imputed.rejection]))
        info["flagged_copies"] = int(sum(bool(f) for f in imputed.flags))
    est, var = [], []
    for data in imputed.datasets():
        fit = fit_weighted_cox(data, spec, w)
        est.append(fit.beta)
        var.append(design_variance(fit, data, assignment).total)
    pooled = rubin_pool(est, var, spec.terms)
    return MethodResult(method, spec.terms, pooled.beta, pooled.se, pooled.covariance, assignment, w, cal,
                        pooled, imputed=imputed, info=info)
