"""Influence-function-based supersampling and multiple imputation for case-cohort Cox studies."""

__version__ = "0.1.0"

from .survival import (CohortDataset, CohortValidationError, CovariateSchema, CovariateSpec, StepFunction,
                       nelson_aalen_marginal, read_cohort_csv, validate_cohort, weighted_breslow_cumhaz)
from .cox import CoxFit, CoxModelSpec, dfbeta, fit_weighted_cox, risk_accumulators
from .design import (SampleAssignment, draw_balanced, draw_case_cohort, draw_iss, draw_rss,
                     draw_stratified_case_cohort, solve_inclusion_probabilities)
from .calibration import CalibrationProblem, CalibratedWeights, calibrate_iss, rake
from .imputation import mice_impute, single_pass_impute, smcfcs_impute
from .variance import PooledEstimate, design_variance, rubin_pool

__all__ = [
    "__version__",
    "CohortDataset", "CohortValidationError", "CovariateSchema", "CovariateSpec", "StepFunction",
    "nelson_aalen_marginal", "read_cohort_csv", "validate_cohort", "weighted_breslow_cumhaz",
    "CoxFit", "CoxModelSpec", "dfbeta", "fit_weighted_cox", "risk_accumulators",
    "SampleAssignment", "draw_balanced", "draw_case_cohort", "draw_iss", "draw_rss",
    "draw_stratified_case_cohort", "solve_inclusion_probabilities",
    "CalibrationProblem", "CalibratedWeights", "calibrate_iss", "rake",
    "mice_impute", "single_pass_impute", "smcfcs_impute",
    "PooledEstimate", "design_variance", "rubin_pool",
]
