"""Multiple imputation of design-missing expensive covariates.

Two engines share the chained-equations loop:

* ``mice_impute``: each incomplete column is drawn from its conditional model
  (linear-normal or logistic) given the low-cost covariates, the other
  expensive covariates and, by default, the outcome summaries (marginal
  Nelson-Aalen cumulative hazard at the observed time and the event indicator).
* ``smcfcs_impute``: proposals come from outcome-free conditional models and
  are accepted with the Cox survivor probability ``exp(-H0(t) exp(lp))``,
  where ``H0`` is the weighted Breslow estimate from the current completed
  sample and the fixed analysis weights.

Imputation-model parameters are always fitted on the subcohort rows, where the
expensive covariates are observed by design.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .cox import CoxFitError, CoxModelSpec, fit_cox_arrays
from .design import SampleAssignment, as_rng
from .survival import CohortDataset, nelson_aalen_marginal

__all__ = [
    "ImputationError",
    "ImputationModelSpec",
    "ParameterDraw",
    "ImputationSample",
    "ImputedDatasetSet",
    "default_imputation_specs",
    "posterior_draw",
    "mice_impute",
    "smcfcs_impute",
    "single_pass_impute",
]

log = logging.getLogger(__name__)

CUMHAZ = "_cumhaz"
EVENT = "_event"
INIT_METHOD = "random draws from observed subcohort values"
ACCEPT_RULE = ("accept when U <= exp(-H) for censored units and U <= H exp(1 - H) for events, "
               "H = H0(t) exp(lp)")
DEFAULT_REJECT_LIMIT = 1000
MIN_EVENT_LEVEL = 5


class ImputationError(ArithmeticError):
    pass


@dataclass(frozen=True)
class ImputationModelSpec:
    column: str
    family: str  # "normal" or "logistic"
    predictors: tuple[str, ...]

    def __post_init__(self):
        if self.family not in ("normal", "logistic"):
            raise ValueError(f"unsupported imputation family {self.family!r}")
        object.__setattr__(self, "predictors", tuple(self.predictors))
        if self.column in self.predictors:
            raise ValueError(f"{self.column} cannot predict itself")

    @property
    def uses_outcome(self) -> bool:
        return CUMHAZ in self.predictors or EVENT in self.predictors


@dataclass(frozen=True, eq=False)
class ParameterDraw:
    family: str
    coef: np.ndarray
    sigma: float = 0.0

    def sample(self, design: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        eta = design @ self.coef
        if self.family == "normal":
            return eta + self.sigma * rng.standard_normal(eta.shape[0])
        return (rng.random(eta.shape[0]) < _expit(eta)).astype(float)


def _expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def default_imputation_specs(dataset: CohortDataset, engine: str = "mice",
                             low_cost: tuple[str, ...] | None = None) -> tuple[ImputationModelSpec, ...]:
    """One spec per expensive column: binary columns get a logistic model, others linear-normal.

    Predictors are the low-cost columns and the other expensive columns; the
    MICE engine adds the outcome summaries.
    """
    low_cost = dataset.z_names if low_cost is None else tuple(low_cost)
    specs = []
    binary = set()
    if dataset.schema is not None:
        binary = {c.name for c in dataset.schema.x if c.kind == "binary"}
    for name in dataset.x_names:
        col = dataset.column(name)
        obs = col[~np.isnan(col)]
        is_bin = name in binary or (obs.size > 0 and np.all(np.isin(obs, (0.0, 1.0))))
        preds = low_cost + tuple(x for x in dataset.x_names if x != name)
        if engine == "mice":
            preds = preds + (CUMHAZ, EVENT)
        elif engine != "smcfcs":
            raise ValueError(f"unknown imputation engine {engine!r}")
        specs.append(ImputationModelSpec(name, "logistic" if is_bin else "normal", preds))
    return tuple(specs)


def _fit_logistic(g: np.ndarray, y: np.ndarray, max_iter: int = 50):
    beta = np.zeros(g.shape[1])
    converged = False
    for _ in range(max_iter):
        eta = g @ beta
        # coefficients are scale dependent, so divergence is judged on the linear predictor
        if np.max(np.abs(eta), initial=0.0) > 30:
            raise ImputationError("perfect or quasi-complete separation in logistic imputation model")
        p = _expit(eta)
        wts = p * (1 - p)
        info = (g * wts[:, None]).T @ g
        grad = g.T @ (y - p)
        try:
            step = linalg.solve(info, grad, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            raise ImputationError("singular design in logistic imputation model") from None
        beta = beta + step
        if np.max(np.abs(step * (np.abs(g).max(axis=0) + 1e-300))) < 1e-10:
            converged = True
            break
    if not converged:
        raise ImputationError("logistic imputation model did not converge (separation suspected)")
    eta = g @ beta
    p = _expit(eta)
    info = (g * (p * (1 - p))[:, None]).T @ g
    return beta, info


def posterior_draw(spec: ImputationModelSpec | str, design: np.ndarray, y: np.ndarray, seed) -> ParameterDraw:
    """Approximate posterior draw of the imputation-model parameters.

    Linear-normal: ``sigma^2 = RSS / chi2(n - k)`` and coefficients from
    ``N(beta_hat, sigma^2 (G'G)^-1)``. Logistic: ``N(mle, info^-1)``.
    ``design`` should include the intercept column.
    """
    rng = as_rng(seed)
    family = spec.family if isinstance(spec, ImputationModelSpec) else spec
    g = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = g.shape
    if family == "normal":
        if n <= k:
            raise ImputationError(f"only {n} fitting rows for {k} parameters")
        q, r = np.linalg.qr(g)
        if np.min(np.abs(np.diag(r))) <= 1e-10 * np.max(np.abs(np.diag(r))):
            raise ImputationError("singular design in linear imputation model")
        beta_hat = linalg.solve_triangular(r, q.T @ y)
        rss = float(np.sum((y - g @ beta_hat) ** 2))
        sigma2 = rss / rng.chisquare(n - k)
        # cov = sigma^2 (R'R)^-1  ->  draw = beta_hat + sigma R^-1 z
        z = rng.standard_normal(k)
        coef = beta_hat + np.sqrt(sigma2) * linalg.solve_triangular(r, z)
        return ParameterDraw("normal", coef, float(np.sqrt(sigma2)))
    mle, info = _fit_logistic(g, y)
    try:
        chol = linalg.cholesky(info, lower=False)
    except linalg.LinAlgError:
        raise ImputationError("logistic information not positive definite") from None
    coef = mle + linalg.solve_triangular(chol, rng.standard_normal(k))
    return ParameterDraw("logistic", coef)


@dataclass(frozen=True, eq=False)
class ImputationSample:
    """Rows to be analysed (X NaN where missing by design), subcohort fitting rows,
    and the marginal cumulative hazard at each row's time."""

    data: CohortDataset
    fit_rows: np.ndarray
    cumhaz: np.ndarray

    @classmethod
    def from_assignment(cls, cohort: CohortDataset, assignment: SampleAssignment,
                        rows: np.ndarray | None = None) -> "ImputationSample":
        """``cohort`` holds X observed on the case-cohort sample; ``rows`` defaults to the
        analysis sample of ``assignment``."""
        idx = assignment.sample_index if rows is None else np.asarray(rows)
        cumhaz = nelson_aalen_marginal(cohort)(cohort.time)
        return cls(cohort.subset(idx), assignment.subcohort[idx].copy(), cumhaz[idx])


@dataclass(frozen=True, eq=False)
class ImputedDatasetSet:
    base: CohortDataset
    completed_x: tuple[np.ndarray, ...]
    method: str
    iterations: int
    seeds: tuple = ()
    rejection: tuple[dict, ...] = ()
    flags: tuple[tuple[str, ...], ...] = ()
    metadata: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return len(self.completed_x)

    def datasets(self):
        for x in self.completed_x:
            yield self.base.with_x(x)

    def long_format(self):
        """Rows of (copy, id, time, event, z..., x...) for export."""
        for m, x in enumerate(self.completed_x, start=1):
            for i in range(self.base.n):
                yield (m, self.base.ids[i], self.base.time[i], int(self.base.event[i]),
                       *self.base.z[i].tolist(), *x[i].tolist())


class _Chain:
    """Shared state of one chained-equations copy."""

    def __init__(self, sample: ImputationSample, specs, rng):
        self.sample = sample
        self.data = sample.data
        self.specs = tuple(specs)
        self.rng = rng
        self.x = np.array(sample.data.x, dtype=float)
        self.missing = np.isnan(self.x)
        self.fit_rows = np.asarray(sample.fit_rows, dtype=bool)
        self.x_names = self.data.x_names
        self.z_names = self.data.z_names
        self.colidx = {s.column: self.x_names.index(s.column) for s in self.specs}

    def active_specs(self):
        return [s for s in self.specs if self.missing[:, self.colidx[s.column]].any()]

    def initialise(self):
        for s in self.active_specs():
            j = self.colidx[s.column]
            donors = self.x[self.fit_rows & ~self.missing[:, j], j]
            if donors.size == 0:
                raise ImputationError(f"no observed subcohort values for {s.column}")
            rows = self.missing[:, j]
            self.x[rows, j] = self.rng.choice(donors, size=int(rows.sum()), replace=True)

    def predictors(self, spec: ImputationModelSpec, rows) -> np.ndarray:
        cols = [np.ones(int(np.count_nonzero(rows)) if rows.dtype == bool else len(rows))]
        for name in spec.predictors:
            if name == CUMHAZ:
                cols.append(self.sample.cumhaz[rows])
            elif name == EVENT:
                cols.append(self.data.event[rows].astype(float))
            elif name in self.z_names:
                cols.append(self.data.z[rows, self.z_names.index(name)])
            else:
                cols.append(self.x[rows, self.x_names.index(name)])
        return np.column_stack(cols)

    def draw_parameters(self, spec: ImputationModelSpec) -> ParameterDraw:
        j = self.colidx[spec.column]
        rows = self.fit_rows & ~self.missing[:, j]
        g = self.predictors(spec, rows)
        keep = np.ones(g.shape[1], dtype=bool)
        if EVENT in spec.predictors:
            # a subcohort with almost no cases cannot identify the event coefficient
            col = 1 + spec.predictors.index(EVENT)
            n_case = int(g[:, col].sum())
            if min(n_case, g.shape[0] - n_case) < MIN_EVENT_LEVEL:
                keep[col] = False
        draw = posterior_draw(spec, g[:, keep], self.x[rows, j], self.rng)
        coef = np.zeros(g.shape[1])
        coef[keep] = draw.coef
        return ParameterDraw(draw.family, coef, draw.sigma)


def _check_sample(sample: ImputationSample, specs):
    if sample.fit_rows.shape[0] != sample.data.n:
        raise ValueError("fit_rows must have one flag per sample row")
    names = set(sample.data.x_names)
    for s in specs:
        if s.column not in names:
            raise ValueError(f"imputation spec for unknown column {s.column}")


def _copy_seeds(seed, M):
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF)
    return ss.spawn(M)


def mice_impute(sample: ImputationSample, specs, M: int, L: int, seed) -> ImputedDatasetSet:
    """Chained-equations imputation; ``M`` independent copies, ``L`` cycles each."""
    if L < 1 or M < 1:
        raise ValueError("M and L must be at least 1")
    specs = tuple(specs)
    _check_sample(sample, specs)
    children = _copy_seeds(seed, M)
    out = []
    for child in children:
        chain = _Chain(sample, specs, np.random.default_rng(child))
        active = chain.active_specs()
        if active:
            chain.initialise()
            for _ in range(L):
                for spec in active:
                    j = chain.colidx[spec.column]
                    draw = chain.draw_parameters(spec)
                    rows = chain.missing[:, j]
                    chain.x[rows, j] = draw.sample(chain.predictors(spec, rows), chain.rng)
        out.append(chain.x)
    return ImputedDatasetSet(sample.data, tuple(out), "mice", L, tuple(c.spawn_key for c in children),
                             metadata={"init": INIT_METHOD})


def smcfcs_impute(sample: ImputationSample, analysis_spec: CoxModelSpec, specs, weights, M: int, L: int,
                  seed, reject_limit: int = DEFAULT_REJECT_LIMIT) -> ImputedDatasetSet:
    """Substantive-model-compatible imputation with rejection sampling.

    ``weights`` are the fixed analysis weights of the sample rows (calibrated
    weights for an influence-based supersample); they enter the weighted Cox
    refit and the Breslow baseline hazard used in the acceptance step.
    """
    if L < 1 or M < 1:
        raise ValueError("M and L must be at least 1")
    if reject_limit < 1:
        raise ValueError("reject_limit must be at least 1")
    specs = tuple(specs)
    _check_sample(sample, specs)
    analysis_spec.check(sample.data)
    w = np.asarray(getattr(weights, "weights", weights), dtype=float)
    if w.shape != (sample.data.n,) or np.any(w <= 0):
        raise ValueError("weights must be positive, one per sample row")
    data = sample.data
    time, event = data.time, data.event
    children = _copy_seeds(seed, M)
    out, stats, flags = [], [], []
    for child in children:
        chain = _Chain(sample, specs, np.random.default_rng(child))
        active = chain.active_specs()
        st = {"proposals": 0, "accepted": 0, "limit_hits": 0, "cox_failures": 0}
        copy_flags = []
        beta = None
        if active:
            chain.initialise()
            for _ in range(L):
                for spec in active:
                    j = chain.colidx[spec.column]
                    draw = chain.draw_parameters(spec)
                    design = analysis_spec.design_from_arrays(data.z, chain.x, data.z_names, data.x_names)
                    beta = _refit(time, event, design, w, beta, analysis_spec, st)
                    if beta is None:
                        copy_flags.append("cox_failure")
                        continue
                    rows = np.flatnonzero(chain.missing[:, j])
                    cumhaz = _breslow_at(time, event, design @ beta, w, time[rows])
                    _rejection_step(chain, spec, j, rows, draw, beta, cumhaz, event[rows],
                                    analysis_spec, reject_limit, st)
        st["mean_attempts"] = st["proposals"] / st["accepted"] if st["accepted"] else float("nan")
        out.append(chain.x)
        stats.append(st)
        flags.append(tuple(sorted(set(copy_flags))))
    if any(s["limit_hits"] for s in stats):
        log.warning("smcfcs: %d draws hit the rejection limit %d",
                    sum(s["limit_hits"] for s in stats), reject_limit)
    return ImputedDatasetSet(data, tuple(out), "smcfcs", L, tuple(c.spawn_key for c in children),
                             tuple(stats), tuple(flags),
                             metadata={"init": INIT_METHOD, "accept_rule": ACCEPT_RULE,
                                       "reject_limit": reject_limit})


def _refit(time, event, design, w, beta, spec, st):
    try:
        return fit_cox_arrays(time, event, design, w, init=beta, terms=spec.terms).beta
    except (CoxFitError, ValueError):
        st["cox_failures"] += 1
        if beta is None:
            return None
    try:
        return fit_cox_arrays(time, event, design, w, init=None, terms=spec.terms).beta
    except (CoxFitError, ValueError):
        return None


def _breslow_at(time, event, lp, w, at):
    """Weighted Breslow cumulative baseline hazard evaluated at times ``at``."""
    shift = lp.max()
    r = w * np.exp(lp - shift)
    ev_times, dcount = np.unique(time[event == 1], return_counts=True)
    if ev_times.size == 0:
        return np.zeros(np.shape(at))
    revcum = np.cumsum(r[::-1])[::-1]
    denom = revcum[np.searchsorted(time, ev_times, side="left")]
    cum = np.cumsum(dcount / denom) * np.exp(-shift)
    k = np.searchsorted(ev_times, at, side="right") - 1
    return np.where(k >= 0, cum[np.maximum(k, 0)], 0.0)


def _rejection_step(chain: _Chain, spec, j, rows, draw, beta, cumhaz, event_rows, analysis_spec,
                    reject_limit, st):
    data = chain.data
    pending = np.arange(rows.size)
    attempts = 0
    while pending.size and attempts < reject_limit:
        attempts += 1
        r = rows[pending]
        proposal = draw.sample(chain.predictors(spec, r), chain.rng)
        chain.x[r, j] = proposal
        lp = analysis_spec.design_from_arrays(data.z[r], chain.x[r], data.z_names, data.x_names) @ beta
        h = cumhaz[pending] * np.exp(lp)
        ratio = np.where(event_rows[pending] == 1, h * np.exp(1.0 - h), np.exp(-h))
        if np.any(ratio > 1.0 + 1e-12) or np.any(ratio < 0):
            raise ImputationError("acceptance probability outside [0, 1]")
        st["proposals"] += pending.size
        accept = chain.rng.random(pending.size) <= ratio
        st["accepted"] += int(accept.sum())
        pending = pending[~accept]
    # last proposal kept for units that never accepted
    st["limit_hits"] += int(pending.size)


def single_pass_impute(sample: ImputationSample, specs, seed, M: int, engine: str = "mice",
                       analysis_spec: CoxModelSpec | None = None, weights=None,
                       reject_limit: int = DEFAULT_REJECT_LIMIT) -> ImputedDatasetSet:
    """One-cycle imputation, valid when exactly one expensive column is missing."""
    specs = tuple(specs)
    missing_cols = [s.column for s in specs
                    if np.isnan(sample.data.column(s.column)).any()]
    if len(missing_cols) != 1:
        raise ImputationError(f"single-pass imputation needs exactly one incomplete column, got {missing_cols}")
    if engine == "mice":
        return mice_impute(sample, specs, M, 1, seed)
    if analysis_spec is None or weights is None:
        raise ValueError("smcfcs single pass needs analysis_spec and weights")
    return smcfcs_impute(sample, analysis_spec, specs, weights, M, 1, seed, reject_limit)
