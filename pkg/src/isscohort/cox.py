"""Weighted Cox pseudo-likelihood fitting and per-unit influence functions (dfbeta).

The weighted pseudo-likelihood uses unweighted event terms and a weighted
risk-set denominator, ``prod_i {exp(lp_i) / sum_{j in R(t_i)} w_j exp(lp_j)}^{dN_i}``,
with Breslow handling of tied event times. All risk-set sums are computed with
cumulative scans over time-sorted data, so one evaluation costs O(N p^2).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .survival import CohortDataset

__all__ = [
    "CoxFitError",
    "ConvergenceError",
    "SingularInformationError",
    "MonotoneLikelihoodError",
    "CoxModelSpec",
    "CoxFit",
    "InfluenceMatrix",
    "risk_accumulators",
    "log_pseudo_likelihood",
    "fit_weighted_cox",
    "fit_cox_arrays",
    "dfbeta",
    "dfbeta_arrays",
]

SCORE_TOL = 1e-9
MAX_ITER = 50
MAX_HALVINGS = 10
DIVERGENCE_BOUND = 20.0


class CoxFitError(ArithmeticError):
    pass


class ConvergenceError(CoxFitError):
    pass


class SingularInformationError(CoxFitError):
    pass


class MonotoneLikelihoodError(CoxFitError):
    """A coefficient ran past the divergence bound (monotone likelihood)."""


@dataclass(frozen=True)
class CoxModelSpec:
    """Ordered model terms: covariate column names or pairwise interactions ``a:b``."""

    terms: tuple[str, ...]

    def __post_init__(self):
        terms = tuple(self.terms)
        object.__setattr__(self, "terms", terms)
        if len(set(terms)) != len(terms):
            raise ValueError(f"duplicate terms in model: {terms}")
        for t in terms:
            parts = t.split(":")
            if len(parts) > 2 or any(not p for p in parts):
                raise ValueError(f"malformed term {t!r}")

    @property
    def p(self) -> int:
        return len(self.terms)

    @property
    def covariates(self) -> tuple[str, ...]:
        seen = []
        for t in self.terms:
            for part in t.split(":"):
                if part not in seen:
                    seen.append(part)
        return tuple(seen)

    def check(self, dataset: CohortDataset) -> None:
        known = set(dataset.z_names) | set(dataset.x_names)
        missing = [c for c in self.covariates if c not in known]
        if missing:
            raise ValueError(f"model references undeclared covariates: {missing}")

    def design_matrix(self, dataset: CohortDataset) -> np.ndarray:
        return self.design_from_arrays(dataset.z, dataset.x, dataset.z_names, dataset.x_names)

    def design_from_arrays(self, z, x, z_names, x_names) -> np.ndarray:
        def col(name):
            if name in z_names:
                return z[:, z_names.index(name)]
            if name in x_names:
                return x[:, x_names.index(name)]
            raise KeyError(name)

        n = z.shape[0]
        out = np.empty((n, len(self.terms)))
        for j, t in enumerate(self.terms):
            parts = t.split(":")
            out[:, j] = col(parts[0]) if len(parts) == 1 else col(parts[0]) * col(parts[1])
        return out


@dataclass(frozen=True, eq=False)
class CoxFit:
    beta: np.ndarray
    information: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    score: np.ndarray
    terms: tuple[str, ...] = ()
    weights: np.ndarray | None = field(default=None, repr=False)
    ties: str = "breslow"

    @property
    def covariance(self) -> np.ndarray:
        """Inverse observed information (model-based, phase-1 variance)."""
        return _inverse_information(self.information)

    @property
    def model_se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))


@dataclass(frozen=True, eq=False)
class InfluenceMatrix:
    """One influence-function row per analysis unit, in the caller's row order."""

    rows: np.ndarray

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.rows, axis=1)

    def __len__(self) -> int:
        return self.rows.shape[0]


def _inverse_information(info: np.ndarray) -> np.ndarray:
    try:
        c = linalg.cho_factor(info, lower=True)
    except linalg.LinAlgError:
        raise SingularInformationError("information matrix is not positive definite") from None
    inv = linalg.cho_solve(c, np.eye(info.shape[0]))
    return (inv + inv.T) / 2


def risk_accumulators(time, covariates, beta, weights, at_time: float):
    """Weighted risk-set sums ``S0, S1, S2`` over units with ``time >= at_time``."""
    if at_time <= 0:
        raise ValueError("at_time must be positive")
    time = np.asarray(time, dtype=float)
    zmat = np.asarray(covariates, dtype=float).reshape(time.shape[0], -1)
    r = np.asarray(weights, dtype=float) * np.exp(zmat @ np.asarray(beta, dtype=float))
    at_risk = time >= at_time
    r, zr = r[at_risk], zmat[at_risk]
    s0 = float(r.sum())
    s1 = r @ zr
    s2 = (zr * r[:, None]).T @ zr
    return s0, s1, (s2 + s2.T) / 2


class _SortedProblem:
    """Time-sorted arrays plus the fixed risk-set bookkeeping (independent of beta)."""

    def __init__(self, time, event, covariates, weights):
        time = np.asarray(time, dtype=float)
        event = np.asarray(event).astype(bool)
        zmat = np.asarray(covariates, dtype=float).reshape(time.shape[0], -1)
        w = np.ones(time.shape[0]) if weights is None else np.asarray(weights, dtype=float)
        if np.any(~(w > 0)):
            raise ValueError("weights must be strictly positive on the analysis units")
        if not np.all(np.isfinite(zmat)):
            raise ValueError("design has missing or non-finite values")
        order = np.lexsort((~event, time))
        self.order = order
        self.time = time[order]
        self.event = event[order]
        self.z = zmat[order]
        self.w = w[order]
        self.ev_times, dcount = np.unique(self.time[self.event], return_counts=True)
        self.dcount = dcount.astype(float)
        # first sorted index at each distinct event time -> risk set start
        self.first = np.searchsorted(self.time, self.ev_times, side="left")
        # last event time <= own time, for each unit (-1 if none)
        self.k_of_unit = np.searchsorted(self.ev_times, self.time, side="right") - 1
        # event time index of each case
        self.case_idx = np.flatnonzero(self.event)
        self.k_of_case = self.k_of_unit[self.case_idx]
        self.z_events_sum = self.z[self.event].sum(axis=0)

    def evaluate(self, beta, want_info=True):
        eta = self.z @ beta
        shift = eta.max() if eta.size else 0.0
        r = self.w * np.exp(eta - shift)
        rev_r = np.cumsum(r[::-1])[::-1]
        rz = self.z * r[:, None]
        rev_rz = np.cumsum(rz[::-1], axis=0)[::-1]
        s0 = rev_r[self.first]
        s1 = rev_rz[self.first]
        zbar = s1 / s0[:, None]
        loglik = eta[self.event].sum() - np.sum(self.dcount * (np.log(s0) + shift))
        score = self.z_events_sum - self.dcount @ zbar
        if not want_info:
            return loglik, score, None, None
        haz = self.dcount / s0
        cumhaz = np.cumsum(haz)
        a_unit = np.where(self.k_of_unit >= 0, cumhaz[np.maximum(self.k_of_unit, 0)], 0.0)
        coef = r * a_unit
        info = (self.z * coef[:, None]).T @ self.z - (zbar * self.dcount[:, None]).T @ zbar
        info = (info + info.T) / 2
        aux = dict(r=r, haz=haz, cumhaz=cumhaz, zbar=zbar, a_unit=a_unit)
        return loglik, score, info, aux


def log_pseudo_likelihood(beta, time, event, covariates, weights=None) -> float:
    prob = _SortedProblem(time, event, covariates, weights)
    return float(prob.evaluate(np.asarray(beta, dtype=float), want_info=False)[0])


def fit_cox_arrays(time, event, covariates, weights=None, init=None, tol: float = SCORE_TOL,
                   max_iter: int = MAX_ITER, terms: tuple[str, ...] = ()) -> CoxFit:
    """Damped Newton-Raphson maximiser of the weighted log pseudo-likelihood."""
    prob = _SortedProblem(time, event, covariates, weights)
    p = prob.z.shape[1]
    if prob.ev_times.size == 0:
        raise CoxFitError("no events in the analysis sample")
    beta = np.zeros(p) if init is None else np.array(init, dtype=float)
    loglik, score, info, _ = prob.evaluate(beta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(score), initial=0.0) <= tol:
            converged = True
            it -= 1
            break
        try:
            step = linalg.solve(info, score, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            raise SingularInformationError(
                "information matrix is singular (collinear design?)") from None
        new_beta = beta + step
        new_ll, new_score, new_info, _ = prob.evaluate(new_beta)
        halvings = 0
        while (not np.isfinite(new_ll) or new_ll < loglik - 1e-12 * abs(loglik)) and halvings < MAX_HALVINGS:
            step = step / 2
            new_beta = beta + step
            new_ll, new_score, new_info, _ = prob.evaluate(new_beta)
            halvings += 1
        if np.any(np.abs(new_beta) > DIVERGENCE_BOUND):
            bad = [terms[j] if terms else j for j in np.flatnonzero(np.abs(new_beta) > DIVERGENCE_BOUND)]
            raise MonotoneLikelihoodError(f"coefficient(s) {bad} diverging beyond |beta| > {DIVERGENCE_BOUND}")
        stalled = np.max(np.abs(new_beta - beta), initial=0.0) <= 1e-13 * (1 + np.max(np.abs(beta), initial=0.0))
        beta, loglik, score, info = new_beta, new_ll, new_score, new_info
        if stalled and np.max(np.abs(score), initial=0.0) <= 1e3 * tol:
            # rounding floor: the score cannot be reduced further in floating point
            converged = True
            break
    else:
        converged = np.max(np.abs(score), initial=0.0) <= tol
    if not converged:
        raise ConvergenceError(
            f"no convergence after {max_iter} iterations (max |score| = {np.max(np.abs(score)):.3g})")
    # validates positive definiteness
    _inverse_information(info)
    w_orig = None if weights is None else np.asarray(weights, dtype=float)
    return CoxFit(beta, info, float(loglik), it, True, score, tuple(terms), w_orig)


def fit_weighted_cox(dataset: CohortDataset, spec: CoxModelSpec, weights=None, analysis_mask=None,
                     init=None, tol: float = SCORE_TOL, max_iter: int = MAX_ITER) -> CoxFit:
    """Fit the weighted Cox model on the masked-in units of ``dataset``.

    ``weights`` may be given for all units of ``dataset`` or only for the masked-in
    ones. The returned fit stores the weights of the analysis units.
    """
    spec.check(dataset)
    data = dataset if analysis_mask is None else dataset.subset(np.asarray(analysis_mask, dtype=bool))
    w = _analysis_weights(dataset, data, weights, analysis_mask)
    design = spec.design_matrix(data)
    if not np.all(np.isfinite(design)):
        raise ValueError("missing values in design columns of analysis units")
    return fit_cox_arrays(data.time, data.event, design, w, init=init, tol=tol,
                          max_iter=max_iter, terms=spec.terms)


def _analysis_weights(full: CohortDataset, data: CohortDataset, weights, mask):
    if weights is None:
        return np.ones(data.n)
    w = np.asarray(weights, dtype=float)
    if w.shape[0] == data.n:
        return w
    if mask is not None and w.shape[0] == full.n:
        return w[np.asarray(mask, dtype=bool)]
    raise ValueError(f"weights length {w.shape[0]} matches neither dataset ({full.n}) nor mask ({data.n})")


def dfbeta_arrays(beta, time, event, covariates, weights=None, information=None) -> np.ndarray:
    """Influence rows ``I^{-1} {delta_i (Z_i - Zbar(t_i)) - w_i e^{lp_i} sum_{t_j <= t_i} dN_j (Z_i - Zbar_j) / S0_j}``.

    Units that are censored drop the first term; a unit censored before the
    first event time has an empty inner sum and an exactly zero row.
    """
    prob = _SortedProblem(time, event, covariates, weights)
    beta = np.asarray(beta, dtype=float)
    _, _, info, aux = prob.evaluate(beta)
    if information is not None:
        info = np.asarray(information, dtype=float)
    cov = _inverse_information(info)
    n, p = prob.z.shape
    resid = np.zeros((n, p))
    if prob.ev_times.size:
        resid[prob.case_idx] = prob.z[prob.case_idx] - aux["zbar"][prob.k_of_case]
        b_cum = np.cumsum(aux["zbar"] * aux["haz"][:, None], axis=0)
        k = prob.k_of_unit
        has = k >= 0
        kk = np.maximum(k, 0)
        second = aux["r"][:, None] * (prob.z * aux["a_unit"][:, None] - b_cum[kk])
        resid[has] -= second[has]
    out = np.empty_like(resid)
    out[prob.order] = resid @ cov
    return out


def dfbeta(fit: CoxFit, dataset: CohortDataset, spec: CoxModelSpec | None = None, weights=None,
           analysis_mask=None) -> InfluenceMatrix:
    """Influence rows for the analysis units, evaluated at ``fit.beta`` with the fit's weights."""
    spec = spec if spec is not None else CoxModelSpec(fit.terms)
    data = dataset if analysis_mask is None else dataset.subset(np.asarray(analysis_mask, dtype=bool))
    if weights is None:
        weights = fit.weights
    w = _analysis_weights(dataset, data, weights, analysis_mask)
    rows = dfbeta_arrays(fit.beta, data.time, data.event, spec.design_matrix(data), w)
    return InfluenceMatrix(rows)
