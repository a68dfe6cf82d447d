"""Raking (exponential-tilting) calibration of design weights."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .design import Role, SampleAssignment

__all__ = [
    "CalibrationError",
    "CalibrationProblem",
    "CalibratedWeights",
    "rake",
    "build_iss_constraints",
    "calibrate_iss",
    "closed_form_weights",
    "analysis_weights",
]

log = logging.getLogger(__name__)

RAKE_METHOD = "Newton on Lagrange multipliers, Gram matrix A' diag(w) A, step halving"


class CalibrationError(ArithmeticError):
    def __init__(self, message, residuals=None, attainable=None):
        super().__init__(message)
        self.residuals = residuals
        self.attainable = attainable


@dataclass(frozen=True, eq=False)
class CalibrationProblem:
    initial_weights: np.ndarray
    constraints: np.ndarray  # rows = sampled units, columns = constraints
    totals: np.ndarray
    labels: tuple[str, ...] = ()
    unit_index: np.ndarray | None = None  # cohort row of each sampled unit

    def __post_init__(self):
        w0 = np.asarray(self.initial_weights, dtype=float)
        a = np.asarray(self.constraints, dtype=float).reshape(w0.size, -1)
        t = np.asarray(self.totals, dtype=float).reshape(-1)
        if a.shape[1] != t.size:
            raise ValueError("one target total per constraint column required")
        if np.any(~(w0 > 0)):
            raise ValueError("initial weights must be strictly positive")
        if np.any(np.all(a == 0, axis=0)):
            raise ValueError("constraint column is identically zero")
        object.__setattr__(self, "initial_weights", w0)
        object.__setattr__(self, "constraints", a)
        object.__setattr__(self, "totals", t)


@dataclass(frozen=True, eq=False)
class CalibratedWeights:
    weights: np.ndarray
    multipliers: np.ndarray
    residuals: np.ndarray
    iterations: int
    converged: bool = True
    dropped: tuple[int, ...] = ()
    initial_weights: np.ndarray | None = field(default=None, repr=False)
    unit_index: np.ndarray | None = field(default=None, repr=False)

    @property
    def max_residual(self) -> float:
        return float(np.max(np.abs(self.residuals), initial=0.0))


def _attainable_range(a: np.ndarray) -> list[tuple[float, float]]:
    out = []
    for col in a.T:
        lo = -np.inf if np.any(col < 0) else 0.0
        hi = np.inf if np.any(col > 0) else 0.0
        out.append((lo, hi))
    return out


def _independent_columns(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Indices of a maximal linearly independent set of columns (pivoted QR)."""
    scaled = a * np.sqrt(w)[:, None]
    _, r, piv = linalg.qr(scaled, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0:
        return np.arange(0)
    rank = int(np.sum(diag > 1e-10 * diag[0]))
    return np.sort(piv[:rank])


def rake(problem: CalibrationProblem, tol: float = 1e-8, max_iter: int = 100) -> CalibratedWeights:
    """Solve ``min sum w log(w / w0) + w0 - w`` s.t. ``A' w = totals``.

    The solution is ``w = w0 exp(A lambda)``. Dependent constraint columns are
    pruned with a warning; convergence means every residual is at most ``tol``
    relative to its own total (totals below 1e-6 of the largest are held to
    that floor instead, so zero totals remain attainable under rounding).
    """
    w0, a, totals = problem.initial_weights, problem.constraints, problem.totals
    keep = _independent_columns(a, w0)
    dropped = tuple(int(j) for j in range(a.shape[1]) if j not in set(keep.tolist()))
    if dropped:
        log.warning("raking: dropping linearly dependent constraint columns %s", list(dropped))
    ak, tk = a[:, keep], totals[keep]
    lam = np.zeros(keep.size)
    scale = max(np.max(np.abs(totals), initial=0.0), 1.0)
    threshold = tol * np.maximum(np.abs(tk), 1e-6 * scale)

    def state(lam):
        w = w0 * np.exp(np.clip(ak @ lam, -700, 700))
        return w, ak.T @ w - tk

    w, resid = state(lam)
    it = 0
    converged = bool(np.all(np.abs(resid) <= threshold))
    while not converged and it < max_iter:
        it += 1
        gram = (ak * w[:, None]).T @ ak
        try:
            step = linalg.solve(gram, -resid, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = linalg.lstsq(gram, -resid)[0]
        norm0 = np.linalg.norm(resid)
        for _ in range(30):
            w_new, r_new = state(lam + step)
            if np.all(np.isfinite(r_new)) and np.linalg.norm(r_new) < norm0:
                break
            step = step / 2
        lam = lam + step
        w, resid = w_new, r_new
        converged = bool(np.all(np.abs(resid) <= threshold))
    full_lam = np.zeros(a.shape[1])
    full_lam[keep] = lam
    full_resid = a.T @ w - totals
    if not converged:
        raise CalibrationError(
            f"raking did not converge in {max_iter} iterations; residuals {full_resid.tolist()}",
            residuals=full_resid, attainable=_attainable_range(a))
    return CalibratedWeights(w, full_lam, full_resid, it, True, dropped, w0, problem.unit_index)


def build_iss_constraints(assignment: SampleAssignment, psi_norms) -> CalibrationProblem:
    """Three-group calibration system for an influence-based supersample.

    Targets split ``N - D`` between subcohort non-cases and the supersample in
    proportion to their summed influence norms (``db0``, ``db1``); cases keep
    total ``D``. Initial weights are 1 for cases, ``N_h / n_sc,h`` for subcohort
    non-cases and ``1 / pi*`` for supersample units. Rows follow
    ``assignment.sample_index``.
    """
    norms = np.asarray(psi_norms, dtype=float)
    sz = assignment.sizes
    N, D = sz["N"], sz["D"]
    idx = assignment.sample_index
    role = assignment.role[idx]
    sc = role == Role.SUBCOHORT_NONCASE
    ss = role == Role.SUPERSAMPLE
    cs = role == Role.CASE
    db0 = float(norms[idx][sc].sum())
    db1 = float(norms[idx][ss].sum())
    if db0 + db1 <= 0:
        raise CalibrationError("influence norms sum to zero over the sampled non-cases")
    w0 = np.ones(idx.size)
    w0[sc] = 1.0 / _subcohort_fraction(assignment)[idx][sc]
    pi = assignment.inclusion_prob[idx][ss]
    if np.any(~(pi > 0)):
        raise CalibrationError("supersample units need positive inclusion probabilities")
    w0[ss] = 1.0 / pi
    a = np.column_stack([sc, ss, cs]).astype(float)
    totals = np.array([(N - D) * db0 / (db0 + db1), (N - D) * db1 / (db0 + db1), D])
    return CalibrationProblem(w0, a, totals, ("subcohort_noncases", "supersample", "cases"), idx)


def _subcohort_fraction(assignment: SampleAssignment) -> np.ndarray:
    """Subcohort sampling fraction n_sc / N (within stratum when stratified) for every unit."""
    N = assignment.role.size
    if assignment.strata is None:
        return np.full(N, assignment.subcohort.sum() / N)
    frac = np.empty(N)
    for h in np.unique(assignment.strata):
        s = assignment.strata == h
        frac[s] = assignment.subcohort[s].sum() / s.sum()
    return frac


def calibrate_iss(assignment: SampleAssignment, psi_norms, tol: float = 1e-8) -> CalibratedWeights:
    """Rake the ISS system; case weights are fixed at 1 and only non-cases are solved."""
    prob = build_iss_constraints(assignment, psi_norms)
    nc = prob.constraints[:, 2] == 0
    sub = CalibrationProblem(prob.initial_weights[nc], prob.constraints[nc][:, :2], prob.totals[:2])
    res = rake(sub, tol=tol)
    w = np.ones(prob.initial_weights.size)
    w[nc] = res.weights
    resid = prob.constraints.T @ w - prob.totals
    lam = np.append(res.multipliers, 0.0)
    return CalibratedWeights(w, lam, resid, res.iterations, True, res.dropped,
                             prob.initial_weights, prob.unit_index)


def closed_form_weights(assignment: SampleAssignment, variant: str = "supersampled") -> np.ndarray:
    """Closed-form analysis weights on ``assignment.sample_index`` rows.

    ``cc``: (N - D) / m; ``supersampled``: (N - D) / (m + n1);
    ``stratified``: (N_h - D_h) / (m_h + n_1h). Cases always get 1.
    """
    idx = assignment.sample_index
    role = assignment.role[idx]
    noncase = role != Role.CASE
    w = np.ones(idx.size)
    sz = assignment.sizes
    if variant == "cc":
        if np.any(role == Role.SUPERSAMPLE):
            raise ValueError("cc weights requested for an assignment with a supersample")
        if sz["m"] == 0:
            raise ZeroDivisionError("no non-cases in the subcohort")
        w[noncase] = (sz["N"] - sz["D"]) / sz["m"]
    elif variant == "supersampled":
        denom = sz["m"] + sz["n1"]
        if denom == 0:
            raise ZeroDivisionError("no sampled non-cases")
        w[noncase] = (sz["N"] - sz["D"]) / denom
    elif variant == "stratified":
        if assignment.strata is None:
            raise ValueError("stratified weights need stratum labels")
        strata = assignment.strata
        for h, s in assignment.stratum_sizes().items():
            denom = s["m"] + s["n1"]
            rows = noncase & (strata[idx] == h)
            if not rows.any():
                continue
            if denom == 0:
                raise ZeroDivisionError(f"stratum {h!r}: no sampled non-cases")
            w[rows] = (s["N"] - s["D"]) / denom
    else:
        raise ValueError(f"unknown weight variant {variant!r}")
    return w


def analysis_weights(assignment: SampleAssignment, psi_norms=None) -> tuple[np.ndarray, CalibratedWeights | None]:
    """Weights for the analysis sample: calibrated for ISS, closed form otherwise."""
    if assignment.design == "iss":
        cal = calibrate_iss(assignment, psi_norms)
        return cal.weights, cal
    if assignment.strata is not None:
        return closed_form_weights(assignment, "stratified"), None
    variant = "cc" if assignment.design == "cc" else "supersampled"
    return closed_form_weights(assignment, variant), None
