"""Phase-2 sampling: case-cohort subcohorts, random and influence-based supersamples."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np

from . import _cube
from .survival import CohortDataset

__all__ = [
    "Role",
    "SamplingError",
    "SampleAssignment",
    "BalancingMatrix",
    "CubeReport",
    "draw_case_cohort",
    "assignment_from_subcohort",
    "draw_stratified_case_cohort",
    "solve_inclusion_probabilities",
    "draw_rss",
    "draw_balanced",
    "draw_iss",
    "approx_design_variance",
    "as_rng",
]

CUBE_METHOD = "fast-cube flight; landing by dropping balancing columns last-first (psi_q ... psi_1, pi last)"


class Role(IntEnum):
    UNSAMPLED = 0
    CASE = 1
    SUBCOHORT_NONCASE = 2
    SUPERSAMPLE = 3


class SamplingError(ValueError):
    pass


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    return np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)


@dataclass(frozen=True, eq=False)
class SampleAssignment:
    """Phase-2 roles for every cohort unit (aligned with the dataset's row order).

    ``inclusion_prob`` is 1 for cases, the subcohort sampling fraction for
    subcohort non-cases and the supersample inclusion probability for pool units
    (NaN when no supersample has been drawn).
    """

    role: np.ndarray
    subcohort: np.ndarray
    inclusion_prob: np.ndarray
    design: str = "cc"
    strata: np.ndarray | None = None
    n_sc_by_stratum: dict | None = None
    n1_by_stratum: dict | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def cases(self) -> np.ndarray:
        return self.role == Role.CASE

    @property
    def pool(self) -> np.ndarray:
        """Cohort outside the case-cohort sample."""
        return (self.role == Role.UNSAMPLED) | (self.role == Role.SUPERSAMPLE)

    @property
    def supersample(self) -> np.ndarray:
        return self.role == Role.SUPERSAMPLE

    @property
    def sampled_noncases(self) -> np.ndarray:
        return (self.role == Role.SUBCOHORT_NONCASE) | (self.role == Role.SUPERSAMPLE)

    @property
    def case_cohort(self) -> np.ndarray:
        return (self.role == Role.CASE) | (self.role == Role.SUBCOHORT_NONCASE)

    @property
    def analysis(self) -> np.ndarray:
        """Super case-cohort sample (case-cohort sample when no supersample)."""
        return self.role != Role.UNSAMPLED

    @property
    def sample_index(self) -> np.ndarray:
        return np.flatnonzero(self.analysis)

    @property
    def sizes(self) -> dict:
        N = int(self.role.size)
        D = int(self.cases.sum())
        n_sc = int(self.subcohort.sum())
        d = int((self.subcohort & self.cases).sum())
        m = n_sc - d
        n1 = int(self.supersample.sum())
        n0 = n_sc + D - d
        return dict(N=N, D=D, n_sc=n_sc, d=d, m=m, n1=n1, n0=n0, n=n0 + n1)

    def stratum_sizes(self) -> dict:
        if self.strata is None:
            return {}
        out = {}
        for h in np.unique(self.strata):
            s = self.strata == h
            out[h] = dict(
                N=int(s.sum()), D=int((s & self.cases).sum()),
                n_sc=int((s & self.subcohort).sum()),
                m=int((s & (self.role == Role.SUBCOHORT_NONCASE)).sum()),
                n1=int((s & self.supersample).sum()),
            )
        return out

    def role_names(self) -> list[str]:
        return [Role(r).name.lower() for r in self.role]


@dataclass(frozen=True, eq=False)
class BalancingMatrix:
    """Rows ``B_i = (pi_i, psi_i1, ..., psi_iq)`` for the pool units."""

    values: np.ndarray

    @classmethod
    def from_influence(cls, pi, psi) -> "BalancingMatrix":
        pi = np.asarray(pi, dtype=float)
        psi = np.asarray(psi, dtype=float).reshape(pi.size, -1)
        return cls(np.column_stack([pi, psi]))

    @property
    def k(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class CubeReport:
    flight_residual: np.ndarray  # relative HT residual per balancing column after the full flight
    landing_units: int           # fractional units left for the landing phase
    dropped: tuple[int, ...]     # balancing columns dropped during landing, in order
    method: str = CUBE_METHOD


def _check_strata(dataset: CohortDataset):
    if dataset.strata is None:
        raise SamplingError("dataset has no stratum labels")
    return dataset.strata


def draw_case_cohort(dataset: CohortDataset, n_sc: int, seed) -> SampleAssignment:
    """Simple random subcohort of size ``n_sc`` plus every case."""
    N = dataset.n
    if n_sc > N or n_sc < 0:
        raise SamplingError(f"subcohort size {n_sc} exceeds cohort size {N}")
    rng = as_rng(seed)
    sub = np.zeros(N, dtype=bool)
    sub[rng.choice(N, size=n_sc, replace=False)] = True
    return _case_cohort_assignment(dataset, sub, np.full(N, n_sc / N), None, None)


def draw_stratified_case_cohort(dataset: CohortDataset, per_stratum_n_sc: dict, seed) -> SampleAssignment:
    """Independent simple random subcohorts within each stratum, plus every case."""
    strata = _check_strata(dataset)
    rng = as_rng(seed)
    N = dataset.n
    sub = np.zeros(N, dtype=bool)
    frac = np.zeros(N)
    labels = sorted(np.unique(strata).tolist(), key=str)
    unknown = set(map(str, per_stratum_n_sc)) - set(map(str, labels))
    if unknown:
        raise SamplingError(f"allocations given for unknown strata {sorted(unknown)}")
    alloc = {str(k): int(v) for k, v in per_stratum_n_sc.items()}
    for h in labels:
        idx = np.flatnonzero(strata == h)
        n_h = alloc.get(str(h), 0)
        if n_h > idx.size:
            raise SamplingError(f"stratum {h!r}: allocation {n_h} exceeds stratum size {idx.size}")
        sub[rng.choice(idx, size=n_h, replace=False)] = True
        frac[idx] = n_h / idx.size
    return _case_cohort_assignment(dataset, sub, frac, strata, {h: alloc.get(str(h), 0) for h in labels})


def assignment_from_subcohort(dataset: CohortDataset, subcohort) -> SampleAssignment:
    """Case-cohort assignment for a subcohort that was drawn outside this package.

    The subcohort is taken to be a simple random sample (within strata when the
    dataset carries stratum labels).
    """
    sub = np.asarray(subcohort, dtype=bool)
    if sub.shape != (dataset.n,):
        raise SamplingError("subcohort flags must have one entry per cohort unit")
    if dataset.strata is None:
        return _case_cohort_assignment(dataset, sub, np.full(dataset.n, sub.sum() / dataset.n), None, None)
    frac = np.zeros(dataset.n)
    alloc = {}
    for h in sorted(np.unique(dataset.strata).tolist(), key=str):
        s = dataset.strata == h
        frac[s] = sub[s].sum() / s.sum()
        alloc[h] = int(sub[s].sum())
    return _case_cohort_assignment(dataset, sub, frac, dataset.strata, alloc)


def _case_cohort_assignment(dataset, sub, frac, strata, n_sc_by_stratum) -> SampleAssignment:
    event = dataset.event.astype(bool)
    role = np.full(dataset.n, Role.UNSAMPLED, dtype=np.int8)
    role[sub & ~event] = Role.SUBCOHORT_NONCASE
    role[event] = Role.CASE
    prob = np.full(dataset.n, np.nan)
    prob[event] = 1.0
    prob[role == Role.SUBCOHORT_NONCASE] = frac[role == Role.SUBCOHORT_NONCASE]
    return SampleAssignment(role, sub, prob, "cc",
                            None if strata is None else np.asarray(strata), n_sc_by_stratum)


def solve_inclusion_probabilities(sizes, n1: int | float) -> np.ndarray:
    """Optimal PPS probabilities ``pi_i = min(lambda * size_i, 1)`` with ``sum(pi) = n1``.

    Minimises ``sum (1 - pi_i) size_i^2 / pi_i``. Zero sizes are floored at
    ``1e-8 * max(size)`` (but below the smallest positive size, so the floor
    never outranks a unit with nonzero influence) and every unit keeps a finite
    design weight.
    Capping is resolved exactly: with units sorted by size, the largest ``c``
    are set to one and ``lambda = (n1 - c) / sum(rest)`` for the smallest
    consistent ``c``.
    """
    s = np.asarray(sizes, dtype=float)
    if np.any(~np.isfinite(s)) or np.any(s < 0):
        raise SamplingError("sizes must be finite and nonnegative")
    n_pool = s.size
    if n1 > n_pool:
        raise SamplingError(f"n1 = {n1} exceeds pool size {n_pool}")
    if n1 <= 0:
        return np.zeros(n_pool)
    smax = s.max(initial=0.0)
    if smax == 0:
        raise SamplingError(f"fewer than n1 = {n1} units with positive size")
    r = s / smax
    r[r < 1e-300] = 0.0  # subnormal relative sizes are zero for all purposes
    floor = min(1e-8, 0.5 * r[r > 0].min())
    adj = np.where(r > 0, r, floor)
    order = np.argsort(-adj, kind="stable")
    srt = adj[order]
    tail = np.cumsum(srt[::-1])[::-1]  # tail[c] = sum of srt[c:]
    pi = np.empty(n_pool)
    for c in range(int(np.floor(n1)) + 1):
        if c == n_pool:
            lam = np.inf
            break
        lam = (n1 - c) / tail[c]
        if lam * srt[c] <= 1.0 and (c == 0 or lam * srt[c - 1] >= 1.0 - 1e-12):
            break
    else:  # pragma: no cover - a consistent cap count always exists
        raise SamplingError("failed to resolve capped inclusion probabilities")
    pi_sorted = np.minimum(lam * srt, 1.0)
    pi_sorted[:c] = 1.0
    pi[order] = pi_sorted
    return pi


def draw_rss(assignment: SampleAssignment, n1, seed) -> SampleAssignment:
    """Simple random supersample of ``n1`` pool units (per-stratum dict when stratified)."""
    rng = as_rng(seed)
    pool = np.flatnonzero(assignment.pool)
    role = assignment.role.copy()
    role[role == Role.SUPERSAMPLE] = Role.UNSAMPLED
    prob = assignment.inclusion_prob.copy()
    if isinstance(n1, dict):
        strata = assignment.strata
        if strata is None:
            raise SamplingError("per-stratum n1 requires a stratified assignment")
        for h, n_h in n1.items():
            idx = pool[strata[pool].astype(str) == str(h)]
            if n_h > idx.size:
                raise SamplingError(f"stratum {h!r}: n1 = {n_h} exceeds pool size {idx.size}")
            role[rng.choice(idx, size=int(n_h), replace=False)] = Role.SUPERSAMPLE
            prob[idx] = n_h / idx.size if idx.size else np.nan
        n1_by = {h: int(v) for h, v in n1.items()}
    else:
        if n1 > pool.size:
            raise SamplingError(f"n1 = {n1} exceeds pool size {pool.size}")
        role[rng.choice(pool, size=int(n1), replace=False)] = Role.SUPERSAMPLE
        prob[pool] = n1 / pool.size
        n1_by = None
    return replace(assignment, role=role, inclusion_prob=prob, design="rss", n1_by_stratum=n1_by)


def draw_balanced(pi_star, balancing: BalancingMatrix, seed) -> tuple[np.ndarray, CubeReport]:
    """Cube-method draw balanced on ``balancing`` with inclusion probabilities ``pi_star``.

    Returns the 0/1 selection vector and a report. The flight phase keeps the
    Horvitz-Thompson totals of every balancing column fixed; the landing phase
    drops columns from the last to the first (the inclusion-probability column
    last), so a pool whose probabilities sum to an integer yields a sample of
    exactly that size.
    """
    rng = as_rng(seed)
    pi0 = np.asarray(pi_star, dtype=float)
    bmat = np.asarray(balancing.values, dtype=float)
    if bmat.shape[0] != pi0.size:
        raise SamplingError("balancing matrix rows do not match inclusion probabilities")
    if np.any(pi0 < 0) or np.any(pi0 > 1):
        raise SamplingError("inclusion probabilities must lie in [0, 1]")
    k = bmat.shape[1]
    n = pi0.size
    pi = np.where(pi0 <= _cube.EPS, 0.0, np.where(pi0 >= 1 - _cube.EPS, 1.0, pi0))
    amat = np.zeros_like(bmat)
    pos = pi0 > 0
    amat[pos] = bmat[pos] / pi0[pos, None]
    amat = np.ascontiguousarray(amat)
    order = rng.permutation(n).astype(np.int64)
    uniforms = rng.random(2 * n + 2 * k + 8)
    target = bmat.sum(axis=0)
    ui = _cube.flight(pi, amat, order, k, uniforms, 0)
    scale = np.maximum(np.abs(bmat).sum(axis=0), np.finfo(float).tiny)
    flight_resid = np.abs(amat.T @ pi - target) / scale
    landing = int(np.count_nonzero((pi > 0) & (pi < 1)))
    dropped = []
    for cols in range(k - 1, -1, -1):
        if not np.any((pi > 0) & (pi < 1)):
            break
        dropped.append(cols)
        ui = _cube.flight(pi, amat, order, cols, uniforms, ui)
    frac = (pi > 0) & (pi < 1)
    if np.any(frac):
        # only reachable when sum(pi_star) is not an integer
        pi[frac] = (rng.random(int(frac.sum())) < pi[frac]).astype(float)
    return (pi > 0.5).astype(np.int8), CubeReport(flight_resid, landing, tuple(dropped))


def draw_iss(assignment: SampleAssignment, psi, n1, seed) -> SampleAssignment:
    """Influence-based supersample: PPS probabilities from ``||psi_i||_2`` and a balanced draw.

    ``psi`` holds the submodel influence rows for every cohort unit. ``n1`` is a
    count, or a dict of per-stratum counts for stratified designs (probabilities
    and balancing are then solved within each stratum).
    """
    rng = as_rng(seed)
    psi = np.asarray(psi, dtype=float)
    pool = np.flatnonzero(assignment.pool)
    role = assignment.role.copy()
    role[role == Role.SUPERSAMPLE] = Role.UNSAMPLED
    prob = assignment.inclusion_prob.copy()
    reports = {}
    if isinstance(n1, dict):
        strata = assignment.strata
        if strata is None:
            raise SamplingError("per-stratum n1 requires a stratified assignment")
        groups = {h: pool[strata[pool].astype(str) == str(h)] for h in n1}
        alloc = {h: int(v) for h, v in n1.items()}
    else:
        groups = {None: pool}
        alloc = {None: int(n1)}
    for h, idx in groups.items():
        sizes = np.linalg.norm(psi[idx], axis=1)
        pi = solve_inclusion_probabilities(sizes, alloc[h])
        sel, report = draw_balanced(pi, BalancingMatrix.from_influence(pi, psi[idx]), rng)
        role[idx[sel == 1]] = Role.SUPERSAMPLE
        prob[idx] = pi
        reports[h] = report
        if int(sel.sum()) != alloc[h]:
            warnings.warn(f"balanced draw returned {int(sel.sum())} units, expected {alloc[h]}")
    meta = dict(assignment.metadata)
    meta["cube"] = reports
    return replace(assignment, role=role, inclusion_prob=prob, design="iss",
                   n1_by_stratum=None if None in alloc else alloc, metadata=meta)


def approx_design_variance(pi, psi, N: int | None = None) -> np.ndarray:
    """First (single-inclusion) term of the Horvitz-Thompson variance,
    ``N^-2 sum (1 - pi_i) / pi_i psi_i psi_i^T``; ``N`` defaults to ``len(pi)``."""
    pi = np.asarray(pi, dtype=float)
    psi = np.asarray(psi, dtype=float).reshape(pi.size, -1)
    if np.any(pi <= 0) or np.any(pi > 1):
        raise SamplingError("inclusion probabilities must lie in (0, 1]")
    N = pi.size if N is None else N
    c = (1 - pi) / pi
    out = (psi * c[:, None]).T @ psi / N**2
    return (out + out.T) / 2
