"""Monte Carlo harness: synthetic cohorts, method pipelines and summary metrics.

The data-generating process has four low-cost covariates (z0, z1 continuous,
z2 binary, z3 three-level categorical), four continuous and two binary
expensive covariates, and a Weibull proportional-hazards event time with
staggered entry, administrative censoring at 15 years and exponential
competing censoring.
"""

from __future__ import annotations

import logging
import math
import time as _time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy import linalg, stats

from .design import SampleAssignment, draw_case_cohort, draw_stratified_case_cohort
from .pipeline import METHODS, STAGE_ERRORS, PipelineSettings, run_method
from .survival import CohortDataset, CovariateSchema, CovariateSpec

__all__ = [
    "METHODS",
    "METHOD_LABELS",
    "SimConfig",
    "ReplicateResult",
    "MetricsTable",
    "latent_correlation",
    "calibrate_beta0",
    "generate_cohort",
    "run_replicate",
    "run_study",
    "summarize",
    "format_table",
]

log = logging.getLogger(__name__)

METHOD_LABELS = {
    "full": "Full Cohort", "cc": "Case-cohort", "mice": "MICE", "mice_rss": "MICE RSS",
    "mice_iss": "MICE ISS", "smc": "SMC", "smc_rss": "SMC RSS", "smc_iss": "SMC ISS",
}

Z_COLUMNS = ("z0", "z1", "z2", "z3.2", "z3.3")
X_COLUMNS = ("xc1", "xc2", "xc3", "xc4", "xb1", "xb2")
ANALYSIS_Z = ("z1", "z2", "z3.2", "z3.3")
INTERACTION = "z1:xc1"
TRUE_BETA = (1.5, 0.5, 0.1, 0.2, 0.4, 0.1, 0.1, 0.1, 0.3, 0.5, 0.3)

CORR_Z0_Z1 = 0.05
CORR_Z0_Z2 = -0.05
CORR_Z1_Z2 = 0.01
# multinomial logit for z3, rows = levels 1..3, columns = (z0, z1)
Z3_COEF = np.array([[0.0, 0.0], [-0.5, -0.1], [-0.3, -0.2]])
# rows = xc1..xc4, columns = (z0, z1, u2, z3.2, z3.3)
XC_COEF = np.array([
    [0.2, 0.1, 0.1, 0.1, -0.1],
    [0.1, -0.15, 0.1, 0.1, 0.05],
    [0.05, -0.1, 0.15, -0.05, 0.1],
    [0.2, 0.01, -0.1, 0.12, -0.05],
])
XB_COEF = np.array([
    [0.15, 0.1, 0.07, 0.08, -0.03],
    [0.15, 0.15, 0.0, 0.15, -0.05],
])

SCHEMA = CovariateSchema(
    z=(CovariateSpec("z0"), CovariateSpec("z1"), CovariateSpec("z2", "binary"),
       CovariateSpec("z3", "categorical", ("1", "2", "3"))),
    x=tuple(CovariateSpec(n) for n in X_COLUMNS[:4]) + tuple(CovariateSpec(n, "binary") for n in X_COLUMNS[4:]),
)

BETA0_SAMPLE = 400_000
BETA0_SEED = 8675309


@dataclass(frozen=True)
class SimConfig:
    N: int = 5000
    n_sc: int = 100
    n1: int = 300
    M: int = 10
    L: int = 20
    alpha: float = 1.0
    beta0: float | None = None
    event_fraction: float = 0.01
    beta: tuple = TRUE_BETA
    interaction: bool = False
    stratified: bool = False
    strata_variable: str = "z2"
    n_sc_by_stratum: dict | None = None
    n1_by_stratum: dict | None = None
    replicates: int = 200
    methods: tuple = METHODS
    seed: int = 20240601
    reject_limit: int = 1000
    entry_max: float = 2.0
    admin_time: float = 15.0
    other_death_prob: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        object.__setattr__(self, "methods", tuple(self.methods))
        self.validate()

    @classmethod
    def paper_scale(cls, **overrides) -> "SimConfig":
        base = dict(N=25_000, n_sc=250, n1=750, replicates=1000)
        base.update(overrides)
        return cls(**base)

    def validate(self):
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if not 0 < self.n_sc <= self.N:
            raise ValueError(f"n_sc = {self.n_sc} must lie in (0, N = {self.N}]")
        if self.n1 < 0 or self.n_sc + self.n1 >= self.N:
            raise ValueError(f"n_sc + n1 = {self.n_sc + self.n1} leaves no cohort outside the sample")
        if self.M < 2 or self.L < 1:
            raise ValueError("need M >= 2 imputations and L >= 1 cycles")
        if len(self.beta) != len(TRUE_BETA):
            raise ValueError(f"beta must have {len(TRUE_BETA)} entries")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0 < self.event_fraction < 1:
            raise ValueError("event_fraction must lie in (0, 1)")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        if self.stratified and self.strata_variable not in Z_COLUMNS:
            raise ValueError(f"strata_variable must be one of {Z_COLUMNS}")

    @property
    def terms(self) -> tuple[str, ...]:
        return ANALYSIS_Z + X_COLUMNS + ((INTERACTION,) if self.interaction else ())

    @property
    def true_beta(self) -> np.ndarray:
        b = np.array(self.beta)
        return b if self.interaction else b[:-1]

    @property
    def lp_beta(self) -> np.ndarray:
        """Coefficients of the generating hazard (interaction zero when switched off)."""
        b = np.array(self.beta)
        if not self.interaction:
            b[-1] = 0.0
        return b

    def resolved_beta0(self) -> float:
        if self.beta0 is not None:
            return float(self.beta0)
        return calibrate_beta0(self.alpha, tuple(self.lp_beta), self.event_fraction, self.entry_max,
                               self.admin_time, self.other_death_prob)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["beta"] = list(self.beta)
        d["methods"] = list(self.methods)
        return d


def latent_correlation(point_biserial: float) -> float:
    """Latent normal correlation giving the target correlation with ``I(u > 0)``.

    For jointly normal (z, u) with unit variances, ``corr(z, I(u > 0)) = rho * sqrt(2 / pi)``.
    """
    return point_biserial / math.sqrt(2.0 / math.pi)


def _covariates(n: int, rng: np.random.Generator):
    r0, r1 = latent_correlation(CORR_Z0_Z2), latent_correlation(CORR_Z1_Z2)
    corr = np.array([[1.0, CORR_Z0_Z1, r0], [CORR_Z0_Z1, 1.0, r1], [r0, r1, 1.0]])
    zzu = rng.standard_normal((n, 3)) @ linalg.cholesky(corr, lower=False)
    z0, z1, u2 = zzu.T
    z2 = (u2 > 0).astype(float)
    eta = np.column_stack([z0, z1]) @ Z3_COEF.T
    prob = np.exp(eta - eta.max(axis=1, keepdims=True))
    prob /= prob.sum(axis=1, keepdims=True)
    z3 = 1 + (rng.random(n)[:, None] > np.cumsum(prob, axis=1)[:, :2]).sum(axis=1)
    z32, z33 = (z3 == 2).astype(float), (z3 == 3).astype(float)
    base = np.column_stack([z0, z1, u2, z32, z33])
    xc = base @ XC_COEF.T + rng.standard_normal((n, 4))
    xb = (rng.random((n, 2)) < 1.0 / (1.0 + np.exp(-(base @ XB_COEF.T)))).astype(float)
    z = np.column_stack([z0, z1, z2, z32, z33])
    x = np.column_stack([xc, xb])
    return z, x


def _linear_predictor(z, x, beta) -> np.ndarray:
    analysis = np.column_stack([z[:, 1:], x, z[:, 1] * x[:, 0]])
    return analysis @ np.asarray(beta)


def _times(n, rng, lp, beta0, alpha, entry_max, admin_time, other_death_prob):
    u = rng.random(n)
    t = (-np.log(u)) ** (1.0 / alpha) * np.exp(-(beta0 + lp) / alpha)
    t0 = rng.uniform(0.0, entry_max, n)
    c1 = admin_time - t0
    c2 = rng.exponential(admin_time / -math.log(1.0 - other_death_prob), n)
    c = np.minimum(c1, c2)
    return np.minimum(t, c), (t <= c).astype(np.int8)


@lru_cache(maxsize=32)
def calibrate_beta0(alpha: float, beta: tuple, event_fraction: float, entry_max: float = 2.0,
                    admin_time: float = 15.0, other_death_prob: float = 0.1) -> float:
    """Baseline log-hazard giving the target event fraction, by bisection with common random numbers."""
    rng = np.random.default_rng(BETA0_SEED)
    z, x = _covariates(BETA0_SAMPLE, rng)
    lp = _linear_predictor(z, x, beta)
    e = -np.log(rng.random(BETA0_SAMPLE)) ** (1.0 / alpha)
    t0 = rng.uniform(0.0, entry_max, BETA0_SAMPLE)
    c = np.minimum(admin_time - t0, rng.exponential(admin_time / -math.log(1.0 - other_death_prob), BETA0_SAMPLE))

    def frac(b0):
        return float(np.mean(e * np.exp(-(b0 + lp) / alpha) <= c))

    lo, hi = -30.0, 10.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if frac(mid) < event_fraction:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate_cohort(config: SimConfig, seed) -> CohortDataset:
    """Complete synthetic cohort (expensive covariates fully observed)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = config.N
    z, x = _covariates(n, rng)
    lp = _linear_predictor(z, x, config.lp_beta)
    t, d = _times(n, rng, lp, config.resolved_beta0(), config.alpha, config.entry_max,
                  config.admin_time, config.other_death_prob)
    strata = None
    if config.stratified:
        strata = np.array([f"{v:g}" for v in z[:, Z_COLUMNS.index(config.strata_variable)]])
    return CohortDataset.from_arrays(t, d, z, x, Z_COLUMNS, X_COLUMNS, ids=np.arange(1, n + 1),
                                     strata=strata, schema=SCHEMA)


@dataclass(frozen=True)
class ReplicateResult:
    replicate: int
    method: str
    terms: tuple[str, ...]
    estimate: np.ndarray
    se: np.ndarray
    seconds: float
    status: str = "ok"
    info: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def _allocate(total: int, sizes: dict) -> dict:
    """Largest-remainder proportional allocation of ``total`` across strata."""
    labels = sorted(sizes, key=str)
    n = np.array([sizes[h] for h in labels], dtype=float)
    raw = total * n / n.sum()
    out = np.floor(raw).astype(int)
    for j in np.argsort(-(raw - out), kind="stable")[: total - out.sum()]:
        out[j] += 1
    return {h: int(v) for h, v in zip(labels, out)}


def _seed_for(config: SimConfig, replicate: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(config.seed, spawn_key=(replicate, stream))


def _case_cohort(config: SimConfig, cohort: CohortDataset, seed) -> SampleAssignment:
    if not config.stratified:
        return draw_case_cohort(cohort, config.n_sc, seed)
    labels, counts = np.unique(cohort.strata, return_counts=True)
    alloc = config.n_sc_by_stratum or _allocate(config.n_sc, dict(zip(labels.tolist(), counts.tolist())))
    return draw_stratified_case_cohort(cohort, alloc, seed)


def _n1_request(config: SimConfig, cc: SampleAssignment, whole_pool: bool):
    pool = cc.pool
    if not config.stratified:
        return int(pool.sum()) if whole_pool else config.n1
    labels = sorted(np.unique(cc.strata).tolist(), key=str)
    sizes = {h: int((pool & (cc.strata == h)).sum()) for h in labels}
    if whole_pool:
        return sizes
    alloc = config.n1_by_stratum or _allocate(config.n1, sizes)
    return {h: min(int(alloc.get(h, alloc.get(str(h), 0))), sizes[h]) for h in labels}


def _settings(config: SimConfig, cc: SampleAssignment) -> PipelineSettings:
    return PipelineSettings(config.terms, ANALYSIS_Z, Z_COLUMNS, _n1_request(config, cc, False),
                            config.M, config.L, config.reject_limit)


def run_replicate(config: SimConfig, replicate: int, methods=None) -> list[ReplicateResult]:
    """Generate one cohort and run every requested method on it.

    Random streams are keyed by (master seed, replicate, stream) so a method's
    result does not depend on which other methods are run.
    """
    methods = config.methods if methods is None else tuple(methods)
    terms = config.terms
    cohort = generate_cohort(config, _seed_for(config, replicate, 0))
    out = []
    try:
        cc = _case_cohort(config, cohort, _seed_for(config, replicate, 1))
    except STAGE_ERRORS as exc:
        nan = np.full(len(terms), np.nan)
        return [ReplicateResult(replicate, m, terms, nan, nan, 0.0, f"failed: {exc}") for m in methods]
    psi_cache = {}
    for m in methods:
        t0 = _time.perf_counter()
        try:
            res = run_method(_settings(config, cc), m, cohort, cc,
                             _seed_for(config, replicate, 2 + METHODS.index(m)), psi_cache)
            est, se, info, status = res.beta, res.se, dict(res.info), "ok"
        except STAGE_ERRORS as exc:
            est = se = np.full(len(terms), np.nan)
            info, status = {}, f"failed: {type(exc).__name__}: {exc}"
            log.warning("replicate %d method %s failed: %s", replicate, m, exc)
        info["events"] = cohort.n_events
        out.append(ReplicateResult(replicate, m, terms, np.asarray(est, dtype=float), np.asarray(se, dtype=float),
                                   _time.perf_counter() - t0, status, info))
    return out


def _replicate_worker(args):
    config, rep, methods = args
    return run_replicate(config, rep, methods)


def run_study(config: SimConfig, threads: int = 1, methods=None, progress=None) -> list[ReplicateResult]:
    """All replicates, merged in replicate order regardless of the worker count."""
    methods = config.methods if methods is None else tuple(methods)
    jobs = [(config, r, methods) for r in range(config.replicates)]
    results: list[ReplicateResult] = []
    if threads <= 1:
        for i, job in enumerate(jobs):
            results.extend(_replicate_worker(job))
            if progress:
                progress(i + 1, len(jobs))
    else:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            for i, res in enumerate(ex.map(_replicate_worker, jobs, chunksize=1)):
                results.extend(res)
                if progress:
                    progress(i + 1, len(jobs))
    results.sort(key=lambda r: (r.replicate, METHODS.index(r.method)))
    return results


@dataclass(frozen=True, eq=False)
class MetricsTable:
    """Per-method, per-term metrics over the successful replicates."""

    methods: tuple[str, ...]
    terms: tuple[str, ...]
    bias: dict
    mc_se: dict
    est_se: dict
    coverage: dict
    rel_eff: dict
    n_ok: dict
    timing: dict

    def rows(self) -> list[dict]:
        out = []
        for m in self.methods:
            for j, t in enumerate(self.terms):
                out.append(dict(method=m, term=t, bias=self.bias[m][j], mc_se=self.mc_se[m][j],
                                est_se=self.est_se[m][j], coverage=self.coverage[m][j],
                                rel_eff=self.rel_eff[m][j] if m in self.rel_eff else float("nan"),
                                replicates=self.n_ok[m]))
        return out


def summarize(results, truth, level: float = 0.95) -> MetricsTable:
    """Absolute bias, Monte Carlo se, mean estimated se, Wald coverage and
    relative efficiency ``(mc_se_full / mc_se)^2`` per method and term."""
    truth = np.asarray(truth, dtype=float)
    by_method: dict[str, list[ReplicateResult]] = {}
    for r in results:
        by_method.setdefault(r.method, []).append(r)
    methods = tuple(m for m in METHODS if m in by_method) + tuple(m for m in by_method if m not in METHODS)
    terms = next(iter(by_method.values()))[0].terms
    z = stats.norm.ppf(0.5 + level / 2)
    bias, mc, es, cov, n_ok, timing = {}, {}, {}, {}, {}, {}
    for m in methods:
        rs = by_method[m]
        ok = [r for r in rs if r.ok and np.all(np.isfinite(r.estimate))]
        if len(ok) < 2:
            raise ValueError(f"method {m}: need at least 2 successful replicates, have {len(ok)}")
        est = np.array([r.estimate for r in ok])
        se = np.array([r.se for r in ok])
        bias[m] = np.abs(est.mean(axis=0) - truth)
        mc[m] = est.std(axis=0, ddof=1)
        es[m] = se.mean(axis=0)
        cov[m] = np.mean(np.abs(est - truth) <= z * se, axis=0)
        n_ok[m] = len(ok)
        secs = np.array([r.seconds for r in rs])
        timing[m] = dict(mean=float(secs.mean()), max=float(secs.max()), min=float(secs.min()))
    rel = {m: (mc["full"] / mc[m]) ** 2 for m in methods} if "full" in methods else {}
    return MetricsTable(methods, terms, bias, mc, es, cov, rel, n_ok, timing)


def _term_label(t: str) -> str:
    return t.replace(":", " x ")


def format_table(table: MetricsTable, title: str = "", digits: int = 3, timing: bool = True) -> str:
    """Plain-text table in the layout of the published simulation tables.

    ``timing=False`` omits the wall-time rows, which are not reproducible.
    """
    f = f"{{:.{digits}f}}"
    header = ["Statistics"] + [METHOD_LABELS.get(m, m) for m in table.methods]
    rows = []
    if timing:
        for key, name in (("mean", "avg.time"), ("max", "max time"), ("min", "min time")):
            rows.append([name] + [f.format(table.timing[m][key]) for m in table.methods])
        rows.append(None)
    for j, t in enumerate(table.terms):
        rows.append([f"bias {_term_label(t)}"] + [f.format(table.bias[m][j]) for m in table.methods])
    rows.append(None)
    for j, t in enumerate(table.terms):
        cells = []
        for m in table.methods:
            cell = f.format(table.mc_se[m][j])
            if m != "full" and m in table.rel_eff:
                cell += f"({100 * table.rel_eff[m][j]:.1f}%)"
            cells.append(cell)
        rows.append([f"mc.se {_term_label(t)}"] + cells)
    rows.append(None)
    for j, t in enumerate(table.terms):
        rows.append([f"est.se {_term_label(t)}"] +
                    [f"{f.format(table.est_se[m][j])}({table.coverage[m][j]:.3f})" for m in table.methods])
    widths = [max(len(header[c]), *(len(r[c]) for r in rows if r)) for c in range(len(header))]

    def line(cells):
        return "  ".join(c.ljust(widths[0]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(cells))

    rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
    out = [title] if title else []
    out += [rule, line(header), rule]
    out += [rule if r is None else line(r) for r in rows]
    out.append(rule)
    return "\n".join(out) + "\n"
