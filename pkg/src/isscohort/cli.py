"""Command-line entry point: ``isscohort simulate | analyze | sample``.

Exit codes: 0 success, 1 validation error, 2 numerical failure, 3 I/O error.
Progress goes to standard error; results go to files in ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .calibration import CalibrationError, build_iss_constraints
from .config import ConfigError, ExperimentConfig, config_hash, load_config
from .cox import CoxFitError
from .design import SamplingError, assignment_from_subcohort, draw_case_cohort, draw_stratified_case_cohort
from .imputation import ACCEPT_RULE, INIT_METHOD, ImputationError
from .pipeline import METHODS, PipelineSettings, parse_method, run_method, submodel_influence, supersample
from .simulation import format_table, run_study, summarize
from .survival import CohortValidationError, read_cohort_csv
from .variance import CI_METHOD, VarianceError

log = logging.getLogger("isscohort")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3

DECISIONS = {
    "ties": "Breslow; events precede censorings at tied times",
    "cox_solver": "Newton-Raphson, step halving, score tol 1e-9, 50 iterations, |beta| > 20 divergence",
    "submodel": "unweighted full-cohort Cox fit on the low-cost analysis terms",
    "inclusion_probabilities": "pi = min(lambda ||psi||, 1), exact sort-based solve; zero norms floored at min(1e-8 * max, half the smallest positive norm)",
    "cube": "fast flight with a (k+1)-unit window in random order; landing drops balancing columns last to first",
    "raking": "exponential tilting by Newton on multipliers; case weights fixed at 1",
    "imputation_init": INIT_METHOD,
    "smcfcs_accept": ACCEPT_RULE,
    "mice_event_predictor": "event indicator dropped when fewer than 5 fitting rows at either level",
    "pooling": "Rubin's rules; " + CI_METHOD,
    "phase2_variance": "finite-population corrected influence sum over sampled non-cases",
}


class _Fail(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _seed(seed: int, *key) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=tuple(key))


def _num(x) -> str:
    x = float(x)
    return repr(x) if np.isfinite(x) else ("nan" if np.isnan(x) else ("inf" if x > 0 else "-inf"))


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path: Path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, ensure_ascii=False, default=_jsonable)
        fh.write("\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    return str(o)


def _metadata(command: str, cfg: ExperimentConfig, extra: dict) -> dict:
    meta = {
        "command": command,
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "config_source": cfg.source,
        "config": cfg.result_config(),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "decisions": DECISIONS,
    }
    meta.update(extra)
    return meta


def _progress(done, total):
    print(f"\rreplicate {done}/{total}", end="\n" if done == total else "", file=sys.stderr, flush=True)


def cmd_simulate(args) -> int:
    overrides = {"seed": args.seed, "threads": args.threads, "out": args.out,
                 "simulation.replicates": args.replicates}
    if args.method:
        overrides["simulation.methods"] = [m.strip() for m in args.method.split(",")]
    if args.paper_scale:
        overrides["simulation.paper_scale"] = True
    cfg = load_config(args.config).with_overrides(**overrides)
    try:
        sim = cfg.sim_config()
    except ValueError as exc:
        raise ConfigError("simulation", str(exc)) from None
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    print(f"simulating {sim.replicates} replicates, methods {','.join(sim.methods)}, N={sim.N}",
          file=sys.stderr)
    results = run_study(sim, threads=cfg.threads, progress=_progress)
    rows = []
    for r in results:
        for t, b, s in zip(r.terms, r.estimate, r.se):
            rows.append([r.replicate, r.method, t, _num(b), _num(s), r.status])
    _write_csv(out / "replicates.csv", ["replicate", "method", "term", "estimate", "se", "status"], rows)
    _write_csv(out / "timing.csv", ["replicate", "method", "seconds"],
               [[r.replicate, r.method, f"{r.seconds:.6f}"] for r in results])
    metrics_note = None
    try:
        table = summarize(results, sim.true_beta)
    except ValueError as exc:
        table, metrics_note = None, str(exc)
        print(f"metrics skipped: {exc}", file=sys.stderr)
    if table is not None:
        keys = ["method", "term", "bias", "mc_se", "est_se", "coverage", "rel_eff", "replicates"]
        _write_csv(out / "metrics.csv", keys,
                   [[row[k] if k in ("method", "term", "replicates") else _num(row[k]) for k in keys]
                    for row in table.rows()])
        title = "Simulation results: analysis model " + ("with" if sim.interaction else "without") + \
                " an interaction term"
        (out / "table.txt").write_text(format_table(table, title, timing=False), encoding="utf-8")
        (out / "timing_table.txt").write_text(format_table(table, title), encoding="utf-8")
    failures = sum(not r.ok for r in results)
    _write_json(out / "metadata.json", _metadata("simulate", cfg, {
        "simulation": sim.to_dict(),
        "beta0_resolved": sim.resolved_beta0(),
        "true_beta": dict(zip(sim.terms, sim.true_beta.tolist())),
        "failed_runs": failures,
        "metrics_note": metrics_note,
        "nondeterministic_files": ["timing.csv", "timing_table.txt"],
    }))
    print(f"wrote results to {out} ({failures} failed method runs)", file=sys.stderr)
    return EXIT_OK


def _load_cohort(cfg: ExperimentConfig, cohort_path):
    a = cfg.analysis
    path = cohort_path or a["cohort"]
    if not path:
        raise ConfigError("analysis.cohort", "no cohort CSV given")
    schema = cfg.schema()
    extra = [a["subcohort_column"]] if a["subcohort_column"] else []
    ds, extras = read_cohort_csv(path, schema, a["strata_column"], extra)
    sub = None
    if a["subcohort_column"]:
        col = extras[a["subcohort_column"]]
        flags = []
        for i, key in enumerate(ds.ids):
            v = col.get(key)
            if v is None or str(v).strip() not in ("0", "1"):
                raise CohortValidationError(f"subcohort column {a['subcohort_column']!r} must be 0/1, got {v!r}")
            flags.append(str(v).strip() == "1")
        sub = np.array(flags)
    return ds, sub


def _case_cohort(cfg, ds, sub, seed):
    a = cfg.analysis
    if sub is not None:
        return assignment_from_subcohort(ds, sub)
    n_sc = a["n_sc"]
    if n_sc is None:
        raise ConfigError("analysis.n_sc", "needed to draw a subcohort (or set analysis.subcohort_column)")
    if isinstance(n_sc, dict):
        return draw_stratified_case_cohort(ds, n_sc, seed)
    return draw_case_cohort(ds, n_sc, seed)


def _check_observed(ds, rows, what):
    miss = np.isnan(ds.x[rows]).any(axis=1)
    if miss.any():
        i = int(np.flatnonzero(rows)[np.flatnonzero(miss)[0]]) if rows.dtype == bool else int(rows[np.flatnonzero(miss)[0]])
        raise CohortValidationError(f"expensive covariate missing for {what} (id {ds.ids[i]})", i)


def _settings(cfg, ds) -> PipelineSettings:
    a = cfg.analysis
    terms = tuple(a["terms"] or (ds.z_names + ds.x_names))
    z_terms = tuple(t for t in terms if ":" not in t and t in ds.z_names)
    sub_terms = tuple(a["submodel_terms"] or z_terms)
    preds = tuple(a["imputation_predictors"] or ds.z_names)
    for t in terms:
        for part in t.split(":"):
            if part not in ds.z_names + ds.x_names:
                raise ConfigError("analysis.terms", f"unknown covariate {part!r}")
    return PipelineSettings(terms, sub_terms, preds, a["n1"] if a["n1"] is not None else 0,
                            a["M"], a["L"], a["reject_limit"])


def cmd_analyze(args) -> int:
    cfg = load_config(args.config).with_overrides(seed=args.seed, out=args.out, **{"analysis.method": args.method})
    method = cfg.analysis["method"]
    engine, variant = parse_method(method)
    ds, sub = _load_cohort(cfg, args.cohort)
    settings = _settings(cfg, ds)
    cc = None
    if engine == "full":
        _check_observed(ds, np.ones(ds.n, dtype=bool), "full-cohort analysis")
    else:
        cc = _case_cohort(cfg, ds, sub, _seed(cfg.seed, 0))
        _check_observed(ds, cc.case_cohort, "a case-cohort member")
        if variant in ("rss", "iss") and not cfg.analysis["n1"]:
            raise ConfigError("analysis.n1", f"method {method} needs a supersample size")
    print(f"analysing {ds.n} subjects ({ds.n_events} events) with {method}", file=sys.stderr)
    res = run_method(settings, method, ds, cc, _seed(cfg.seed, 1 + METHODS.index(method)))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    z = 1.959963984540054
    rows = [[t, _num(b), _num(s), _num(b - z * s), _num(b + z * s)] for t, b, s in zip(res.terms, res.beta, res.se)]
    _write_csv(out / "estimates.csv", ["term", "estimate", "se", "lo95", "hi95"], rows)
    payload = {
        "method": method,
        "terms": list(res.terms),
        "estimate": res.beta,
        "se": res.se,
        "covariance": res.covariance,
        "sizes": None if res.assignment is None else res.assignment.sizes,
        "info": res.info,
    }
    if res.pooled is not None:
        payload["within"] = res.pooled.within
        payload["between"] = res.pooled.between
        payload["M"] = res.pooled.M
    _write_json(out / "estimates.json", payload)
    _write_json(out / "metadata.json", _metadata("analyze", cfg, {"cohort": str(args.cohort or cfg.analysis["cohort"]),
                                                                 "method": method}))
    print(f"wrote estimates to {out}", file=sys.stderr)
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = load_config(args.config).with_overrides(seed=args.seed, out=args.out, **{"analysis.method": args.method})
    method = cfg.analysis["method"]
    _, variant = parse_method(method)
    if variant not in ("rss", "iss"):
        raise ConfigError("analysis.method", f"sampling needs an rss or iss method, got {method!r}")
    if not cfg.analysis["n1"]:
        raise ConfigError("analysis.n1", "supersample size required")
    ds, sub = _load_cohort(cfg, args.cohort)
    settings = _settings(cfg, ds)
    cc = _case_cohort(cfg, ds, sub, _seed(cfg.seed, 0))
    s_draw, _ = _seed(cfg.seed, 1 + METHODS.index(method)).spawn(2)
    psi = submodel_influence(ds, settings.submodel_terms) if variant == "iss" else None
    assignment, w, cal = supersample(cc, variant, settings.n1, s_draw, psi)
    weight = np.full(ds.n, np.nan)
    weight[assignment.sample_index] = w
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    names = assignment.role_names()
    rows = [[ds.ids[i], names[i], int(assignment.subcohort[i]),
             "" if np.isnan(assignment.inclusion_prob[i]) else _num(assignment.inclusion_prob[i]),
             "" if np.isnan(weight[i]) else _num(weight[i])] for i in range(ds.n)]
    _write_csv(out / "assignment.csv", ["id", "role", "subcohort", "inclusion_prob", "weight"], rows)
    extra = {"method": method, "sizes": assignment.sizes}
    if cal is not None:
        prob = build_iss_constraints(assignment, np.linalg.norm(psi, axis=1))
        achieved = prob.constraints.T @ w
        crow = [[lab, _num(t), _num(a)] for lab, t, a in zip(prob.labels, prob.totals, achieved)]
        _write_csv(out / "constraints.csv", ["constraint", "target", "achieved"], crow)
        for lab, t, a in zip(prob.labels, prob.totals, achieved):
            print(f"{lab}: target {t:.6f} achieved {a:.6f}")
        extra["calibration_max_residual"] = cal.max_residual
        extra["cube_flight_residual"] = float(max(np.max(r.flight_residual)
                                                  for r in assignment.metadata["cube"].values()))
    print(f"supersample: {assignment.sizes['n1']} units", file=sys.stderr)
    _write_json(out / "metadata.json", _metadata("sample", cfg, extra))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isscohort", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging to standard error")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--seed", type=int, help="master seed (overrides config)")
        sp.add_argument("--out", help="output directory (overrides config)")

    sp = sub.add_parser("simulate", help="run the Monte Carlo study")
    common(sp)
    sp.add_argument("--method", help="comma-separated methods: " + ",".join(METHODS))
    sp.add_argument("--replicates", type=int)
    sp.add_argument("--threads", type=int, help="worker processes (default from config)")
    sp.add_argument("--paper-scale", action="store_true", help="N=25,000, n_sc=250, n1=750, 1,000 replicates")
    sp.set_defaults(func=cmd_simulate)

    for name, func, helptext in (("analyze", cmd_analyze, "pooled estimates for a cohort CSV"),
                                 ("sample", cmd_sample, "draw a supersample and its weights")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("cohort", nargs="?", help="cohort CSV (overrides analysis.cohort)")
        common(sp)
        sp.add_argument("--method", choices=METHODS)
        sp.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, CohortValidationError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (CoxFitError, CalibrationError, ImputationError, SamplingError, VarianceError,
            ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
