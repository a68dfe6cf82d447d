"""Experiment configuration files (YAML) with strict key checking.

All numeric defaults live in ``DEFAULTS``; a config file only needs the keys
it changes. Unknown keys are rejected with the dotted path of the offending
entry so that typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import yaml

from .imputation import DEFAULT_REJECT_LIMIT
from .pipeline import METHODS
from .simulation import SimConfig
from .survival import CovariateSchema

__all__ = ["ConfigError", "DEFAULTS", "ExperimentConfig", "load_config", "config_hash"]

# One documented table of defaults; desk scale for the simulation block.
DEFAULTS = {
    "seed": 20240601,
    "threads": 1,
    "out": "isscohort-out",
    "simulation": {
        "N": 5000,                # cohort size (paper scale: 25,000)
        "n_sc": 100,              # subcohort size (paper scale: 250)
        "n1": 300,                # supersample size (paper scale: 750)
        "M": 10,                  # imputations
        "L": 20,                  # chained-equation cycles
        "alpha": 1.0,             # Weibull shape
        "beta0": None,            # baseline log hazard; None = solve for event_fraction
        "event_fraction": 0.01,
        "interaction": False,
        "stratified": False,
        "strata_variable": "z2",
        "n_sc_by_stratum": None,  # None = proportional allocation
        "n1_by_stratum": None,
        "replicates": 200,        # paper scale: 1,000
        "methods": list(METHODS),
        "reject_limit": DEFAULT_REJECT_LIMIT,
        "beta": None,             # None = published true log hazard ratios
        "paper_scale": False,
    },
    "analysis": {
        "cohort": None,           # CSV path (can also be given on the command line)
        "id_column": "id",
        "strata_column": None,
        "subcohort_column": None,  # 0/1 column marking the subcohort; None = draw one
        "schema": None,           # {"z": [...], "x": [...]}
        "terms": None,            # analysis model terms, e.g. [z1, xc1, "z1:xc1"]
        "submodel_terms": None,   # low-cost terms for the supersampling submodel; None = Z terms of the model
        "imputation_predictors": None,  # None = all low-cost columns
        "method": "smc_iss",
        "n_sc": None,             # count or {stratum: count}
        "n1": None,               # count or {stratum: count}
        "M": 10,
        "L": 20,
        "reject_limit": DEFAULT_REJECT_LIMIT,
    },
}

# Keys that change where or how fast a run happens but never its results; they
# are left out of the recorded config and its hash.
RESULT_INVARIANT_KEYS = ("threads", "out")

PAPER_SCALE = {"N": 25_000, "n_sc": 250, "n1": 750, "replicates": 1000}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


def _merge(defaults: dict, given: dict, path: str) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(path, f"expected a mapping, got {type(given).__name__}")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        sub = f"{path}.{key}" if path else str(key)
        if key not in defaults:
            raise ConfigError(sub, "unknown key")
        if isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value or {}, sub)
        else:
            out[key] = value
    return out


def _check_int(d: dict, key: str, path: str, minimum: int = 0, allow_none: bool = False, allow_dict: bool = False):
    v = d[key]
    sub = f"{path}.{key}"
    if v is None and allow_none:
        return
    if allow_dict and isinstance(v, dict):
        for h, n in v.items():
            if not isinstance(n, int) or isinstance(n, bool) or n < minimum:
                raise ConfigError(f"{sub}.{h}", f"expected an integer >= {minimum}, got {n!r}")
        return
    if not isinstance(v, int) or isinstance(v, bool) or v < minimum:
        raise ConfigError(sub, f"expected an integer >= {minimum}, got {v!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    source: str | None = None

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def threads(self) -> int:
        return int(self.raw["threads"])

    @property
    def out(self) -> str:
        return str(self.raw["out"])

    @property
    def simulation(self) -> dict:
        return self.raw["simulation"]

    @property
    def analysis(self) -> dict:
        return self.raw["analysis"]

    def with_overrides(self, **kw) -> "ExperimentConfig":
        """Apply command-line overrides (None values are ignored) and re-validate."""
        raw = copy.deepcopy(self.raw)
        for key, value in kw.items():
            if value is None:
                continue
            section, _, name = key.rpartition(".")
            target = raw[section] if section else raw
            target[name] = value
        return ExperimentConfig(validate(raw), self.source)

    def sim_config(self) -> SimConfig:
        s = dict(self.simulation)
        paper = s.pop("paper_scale")
        beta = s.pop("beta")
        kw = {k: v for k, v in s.items() if v is not None or k in ("beta0",)}
        if paper:
            for k, v in PAPER_SCALE.items():
                if s[k] == DEFAULTS["simulation"][k]:
                    kw[k] = v
        if beta is not None:
            kw["beta"] = tuple(beta)
        kw["methods"] = tuple(kw["methods"])
        return SimConfig(seed=self.seed, **kw)

    def schema(self) -> CovariateSchema:
        sch = self.analysis["schema"]
        if sch is None:
            raise ConfigError("analysis.schema", "required for cohort analysis")
        return CovariateSchema.from_dict(sch)

    def result_config(self) -> dict:
        """The config without the keys that cannot affect results."""
        return {k: v for k, v in self.raw.items() if k not in RESULT_INVARIANT_KEYS}

    def to_json(self) -> str:
        return json.dumps(self.result_config(), sort_keys=True, separators=(",", ":"))


def validate(raw: dict) -> dict:
    cfg = _merge(DEFAULTS, raw or {}, "")
    _check_int(cfg, "seed", "", 0)
    _check_int(cfg, "threads", "", 1)
    s = cfg["simulation"]
    for key, lo in (("N", 2), ("n_sc", 1), ("n1", 0), ("M", 2), ("L", 1), ("replicates", 1), ("reject_limit", 1)):
        _check_int(s, key, "simulation", lo)
    for key in ("n_sc_by_stratum", "n1_by_stratum"):
        _check_int(s, key, "simulation", 0, allow_none=True, allow_dict=True)
    if not isinstance(s["methods"], (list, tuple)) or not s["methods"]:
        raise ConfigError("simulation.methods", "expected a non-empty list")
    for i, m in enumerate(s["methods"]):
        if m not in METHODS:
            raise ConfigError(f"simulation.methods[{i}]", f"unknown method {m!r}; expected one of {list(METHODS)}")
    for key in ("interaction", "stratified", "paper_scale"):
        if not isinstance(s[key], bool):
            raise ConfigError(f"simulation.{key}", f"expected true/false, got {s[key]!r}")
    for key in ("alpha", "event_fraction"):
        if isinstance(s[key], bool) or not isinstance(s[key], (int, float)) or s[key] <= 0:
            raise ConfigError(f"simulation.{key}", f"expected a positive number, got {s[key]!r}")
    if s["beta0"] is not None and (isinstance(s["beta0"], bool) or not isinstance(s["beta0"], (int, float))):
        raise ConfigError("simulation.beta0", f"expected a number or null, got {s['beta0']!r}")
    if s["beta"] is not None and (not isinstance(s["beta"], list) or len(s["beta"]) != 11):
        raise ConfigError("simulation.beta", "expected a list of 11 log hazard ratios")
    a = cfg["analysis"]
    if a["method"] not in METHODS:
        raise ConfigError("analysis.method", f"unknown method {a['method']!r}; expected one of {list(METHODS)}")
    for key, lo in (("M", 2), ("L", 1), ("reject_limit", 1)):
        _check_int(a, key, "analysis", lo)
    for key in ("n_sc", "n1"):
        _check_int(a, key, "analysis", 0, allow_none=True, allow_dict=True)
    for key in ("terms", "submodel_terms", "imputation_predictors"):
        v = a[key]
        if v is not None and (not isinstance(v, list) or not all(isinstance(t, str) for t in v)):
            raise ConfigError(f"analysis.{key}", "expected a list of names")
    if a["schema"] is not None:
        if not isinstance(a["schema"], dict):
            raise ConfigError("analysis.schema", "expected a mapping with keys z and x")
        extra = set(a["schema"]) - {"z", "x"}
        if extra:
            raise ConfigError(f"analysis.schema.{sorted(extra)[0]}", "unknown key")
        try:
            CovariateSchema.from_dict(a["schema"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError("analysis.schema", str(exc)) from None
    return cfg


def load_config(path=None) -> ExperimentConfig:
    """Read and validate a YAML config; ``None`` gives the defaults."""
    if path is None:
        return ExperimentConfig(validate({}), None)
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"not valid YAML: {exc}") from None
    return ExperimentConfig(validate(raw or {}), str(path))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(cfg.to_json().encode("utf-8")).hexdigest()
