"""Cohort data model, validation and cumulative-hazard step functions."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "CohortValidationError",
    "ZeroRiskSetError",
    "CovariateSpec",
    "CovariateSchema",
    "Subject",
    "CohortDataset",
    "StepFunction",
    "validate_cohort",
    "read_cohort_csv",
    "nelson_aalen_marginal",
    "weighted_breslow_cumhaz",
]

MISSING_TOKENS = {"", "NA", "na", "NaN", "nan"}
TIE_METHOD = "breslow"


class CohortValidationError(ValueError):
    """Raised when a raw cohort table violates the data contract."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class ZeroRiskSetError(ArithmeticError):
    pass


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    kind: str = "continuous"  # continuous | binary | categorical
    levels: tuple = ()

    def __post_init__(self):
        if self.kind not in ("continuous", "binary", "categorical"):
            raise ValueError(f"unknown covariate kind {self.kind!r} for {self.name}")
        if self.kind == "categorical" and len(self.levels) < 2:
            raise ValueError(f"categorical covariate {self.name} needs at least two levels")

    @property
    def columns(self) -> tuple[str, ...]:
        """Design column names after dummy expansion (first level is the reference)."""
        if self.kind == "categorical":
            return tuple(f"{self.name}.{lvl}" for lvl in self.levels[1:])
        return (self.name,)


@dataclass(frozen=True)
class CovariateSchema:
    """Low-cost block ``z`` (always observed) and expensive block ``x`` (may be missing)."""

    z: tuple[CovariateSpec, ...]
    x: tuple[CovariateSpec, ...] = ()

    def __post_init__(self):
        names = [c.name for c in self.z + self.x]
        if len(set(names)) != len(names):
            raise ValueError("duplicate covariate names in schema")
        for c in self.x:
            if c.kind == "categorical":
                raise ValueError(f"expensive covariate {c.name}: categorical X is not supported")

    @property
    def z_columns(self) -> tuple[str, ...]:
        return tuple(col for c in self.z for col in c.columns)

    @property
    def x_columns(self) -> tuple[str, ...]:
        return tuple(col for c in self.x for col in c.columns)

    @classmethod
    def from_dict(cls, d: Mapping) -> "CovariateSchema":
        def parse(items):
            out = []
            for it in items or ():
                if isinstance(it, str):
                    out.append(CovariateSpec(it))
                else:
                    levels = tuple(str(v) for v in it.get("levels", ()))
                    out.append(CovariateSpec(it["name"], it.get("kind", "continuous"), levels))
            return tuple(out)

        return cls(parse(d.get("z")), parse(d.get("x")))

    def to_dict(self) -> dict:
        def dump(specs):
            out = []
            for c in specs:
                item = {"name": c.name, "kind": c.kind}
                if c.levels:
                    item["levels"] = list(c.levels)
                out.append(item)
            return out

        return {"z": dump(self.z), "x": dump(self.x)}


@dataclass(frozen=True)
class Subject:
    id: object
    time: float
    event: int
    z: np.ndarray
    x: np.ndarray
    stratum: object = None


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class CohortDataset:
    """Columnar, immutable cohort sorted by (time ascending, event descending).

    ``x`` holds NaN for missing expensive covariates.
    """

    ids: np.ndarray
    time: np.ndarray
    event: np.ndarray
    z: np.ndarray
    x: np.ndarray
    z_names: tuple[str, ...]
    x_names: tuple[str, ...]
    strata: np.ndarray | None = None
    schema: CovariateSchema | None = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("ids", "time", "event", "z", "x", "strata"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, _readonly(val))

    @property
    def n(self) -> int:
        return int(self.time.shape[0])

    def __len__(self) -> int:
        return self.n

    @property
    def n_events(self) -> int:
        return int(self.event.sum())

    @property
    def subjects(self) -> Iterator[Subject]:
        strata = self.strata if self.strata is not None else [None] * self.n
        for i in range(self.n):
            yield Subject(self.ids[i], float(self.time[i]), int(self.event[i]),
                          self.z[i], self.x[i], strata[i])

    def column(self, name: str) -> np.ndarray:
        if name in self.z_names:
            return self.z[:, self.z_names.index(name)]
        if name in self.x_names:
            return self.x[:, self.x_names.index(name)]
        raise KeyError(name)

    @property
    def x_missing(self) -> np.ndarray:
        return np.isnan(self.x)

    def subset(self, index) -> "CohortDataset":
        """Rows selected by a boolean mask or increasing integer index (order kept)."""
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        elif np.any(np.diff(index) < 0):
            raise ValueError("subset index must be increasing to preserve sort order")
        return CohortDataset(
            self.ids[index], self.time[index], self.event[index], self.z[index],
            self.x[index], self.z_names, self.x_names,
            None if self.strata is None else self.strata[index], self.schema,
        )

    def with_x(self, x: np.ndarray) -> "CohortDataset":
        x = np.asarray(x, dtype=float)
        if x.shape != self.x.shape:
            raise ValueError(f"x shape {x.shape} != {self.x.shape}")
        return CohortDataset(self.ids, self.time, self.event, self.z, x,
                             self.z_names, self.x_names, self.strata, self.schema)

    def mask_x(self, keep_rows) -> "CohortDataset":
        """Copy with every expensive covariate set missing outside ``keep_rows``."""
        x = self.x.copy()
        x[~np.asarray(keep_rows, dtype=bool)] = np.nan
        return self.with_x(x)

    @classmethod
    def from_arrays(cls, time, event, z=None, x=None, z_names=None, x_names=None,
                    ids=None, strata=None, schema=None) -> "CohortDataset":
        """Build a dataset from arrays, checking invariants and sorting."""
        time = np.asarray(time, dtype=float)
        n = time.shape[0]
        event = np.asarray(event)
        z = np.zeros((n, 0)) if z is None else np.asarray(z, dtype=float).reshape(n, -1)
        x = np.zeros((n, 0)) if x is None else np.asarray(x, dtype=float).reshape(n, -1)
        z_names = tuple(z_names) if z_names is not None else tuple(f"z{j + 1}" for j in range(z.shape[1]))
        x_names = tuple(x_names) if x_names is not None else tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if len(z_names) != z.shape[1] or len(x_names) != x.shape[1]:
            raise ValueError("column names do not match covariate matrix widths")
        ids = np.arange(n) if ids is None else np.asarray(ids)
        if len(set(ids.tolist())) != n:
            raise CohortValidationError("ids are not unique")
        if n < 1:
            raise CohortValidationError("empty cohort")
        for i in range(n):
            if not (math.isfinite(time[i]) and time[i] > 0):
                raise CohortValidationError(f"time must be positive and finite, got {time[i]!r}", i)
            if event[i] not in (0, 1):
                raise CohortValidationError(f"event must be 0 or 1, got {event[i]!r}", i)
        bad = np.flatnonzero(~np.isfinite(z).all(axis=1))
        if bad.size:
            raise CohortValidationError("missing or non-finite low-cost covariate", int(bad[0]))
        event = event.astype(np.int8)
        order = np.lexsort((ids, -event, time)) if ids.dtype.kind in "iuf" else np.lexsort((-event, time))
        strata = None if strata is None else np.asarray(strata)[order]
        return cls(ids[order], time[order], event[order], z[order], x[order],
                   z_names, x_names, strata, schema)


def _parse_float(value) -> float:
    if value is None:
        return math.nan
    if isinstance(value, str):
        s = value.strip()
        if s in MISSING_TOKENS:
            return math.nan
        return float(s)
    return float(value)


def _level_key(value) -> str:
    if isinstance(value, float) and value.is_integer():
        value = int(value)
    return str(value).strip()


def validate_cohort(raw_table: Iterable[Mapping], schema: CovariateSchema,
                    strata_column: str | None = None) -> CohortDataset:
    """Validate raw records and return a sorted :class:`CohortDataset`.

    Each record needs ``time``, ``event`` and every low-cost covariate;
    expensive covariates may be blank or ``NA``.  Categorical covariates are
    dummy-expanded with the first declared level as reference.  Errors carry the
    zero-based row index of the offending record.
    """
    records = list(raw_table)
    n = len(records)
    z_cols, x_cols = schema.z_columns, schema.x_columns
    time = np.empty(n)
    event = np.empty(n, dtype=np.int8)
    z = np.zeros((n, len(z_cols)))
    x = np.full((n, len(x_cols)), np.nan)
    ids = []
    strata = [] if strata_column else None

    def expand(spec: CovariateSpec, raw, row: int, block: str) -> list[float]:
        missing = raw is None or (isinstance(raw, str) and raw.strip() in MISSING_TOKENS) or (
            isinstance(raw, float) and math.isnan(raw))
        if missing:
            if block == "z":
                raise CohortValidationError(f"missing low-cost covariate {spec.name}", row)
            return [math.nan] * len(spec.columns)
        if spec.kind == "categorical":
            key = _level_key(raw)
            if key not in spec.levels:
                raise CohortValidationError(
                    f"unknown level {key!r} for {spec.name} (declared {list(spec.levels)})", row)
            return [1.0 if key == lvl else 0.0 for lvl in spec.levels[1:]]
        try:
            val = _parse_float(raw)
        except ValueError:
            raise CohortValidationError(f"non-numeric value {raw!r} for {spec.name}", row) from None
        if spec.kind == "binary" and val not in (0.0, 1.0):
            raise CohortValidationError(f"binary covariate {spec.name} must be 0/1, got {raw!r}", row)
        if not math.isfinite(val):
            if block == "z":
                raise CohortValidationError(f"non-finite low-cost covariate {spec.name}", row)
            val = math.nan
        return [val]

    for i, rec in enumerate(records):
        for key in ("time", "event"):
            if key not in rec:
                raise CohortValidationError(f"missing required column {key!r}", i)
        try:
            t = _parse_float(rec["time"])
        except ValueError:
            raise CohortValidationError(f"non-numeric time {rec['time']!r}", i) from None
        if not (math.isfinite(t) and t > 0):
            raise CohortValidationError(f"time must be positive and finite, got {rec['time']!r}", i)
        try:
            e = _parse_float(rec["event"])
        except ValueError:
            e = math.nan
        if e not in (0.0, 1.0):
            raise CohortValidationError(f"event must be 0 or 1, got {rec['event']!r}", i)
        time[i], event[i] = t, int(e)
        ids.append(rec.get("id", i))
        zrow = []
        for spec in schema.z:
            if spec.name not in rec:
                raise CohortValidationError(f"missing low-cost covariate {spec.name}", i)
            zrow += expand(spec, rec[spec.name], i, "z")
        z[i] = zrow
        xrow = []
        for spec in schema.x:
            xrow += expand(spec, rec.get(spec.name), i, "x")
        if xrow:
            x[i] = xrow
        if strata_column:
            s = rec.get(strata_column)
            if s is None or str(s).strip() in MISSING_TOKENS:
                raise CohortValidationError(f"missing stratum label in {strata_column!r}", i)
            strata.append(str(s).strip())

    if n < 2:
        raise CohortValidationError(f"cohort needs at least 2 subjects, got {n}")
    ids_arr = np.asarray(ids)
    if len(set(ids_arr.tolist())) != n:
        raise CohortValidationError("ids are not unique")
    order = np.lexsort((-event, time))
    return CohortDataset(
        ids_arr[order], time[order], event[order], z[order], x[order], z_cols, x_cols,
        None if strata is None else np.asarray(strata)[order], schema,
    )


def read_cohort_csv(path, schema: CovariateSchema, strata_column: str | None = None,
                    extra_columns: Sequence[str] = ()) -> tuple[CohortDataset, dict]:
    """Read a cohort CSV; returns the dataset and any requested extra columns keyed by id."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    extras = {col: {r.get("id", i): r.get(col) for i, r in enumerate(rows)} for col in extra_columns}
    return validate_cohort(rows, schema, strata_column), extras


@dataclass(frozen=True, eq=False)
class StepFunction:
    """Right-continuous nondecreasing step function, zero before the first jump."""

    jump_times: np.ndarray
    cumulative_values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.jump_times, dtype=float)
        v = np.asarray(self.cumulative_values, dtype=float)
        if t.shape != v.shape:
            raise ValueError("jump_times and cumulative_values differ in length")
        if np.any(np.diff(t) <= 0):
            raise ValueError("jump times must be strictly increasing")
        if np.any(np.diff(v) < 0) or (v.size and v[0] < 0):
            raise ValueError("cumulative values must be nonnegative and nondecreasing")
        object.__setattr__(self, "jump_times", _readonly(t))
        object.__setattr__(self, "cumulative_values", _readonly(v))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.jump_times.size == 0:
            vals = np.zeros_like(t)
            return vals if np.ndim(t) else float(vals)
        idx = np.searchsorted(self.jump_times, t, side="right") - 1
        vals = np.where(idx >= 0, self.cumulative_values[np.maximum(idx, 0)], 0.0)
        return vals if np.ndim(t) else float(vals)

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.cumulative_values, prepend=0.0)


def _event_time_sums(time: np.ndarray, event: np.ndarray, risk: np.ndarray):
    """Distinct event times, event counts and risk-set sums of ``risk`` (time sorted ascending)."""
    ev_times, d_count = np.unique(time[event == 1], return_counts=True)
    revcum = np.cumsum(risk[::-1])[::-1]
    first = np.searchsorted(time, ev_times, side="left")
    return ev_times, d_count.astype(float), revcum[first]


def nelson_aalen_marginal(dataset: CohortDataset) -> StepFunction:
    """Covariate-free, unweighted Nelson-Aalen estimate of the cumulative hazard."""
    if dataset.n == 0:
        raise ValueError("empty dataset")
    ev_times, d_count, at_risk = _event_time_sums(dataset.time, dataset.event, np.ones(dataset.n))
    return StepFunction(ev_times, np.cumsum(d_count / at_risk))


def weighted_breslow_cumhaz(dataset: CohortDataset, beta, weights, design_matrix_builder) -> StepFunction:
    """Weighted Breslow cumulative baseline hazard.

    Each distinct event time ``u`` contributes ``dN(u) / sum_r Y_r(u) w_r exp(lp_r)``
    with ``lp`` built from the current (possibly imputed) covariates.
    ``design_matrix_builder`` maps the dataset to its design matrix, e.g.
    ``CoxModelSpec.design_matrix``.
    """
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (dataset.n,) or np.any(weights <= 0):
        raise ValueError("weights must be strictly positive, one per unit")
    design = np.asarray(design_matrix_builder(dataset), dtype=float)
    beta = np.asarray(beta, dtype=float)
    if design.shape[1] != beta.shape[0]:
        raise ValueError(f"beta has {beta.shape[0]} entries, design has {design.shape[1]} columns")
    risk = weights * np.exp(design @ beta)
    ev_times, d_count, denom = _event_time_sums(dataset.time, dataset.event, risk)
    if np.any(denom <= 0):
        raise ZeroRiskSetError("empty weighted risk set at an event time")
    return StepFunction(ev_times, np.cumsum(d_count / denom))
