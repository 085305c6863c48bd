"""Censored survival data: records, datasets, validation and CSV I/O.

Datasets are stored column-wise (``time``, ``event``, ``X``) and are
immutable after construction; the record view is generated on demand.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np


class DataError(ValueError):
    """Base class for ingestion and validation failures."""


class SchemaError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, msg, row=None, column=None):
        super().__init__(msg)
        self.row = row
        self.column = column


class RowValidationError(DataError):
    def __init__(self, msg, row=None):
        super().__init__(msg)
        self.row = row


class DegenerateDataError(DataError):
    pass


_TRUE = {"1", "true", "t", "yes"}
_FALSE = {"0", "false", "f", "no"}


def _parse_bool(s, row, col):
    v = s.strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    # accept 1.0 / 0.0 as written by numeric tools
    try:
        f = float(v)
    except ValueError:
        f = None
    if f == 1.0:
        return True
    if f == 0.0:
        return False
    raise ParseError(f"row {row}, column {col!r}: cannot parse event indicator {s!r}", row, col)


def _parse_float(s, row, col):
    if s.strip() == "":
        raise ParseError(f"row {row}, column {col!r}: missing value", row, col)
    try:
        v = float(s)
    except ValueError:
        raise ParseError(f"row {row}, column {col!r}: non-numeric value {s!r}", row, col) from None
    if not math.isfinite(v):
        raise ParseError(f"row {row}, column {col!r}: non-finite value {s!r}", row, col)
    return v


@dataclass(frozen=True)
class CensoredRecord:
    time: float
    event: bool
    covariates: np.ndarray


@dataclass(frozen=True)
class IllnessDeathRecord:
    y1: float
    d1: bool
    y2: float
    d2: bool
    covariates: np.ndarray


@dataclass(frozen=True, eq=False)
class SurvivalDataset:
    """Right-censored data ``(Y_i, delta_i, X_i)``.

    ``column_means``/``column_sds`` are populated by :func:`standardize` and
    hold the statistics of the *original* columns.
    """

    time: np.ndarray
    event: np.ndarray
    X: np.ndarray
    feature_names: tuple = ()
    standardized: bool = False
    column_means: np.ndarray | None = None
    column_sds: np.ndarray | None = None

    def __post_init__(self):
        time = np.asarray(self.time, dtype=float).reshape(-1)
        event = np.asarray(self.event).astype(bool).reshape(-1)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1) if X.size == time.size else X.reshape(time.size, -1)
        if X.ndim != 2 or X.shape[0] != time.size or event.size != time.size:
            raise DataError(
                f"inconsistent shapes: time {time.shape}, event {event.shape}, X {X.shape}")
        names = tuple(self.feature_names) or tuple(f"x{j + 1}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise DataError(f"{len(names)} feature names for {X.shape[1]} covariates")
        if len(set(names)) != len(names):
            raise DataError("feature names must be unique")
        _validate_survival_arrays(time, X)
        for arr in (time, event, X):
            arr.setflags(write=False)
        object.__setattr__(self, "time", time)
        object.__setattr__(self, "event", event)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self) -> int:
        return self.time.size

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def n_events(self) -> int:
        return int(self.event.sum())

    @property
    def records(self) -> list[CensoredRecord]:
        return [CensoredRecord(float(t), bool(d), x.copy())
                for t, d, x in zip(self.time, self.event, self.X)]

    @classmethod
    def from_records(cls, records: Sequence[CensoredRecord], feature_names=()):
        if not records:
            raise DataError("no records")
        time = [r.time for r in records]
        event = [r.event for r in records]
        X = np.vstack([np.asarray(r.covariates, dtype=float).reshape(1, -1) for r in records])
        return cls(time, event, X, feature_names=feature_names)

    def subset(self, idx) -> "SurvivalDataset":
        idx = np.asarray(idx)
        return SurvivalDataset(self.time[idx], self.event[idx], self.X[idx],
                               feature_names=self.feature_names,
                               standardized=self.standardized,
                               column_means=self.column_means,
                               column_sds=self.column_sds)

    def select_columns(self, cols) -> "SurvivalDataset":
        cols = np.asarray(cols, dtype=int).reshape(-1)
        names = tuple(self.feature_names[j] for j in cols)
        return SurvivalDataset(self.time, self.event, self.X[:, cols], feature_names=names)

    def with_time(self, time) -> "SurvivalDataset":
        return SurvivalDataset(time, self.event, self.X, feature_names=self.feature_names)

    def equals(self, other: "SurvivalDataset") -> bool:
        return (self.feature_names == other.feature_names
                and np.array_equal(self.time, other.time)
                and np.array_equal(self.event, other.event)
                and np.array_equal(self.X, other.X))

    def require_events(self):
        if self.n_events == 0:
            raise DegenerateDataError("dataset has no observed events")


def _validate_survival_arrays(time, X):
    bad = np.flatnonzero(~np.isfinite(time) | (time < 0))
    if bad.size:
        i = int(bad[0])
        raise RowValidationError(f"row {i}: time must be finite and >= 0, got {time[i]}", i)
    bad_rows = np.flatnonzero(~np.isfinite(X).all(axis=1))
    if bad_rows.size:
        i = int(bad_rows[0])
        raise RowValidationError(f"row {i}: non-finite covariate", i)


@dataclass(frozen=True, eq=False)
class IllnessDeathDataset:
    """Semi-competing observations ``(Y1, d1, Y2, d2, X)``."""

    y1: np.ndarray
    d1: np.ndarray
    y2: np.ndarray
    d2: np.ndarray
    X: np.ndarray
    feature_names: tuple = ()

    def __post_init__(self):
        y1 = np.asarray(self.y1, dtype=float).reshape(-1)
        y2 = np.asarray(self.y2, dtype=float).reshape(-1)
        d1 = np.asarray(self.d1).astype(bool).reshape(-1)
        d2 = np.asarray(self.d2).astype(bool).reshape(-1)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(y1.size, -1)
        n = y1.size
        if not (y2.size == d1.size == d2.size == n and X.shape[0] == n):
            raise DataError("inconsistent illness-death array lengths")
        names = tuple(self.feature_names) or tuple(f"x{j + 1}" for j in range(X.shape[1]))
        if len(names) != X.shape[1] or len(set(names)) != len(names):
            raise DataError("feature names must be unique and match covariate count")
        for i in range(n):
            _check_illness_death_row(i, y1[i], d1[i], y2[i], d2[i])
        bad_rows = np.flatnonzero(~np.isfinite(X).all(axis=1))
        if bad_rows.size:
            raise RowValidationError(f"row {int(bad_rows[0])}: non-finite covariate", int(bad_rows[0]))
        for arr in (y1, y2, d1, d2, X):
            arr.setflags(write=False)
        object.__setattr__(self, "y1", y1)
        object.__setattr__(self, "y2", y2)
        object.__setattr__(self, "d1", d1)
        object.__setattr__(self, "d2", d2)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self):
        return self.y1.size

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def records(self) -> list[IllnessDeathRecord]:
        return [IllnessDeathRecord(float(a), bool(b), float(c), bool(d), x.copy())
                for a, b, c, d, x in zip(self.y1, self.d1, self.y2, self.d2, self.X)]

    @classmethod
    def from_records(cls, records: Sequence[IllnessDeathRecord], feature_names=()):
        if not records:
            raise DataError("no records")
        X = np.vstack([np.asarray(r.covariates, dtype=float).reshape(1, -1) for r in records])
        return cls([r.y1 for r in records], [r.d1 for r in records],
                   [r.y2 for r in records], [r.d2 for r in records], X,
                   feature_names=feature_names)

    def subset(self, idx):
        idx = np.asarray(idx)
        return IllnessDeathDataset(self.y1[idx], self.d1[idx], self.y2[idx], self.d2[idx],
                                   self.X[idx], feature_names=self.feature_names)

    def equals(self, other):
        return (self.feature_names == other.feature_names
                and all(np.array_equal(getattr(self, a), getattr(other, a))
                        for a in ("y1", "d1", "y2", "d2", "X")))


def _check_illness_death_row(i, y1, d1, y2, d2):
    if not (math.isfinite(y1) and math.isfinite(y2)) or y1 < 0 or y2 < 0:
        raise RowValidationError(f"row {i}: times must be finite and >= 0", i)
    if y1 > y2:
        raise RowValidationError(f"row {i}: y1 ({y1}) exceeds y2 ({y2})", i)
    if not d1 and y1 != y2:
        raise RowValidationError(f"row {i}: d1 = 0 requires y1 == y2", i)
    if d1 and y1 == y2:
        raise RowValidationError(f"row {i}: progression (d1 = 1) must strictly precede y2", i)


# ---------------------------------------------------------------------------
# CSV


def _read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    return header, rows


def _column_index(header, name):
    try:
        return header.index(name)
    except ValueError:
        raise SchemaError(f"missing column {name!r}") from None


def _covariate_columns(header, schema, reserved):
    cov = schema.get("covariates")
    if cov is None:
        return [h for h in header if h not in reserved]
    return list(cov)


def load_csv(path, schema: Mapping | None = None):
    """Load a survival CSV.

    ``schema`` maps roles to column names: ``time``/``event`` (default
    ``"time"``/``"event"``) and ``covariates`` (default: all other columns).
    When the schema has ``mode: "illness_death"`` the roles are ``y1``,
    ``d1``, ``y2``, ``d2`` and an :class:`IllnessDeathDataset` is returned.

    Row numbers in diagnostics are 1-based data rows (header excluded).
    """
    schema = dict(schema or {})
    header, rows = _read_rows(path)
    if schema.get("mode") == "illness_death":
        return _load_illness_death(header, rows, schema)

    tcol = schema.get("time", "time")
    ecol = schema.get("event", "event")
    covs = _covariate_columns(header, schema, {tcol, ecol})
    ti, ei = _column_index(header, tcol), _column_index(header, ecol)
    ci = [_column_index(header, c) for c in covs]
    n = len(rows)
    time = np.empty(n)
    event = np.empty(n, dtype=bool)
    X = np.empty((n, len(ci)))
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise ParseError(f"row {r}: expected {len(header)} fields, got {len(row)}", r)
        time[r - 1] = _parse_float(row[ti], r, tcol)
        if time[r - 1] < 0:
            raise RowValidationError(f"row {r}: negative time {time[r - 1]}", r)
        event[r - 1] = _parse_bool(row[ei], r, ecol)
        for k, (j, name) in enumerate(zip(ci, covs)):
            X[r - 1, k] = _parse_float(row[j], r, name)
    if n == 0 or not event.any():
        raise DegenerateDataError(f"{path}: no event rows")
    return SurvivalDataset(time, event, X, feature_names=tuple(covs))


def _load_illness_death(header, rows, schema):
    roles = {k: schema.get(k, k) for k in ("y1", "d1", "y2", "d2")}
    covs = _covariate_columns(header, schema, set(roles.values()) | {"mode"})
    idx = {k: _column_index(header, v) for k, v in roles.items()}
    ci = [_column_index(header, c) for c in covs]
    n = len(rows)
    y1, y2 = np.empty(n), np.empty(n)
    d1, d2 = np.empty(n, dtype=bool), np.empty(n, dtype=bool)
    X = np.empty((n, len(ci)))
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise ParseError(f"row {r}: expected {len(header)} fields, got {len(row)}", r)
        y1[r - 1] = _parse_float(row[idx["y1"]], r, roles["y1"])
        y2[r - 1] = _parse_float(row[idx["y2"]], r, roles["y2"])
        d1[r - 1] = _parse_bool(row[idx["d1"]], r, roles["d1"])
        d2[r - 1] = _parse_bool(row[idx["d2"]], r, roles["d2"])
        try:
            _check_illness_death_row(r, y1[r - 1], d1[r - 1], y2[r - 1], d2[r - 1])
        except RowValidationError as exc:
            raise RowValidationError(str(exc), r) from None
        for k, (j, name) in enumerate(zip(ci, covs)):
            X[r - 1, k] = _parse_float(row[j], r, name)
    if n == 0 or not (d1.any() or d2.any()):
        raise DegenerateDataError("no event rows")
    return IllnessDeathDataset(y1, d1, y2, d2, X, feature_names=tuple(covs))


def write_csv(ds, path):
    """Write a dataset in the layout read back by :func:`load_csv` with its default schema."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if isinstance(ds, IllnessDeathDataset):
            w.writerow(["y1", "d1", "y2", "d2", *ds.feature_names])
            for a, b, c, d, x in zip(ds.y1, ds.d1, ds.y2, ds.d2, ds.X):
                w.writerow([repr(float(a)), int(b), repr(float(c)), int(d),
                            *(repr(float(v)) for v in x)])
        else:
            w.writerow(["time", "event", *ds.feature_names])
            for t, d, x in zip(ds.time, ds.event, ds.X):
                w.writerow([repr(float(t)), int(d), *(repr(float(v)) for v in x)])


def default_schema(ds) -> dict:
    if isinstance(ds, IllnessDeathDataset):
        return {"mode": "illness_death", "covariates": list(ds.feature_names)}
    return {"time": "time", "event": "event", "covariates": list(ds.feature_names)}


# ---------------------------------------------------------------------------
# standardization


def standardize(ds: SurvivalDataset) -> SurvivalDataset:
    """Center columns to mean 0 and scale to unit population SD (``ddof=0``).

    The original means and SDs are recorded so fitted coefficients can be
    mapped back with :func:`unstandardize_coef`. Standardizing an already
    standardized dataset keeps the first set of statistics.
    """
    X = ds.X
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    const = np.flatnonzero(sd <= 1e-12 * np.maximum(1.0, np.abs(mu)))
    if const.size:
        raise DataError(f"constant column {ds.feature_names[const[0]]}")
    Z = (X - mu) / sd
    if ds.standardized and ds.column_means is not None:
        mu, sd = ds.column_means, ds.column_sds
    return SurvivalDataset(ds.time, ds.event, Z, feature_names=ds.feature_names,
                           standardized=True, column_means=mu, column_sds=sd)


def unstandardize_coef(ds: SurvivalDataset, beta):
    """Map coefficients fitted on ``standardize(ds)`` to the original scale.

    Returns ``(beta_original, offset)`` where ``X @ beta_original + offset``
    equals the standardized linear predictor.
    """
    if not ds.standardized:
        raise DataError("dataset is not standardized")
    beta = np.asarray(beta, dtype=float)
    b = beta / ds.column_sds
    return b, -float(ds.column_means @ b)
