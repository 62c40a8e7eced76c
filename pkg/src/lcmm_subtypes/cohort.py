"""Long-format longitudinal cohorts: loading, validation and baseline summaries."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MIN_VISITS = 5

TRAJECTORY_HEADER = ["eye_id", "subject_id", "time_years", "value"]
EVENTS_HEADER = ["eye_id", "event_time_years", "event_flag"]


class DataValidationError(ValueError):
    """Base class for problems with input data."""


class CohortParseError(DataValidationError):
    def __init__(self, path, line, msg):
        super().__init__(f"{path}:{line}: {msg}")
        self.path = str(path)
        self.line = line


class CohortSchemaError(DataValidationError):
    pass


@dataclass(frozen=True)
class EyeSeries:
    eye_id: str
    subject_id: str
    times: np.ndarray
    values: np.ndarray
    covariates: dict = field(default_factory=dict)

    @property
    def n_visits(self) -> int:
        return len(self.times)

    def truncated(self, drop: int) -> "EyeSeries":
        """Copy of the series without its last ``drop`` visits."""
        if drop <= 0:
            return self
        return EyeSeries(self.eye_id, self.subject_id, self.times[:-drop], self.values[:-drop], self.covariates)


@dataclass(frozen=True)
class Exclusion:
    eye_id: str
    reason: str


@dataclass(frozen=True)
class Cohort:
    eyes: tuple
    value_range: tuple | None
    covariate_schema: dict = field(default_factory=dict)
    exclusions: tuple = ()

    def __post_init__(self):
        ids = [e.eye_id for e in self.eyes]
        if len(set(ids)) != len(ids):
            raise DataValidationError("eye_ids must be unique within a cohort")
        if self.eyes:
            lo, hi = self.value_range
            if not lo < hi:
                raise DataValidationError(f"value_range must satisfy min < max, got {self.value_range}")

    def __len__(self):
        return len(self.eyes)

    @property
    def eye_ids(self) -> list:
        return [e.eye_id for e in self.eyes]

    def subset(self, indices) -> "Cohort":
        """Cohort restricted to eyes at ``indices`` (value_range is kept)."""
        return Cohort(tuple(self.eyes[i] for i in indices), self.value_range, self.covariate_schema)

    def covariate(self, name: str) -> np.ndarray:
        if name not in self.covariate_schema:
            raise CohortSchemaError(f"unknown covariate {name!r}")
        return np.array([e.covariates.get(name, math.nan) for e in self.eyes], dtype=float)


@dataclass(frozen=True)
class EventRecord:
    eye_id: str
    event_time_years: float
    event_flag: int


def observed_range(eyes) -> tuple | None:
    if not eyes:
        return None
    lo = min(float(e.values.min()) for e in eyes)
    hi = max(float(e.values.max()) for e in eyes)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    return (lo, hi)


def validate_eye(eye: EyeSeries) -> str | None:
    """Reason the eye violates the series invariants, or None."""
    if len(eye.times) != len(eye.values):
        return "times and values differ in length"
    if not (np.all(np.isfinite(eye.values)) and np.all(np.isfinite(eye.times))):
        return "non-finite time or value"
    if np.any(np.diff(eye.times) <= 0):
        return "times not strictly increasing"
    if len(eye.times) < MIN_VISITS:
        return f"fewer than {MIN_VISITS} visits ({len(eye.times)})"
    if eye.times[0] < 0:
        return "negative follow-up time"
    return None


def make_cohort(eyes, covariate_schema=None, value_range=None) -> Cohort:
    """Validate eyes and build a cohort, excluding eyes that break invariants."""
    kept, excluded = [], []
    for eye in eyes:
        reason = validate_eye(eye)
        if reason is None:
            kept.append(eye)
        else:
            excluded.append(Exclusion(eye.eye_id, reason))
    schema = dict(covariate_schema or {})
    for eye in kept:
        unknown = set(eye.covariates) - set(schema)
        if unknown:
            raise CohortSchemaError(f"eye {eye.eye_id}: covariates {sorted(unknown)} absent from schema")
    return Cohort(tuple(kept), value_range or observed_range(kept), schema, tuple(excluded))


def _float(text, path, line, col):
    try:
        val = float(text)
    except ValueError:
        raise CohortParseError(path, line, f"column {col!r}: cannot parse {text!r} as a number") from None
    return val


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CohortParseError(path, 1, "empty file") from None
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CohortParseError(path, reader.line_num, f"expected {len(header)} fields, got {len(row)}")
            yield header, reader.line_num, row


def _read_header(path):
    with open(path, newline="", encoding="utf-8") as fh:
        try:
            return next(csv.reader(fh))
        except StopIteration:
            raise CohortParseError(path, 1, "empty file") from None


def read_covariates(path, schema=None):
    """Return ({eye_id: {name: value}}, schema). Empty cells become NaN."""
    header = _read_header(path)
    if not header or header[0] != "eye_id":
        raise CohortParseError(path, 1, "covariate header must start with 'eye_id'")
    names = header[1:]
    if schema is not None:
        missing = [n for n in names if n not in schema]
        if missing:
            raise CohortSchemaError(f"covariates {missing} not declared in schema")
    table = {}
    for _, line, row in _rows(path):
        eye_id = row[0]
        if eye_id in table:
            raise DataValidationError(f"{path}:{line}: duplicate covariate row for eye {eye_id!r}")
        table[eye_id] = {
            n: (math.nan if not cell.strip() else _float(cell, path, line, n)) for n, cell in zip(names, row[1:])
        }
    if schema is None:
        schema = {}
        for n in names:
            vals = [r[n] for r in table.values() if not math.isnan(r[n])]
            schema[n] = "binary" if vals and set(vals) <= {0.0, 1.0} else "continuous"
    for n in names:
        if schema[n] == "binary":
            for eye_id, r in table.items():
                if not (math.isnan(r[n]) or r[n] in (0.0, 1.0)):
                    raise DataValidationError(f"{path}: binary covariate {n!r} has value {r[n]} for eye {eye_id!r}")
    return table, {n: schema[n] for n in names}


def read_trajectories(path):
    """Return ordered {eye_id: (subject_id, [times], [values])} in file order."""
    header = _read_header(path)
    if header != TRAJECTORY_HEADER:
        raise CohortParseError(path, 1, f"expected header {','.join(TRAJECTORY_HEADER)}")
    series = {}
    seen = set()
    for _, line, row in _rows(path):
        eye_id, subject_id = row[0], row[1]
        t = _float(row[2], path, line, "time_years")
        v = _float(row[3], path, line, "value")
        if (eye_id, t) in seen:
            raise DataValidationError(f"{path}:{line}: duplicate visit (eye_id={eye_id!r}, time={t!r})")
        seen.add((eye_id, t))
        rec = series.setdefault(eye_id, (subject_id, [], []))
        if rec[0] != subject_id:
            raise DataValidationError(f"{path}:{line}: eye {eye_id!r} assigned to two subjects")
        rec[1].append(t)
        rec[2].append(v)
    return series


def read_events(path, cohort: Cohort | None = None):
    header = _read_header(path)
    if header != EVENTS_HEADER:
        raise CohortParseError(path, 1, f"expected header {','.join(EVENTS_HEADER)}")
    last_visit = {e.eye_id: float(e.times[-1]) for e in cohort.eyes} if cohort is not None else {}
    events = []
    for _, line, row in _rows(path):
        t = _float(row[1], path, line, "event_time_years")
        flag = _float(row[2], path, line, "event_flag")
        if flag not in (0.0, 1.0):
            raise DataValidationError(f"{path}:{line}: event_flag must be 0 or 1")
        if t < 0:
            raise DataValidationError(f"{path}:{line}: negative event time")
        if cohort is not None:
            if row[0] not in last_visit:
                continue
            if t > last_visit[row[0]] + 1e-12:
                raise DataValidationError(f"{path}:{line}: event time after last visit of eye {row[0]!r}")
        events.append(EventRecord(row[0], t, int(flag)))
    return events


def load_cohort(trajectory_file, covariate_file=None, events_file=None, schema=None):
    """Load a cohort from the long-format CSV files.

    Eyes that fail validation (too few visits, non-monotone times, non-finite
    values) are excluded and listed in ``cohort.exclusions``. Events for
    excluded eyes are dropped.
    """
    series = read_trajectories(trajectory_file)
    covs, schema = read_covariates(covariate_file, schema) if covariate_file else ({}, dict(schema or {}))
    eyes = []
    for eye_id, (subject_id, times, values) in series.items():
        times = np.asarray(times, dtype=float)
        # stored relative to the eye's own baseline visit
        if len(times) and times[0] != 0.0 and np.all(np.diff(times) > 0):
            times = times - times[0]
        cov = covs.get(eye_id, {n: math.nan for n in schema})
        eyes.append(EyeSeries(eye_id, subject_id, times, np.asarray(values, dtype=float), cov))
    cohort = make_cohort(eyes, schema)
    events = read_events(events_file, cohort) if events_file else []
    return cohort, events


@dataclass(frozen=True)
class BaselineRow:
    name: str
    kind: str
    n: int
    mean: float = math.nan
    sd: float = math.nan
    count: int = 0
    percent: float = math.nan

    def formatted(self) -> str:
        if self.kind == "continuous":
            return f"{self.mean:.2f} ({self.sd:.2f})"
        return f"{self.count} ({self.percent:.1f}%)"


def summarize_baseline(cohort: Cohort) -> list:
    """Mean (SD) per continuous covariate and count (%) per binary covariate.

    Missing cells are skipped. A single observation has SD 0.
    """
    if not cohort.eyes:
        raise DataValidationError("cannot summarize an empty cohort")
    rows = []
    for name, kind in cohort.covariate_schema.items():
        x = cohort.covariate(name)
        x = x[~np.isnan(x)]
        n = len(x)
        if kind == "binary":
            count = int(x.sum())
            rows.append(BaselineRow(name, kind, n, count=count, percent=100.0 * count / n if n else math.nan))
        else:
            mean = float(x.mean()) if n else math.nan
            sd = float(x.std(ddof=1)) if n > 1 else 0.0
            rows.append(BaselineRow(name, kind, n, mean=mean, sd=sd))
    return rows
