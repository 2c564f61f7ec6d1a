"""Longitudinal dataset types, CSV ingestion and time transforms."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

TIME_TRANSFORMS = ("none", "log")
INTERCEPT = "intercept"


class DataError(ValueError):
    """Base class for dataset problems."""


class ParseError(DataError):
    """A cell could not be parsed; carries the 1-based CSV line number."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class IntegrityError(DataError):
    """Rows parse individually but are inconsistent with each other."""


class TimeDomainError(DataError):
    def __init__(self, message: str, subjects: list[str]):
        super().__init__(message)
        self.subjects = subjects


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    times: np.ndarray
    responses: np.ndarray
    covariates: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        y = np.asarray(self.responses, dtype=float)
        x = np.asarray(self.covariates, dtype=float)
        if t.ndim != 1 or t.shape != y.shape or t.size == 0:
            raise IntegrityError(f"subject {self.id}: times and responses must be equal-length, non-empty")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise IntegrityError(f"subject {self.id}: non-finite values")
        if np.any(np.diff(t) <= 0):
            raise IntegrityError(f"subject {self.id}: times must be strictly increasing")
        if x.ndim != 1 or x.size == 0 or x[0] != 1.0:
            raise IntegrityError(f"subject {self.id}: covariates must start with the intercept 1")
        for name, arr in (("times", t), ("responses", y), ("covariates", x)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_obs(self) -> int:
        return self.times.size


@dataclass(frozen=True)
class LongitudinalDataset:
    """Subjects sorted by id; each carries its own covariate row ``(1, x_1, ..., x_{p-1})``."""

    subjects: tuple[SubjectRecord, ...]
    covariate_names: tuple[str, ...] = (INTERCEPT,)
    time_transform_applied: str = "none"
    units: dict = field(default_factory=dict)
    dropped_rows: int = 0

    def __post_init__(self):
        if len(self.subjects) == 0:
            raise DataError("dataset has no subjects")
        p = len(self.covariate_names)
        if self.covariate_names[0] != INTERCEPT:
            raise IntegrityError("first covariate must be the intercept column")
        for s in self.subjects:
            if s.covariates.size != p:
                raise IntegrityError(f"subject {s.id}: expected {p} covariate entries")
        if self.time_transform_applied not in TIME_TRANSFORMS:
            raise DataError(f"unknown time transform {self.time_transform_applied!r}")

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_obs_total(self) -> int:
        return sum(s.n_obs for s in self.subjects)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.subjects]

    @property
    def times(self) -> np.ndarray:
        return np.concatenate([s.times for s in self.subjects])

    @property
    def responses(self) -> np.ndarray:
        return np.concatenate([s.responses for s in self.subjects])

    @property
    def subject_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_subjects), [s.n_obs for s in self.subjects])

    def design_matrix(self, selection=None) -> np.ndarray:
        """N x p matrix of covariate rows; ``selection`` keeps named columns after the intercept."""
        full = np.vstack([s.covariates for s in self.subjects])
        if selection is None:
            return full
        cols = [0]
        for name in selection:
            if name not in self.covariate_names:
                raise DataError(f"covariate {name!r} not in dataset (have {list(self.covariate_names[1:])})")
            cols.append(self.covariate_names.index(name))
        return full[:, cols]

    def original_times(self, times) -> np.ndarray:
        """Map times on the modelling scale back to the units they were loaded in."""
        t = np.asarray(times, dtype=float)
        return np.exp(t) if self.time_transform_applied == "log" else t


def _parse_float(raw: str, column: str, line: int) -> float:
    try:
        v = float(raw)
    except ValueError:
        raise ParseError(f"cannot parse {column}={raw!r} as a number", line) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite {column}={raw!r}", line)
    return v


def load_dataset(path, schema: dict | None = None, units: dict | None = None) -> LongitudinalDataset:
    """Read a long-format CSV: one row per (subject, time) observation.

    ``schema`` maps roles to column names: ``id``, ``time``, ``response`` and an
    optional ``covariates`` list. Rows with an empty response are dropped and
    counted in ``dropped_rows``.
    """
    schema = {"id": "id", "time": "time", "response": "response", "covariates": [], **(schema or {})}
    id_col, time_col, resp_col = schema["id"], schema["time"], schema["response"]
    cov_cols = list(schema.get("covariates") or [])
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")

    rows: dict[str, list[tuple[float, float, tuple[float, ...], int]]] = {}
    dropped = 0
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in (id_col, time_col, resp_col, *cov_cols) if c not in header]
        if missing:
            raise ParseError(f"missing columns {missing} in header {header}", 1)
        for rec in reader:
            line = reader.line_num
            sid = (rec[id_col] or "").strip()
            if not sid:
                raise ParseError(f"empty {id_col}", line)
            raw_resp = (rec[resp_col] or "").strip()
            if raw_resp == "" or raw_resp.upper() == "NA":
                dropped += 1
                continue
            t = _parse_float((rec[time_col] or "").strip(), time_col, line)
            y = _parse_float(raw_resp, resp_col, line)
            x = tuple(_parse_float((rec[c] or "").strip(), c, line) for c in cov_cols)
            rows.setdefault(sid, []).append((t, y, x, line))

    if not rows:
        raise DataError(f"no usable rows in {path}")
    subjects = []
    for sid in sorted(rows):
        obs = sorted(rows[sid], key=lambda r: r[0])
        ts = [r[0] for r in obs]
        for a, b in zip(obs, obs[1:]):
            if a[0] == b[0]:
                raise IntegrityError(f"duplicate time {a[0]} for subject {sid} (lines {a[3]}, {b[3]})")
        covs = {r[2] for r in obs}
        if len(covs) > 1:
            raise IntegrityError(f"covariates vary within subject {sid}; only time-invariant covariates are supported")
        subjects.append(
            SubjectRecord(
                id=sid,
                times=np.array(ts),
                responses=np.array([r[1] for r in obs]),
                covariates=np.array((1.0, *obs[0][2])),
            )
        )
    return LongitudinalDataset(
        subjects=tuple(subjects),
        covariate_names=(INTERCEPT, *cov_cols),
        units=dict(units or {}),
        dropped_rows=dropped,
    )


def write_dataset(ds: LongitudinalDataset, path, time_name="time", response_name="response") -> None:
    """Long-format CSV with columns id, time, response, covariates..."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", time_name, response_name, *ds.covariate_names[1:]])
        for s in ds.subjects:
            for t, y in zip(s.times, s.responses):
                w.writerow([s.id, repr(float(t)), repr(float(y)), *(repr(float(v)) for v in s.covariates[1:])])


def apply_time_transform(ds: LongitudinalDataset, transform: str) -> LongitudinalDataset:
    if transform not in TIME_TRANSFORMS:
        raise DataError(f"unknown time transform {transform!r}")
    if transform == "none":
        return ds
    if ds.time_transform_applied == "log":
        raise DataError("log transform already applied")
    bad = [s.id for s in ds.subjects if np.any(s.times <= 0)]
    if bad:
        raise TimeDomainError(f"log transform needs positive times; offending subjects: {bad}", bad)
    subjects = tuple(replace(s, times=np.log(s.times)) for s in ds.subjects)
    units = {**ds.units, "time_scale": "log", "time_units_original": ds.units.get("time", "unspecified")}
    return replace(ds, subjects=subjects, time_transform_applied="log", units=units)


@dataclass(frozen=True)
class DescriptiveStats:
    variable: str
    min: float
    q1: float
    median: float
    mean: float
    q3: float
    max: float
    sd: float

    def row(self) -> list:
        return [self.variable, self.min, self.q1, self.median, self.mean, self.q3, self.max, self.sd]


SUMMARY_HEADER = ["Variable", "Min", "1st.Q", "Median", "Mean", "3rd.Q", "Max", "SD"]


def describe(values, name: str) -> DescriptiveStats:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise DataError("no values to summarise")
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
    sd = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return DescriptiveStats(name, float(v.min()), float(q1), float(med), float(v.mean()), float(q3), float(v.max()), sd)


def summarize_dataset(ds: LongitudinalDataset) -> list[DescriptiveStats]:
    """Pooled statistics over all observations for time, response and each covariate."""
    stats = [
        describe(ds.original_times(ds.times), ds.units.get("time_name", "time")),
        describe(ds.responses, ds.units.get("response_name", "response")),
    ]
    counts = np.array([s.n_obs for s in ds.subjects])
    X = ds.design_matrix()
    for j, name in enumerate(ds.covariate_names[1:], start=1):
        stats.append(describe(np.repeat(X[:, j], counts), name))
    return stats


def write_summary(stats: list[DescriptiveStats], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for s in stats:
            w.writerow(s.row())
