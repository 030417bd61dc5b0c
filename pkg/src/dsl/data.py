"""Observed-data containers, time grids, fold assignment and Kaplan-Meier."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np


class DataValidationError(ValueError):
    """Raised when observed data violate a structural invariant."""


@dataclass(frozen=True)
class SubjectRecord:
    """One observed subject: follow-up ``u``, event flag ``delta``, covariates ``x``, arm ``w``."""

    u: float
    delta: int
    x: tuple
    w: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented, validated collection of subject records.

    Build through :func:`validate_dataset` or :meth:`Dataset.from_arrays`; both
    enforce the same invariants. Arrays are made read-only so a dataset can be
    shared between folds and worker processes without copying.
    """

    u: np.ndarray
    delta: np.ndarray
    x: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        for name in ("u", "delta", "x", "w"):
            getattr(self, name).setflags(write=False)

    @classmethod
    def from_arrays(cls, u, delta, x, w) -> "Dataset":
        u = np.asarray(u, dtype=float)
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        delta = np.asarray(delta)
        w = np.asarray(w)
        n = u.shape[0]
        if n == 0:
            raise DataValidationError("empty input: at least one record is required")
        if x.shape[0] != n or delta.shape[0] != n or w.shape[0] != n:
            raise DataValidationError("column lengths differ")
        _check_columns(u, delta, w, x)
        return cls(u.copy(), delta.astype(np.int8), x.copy(), w.astype(np.int8))

    @property
    def n(self) -> int:
        return self.u.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def records(self) -> list[SubjectRecord]:
        return [
            SubjectRecord(float(self.u[i]), int(self.delta[i]), tuple(self.x[i]), int(self.w[i]))
            for i in range(self.n)
        ]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.u[index].copy(), self.delta[index].copy(),
                       self.x[index].copy(), self.w[index].copy())

    def arm(self, w: int) -> "Dataset":
        return self.subset(np.flatnonzero(self.w == w))

    def __len__(self):
        return self.n

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("u", "delta", "x", "w"))

    __hash__ = None


def _check_columns(u, delta, w, x):
    bad = np.flatnonzero(~np.isfinite(u))
    if bad.size:
        raise DataValidationError(f"non-finite follow-up at index {bad[0]}")
    bad = np.flatnonzero(u < 0)
    if bad.size:
        raise DataValidationError(f"negative follow-up at index {bad[0]}")
    bad = np.flatnonzero((delta != 0) & (delta != 1))
    if bad.size:
        raise DataValidationError(f"event indicator not binary at index {bad[0]}")
    bad = np.flatnonzero((w != 0) & (w != 1))
    if bad.size:
        raise DataValidationError(f"treatment not binary at index {bad[0]}")
    bad = np.flatnonzero(~np.isfinite(x).all(axis=1))
    if bad.size:
        raise DataValidationError(f"non-finite covariate at index {bad[0]}")


def validate_dataset(raw_records: Sequence[SubjectRecord], d: int) -> Dataset:
    """Validate raw records against dimension ``d`` and pack them into a :class:`Dataset`.

    Errors name the first offending record index.
    """
    if d < 1:
        raise DataValidationError("covariate dimension must be positive")
    if len(raw_records) == 0:
        raise DataValidationError("empty input: at least one record is required")
    for i, rec in enumerate(raw_records):
        if len(rec.x) != d:
            raise DataValidationError(f"dimension mismatch at index {i}: expected {d}, got {len(rec.x)}")
    u = np.array([r.u for r in raw_records], dtype=float)
    delta = np.array([r.delta for r in raw_records])
    w = np.array([r.w for r in raw_records])
    x = np.array([r.x for r in raw_records], dtype=float).reshape(len(raw_records), d)
    _check_columns(u, delta, w, x)
    return Dataset(u, delta.astype(np.int8), x, w.astype(np.int8))


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing, strictly positive evaluation times."""

    times: np.ndarray

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.times, dtype=float)).copy()
        if t.ndim != 1 or t.size == 0:
            raise ValueError("time grid needs at least one time point")
        if not np.all(np.isfinite(t)) or np.any(t <= 0):
            raise ValueError("time grid points must be finite and strictly positive")
        if np.any(np.diff(t) <= 0):
            raise ValueError("time grid must be strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    @property
    def j(self) -> int:
        return self.times.size

    @property
    def t_min(self) -> float:
        return float(self.times[0])

    @property
    def t_max(self) -> float:
        return float(self.times[-1])

    def __len__(self):
        return self.j

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.times, other.times)

    __hash__ = None


def build_time_grid(dataset: Dataset, j: int, q_lo: float = 0.2, q_hi: float = 0.8) -> TimeGrid:
    """Equally spaced grid between two empirical quantiles of the pooled follow-up times.

    Quantiles interpolate linearly between order statistics. With ``j == 1`` the
    quantile bounds are ignored and the single grid point is the median.
    """
    if j < 1:
        raise ValueError("j must be at least 1")
    if not 0 < q_lo < q_hi < 1:
        raise ValueError("need 0 < q_lo < q_hi < 1")
    u = dataset.u
    if u.size == 0:
        raise ValueError("dataset is empty")
    if np.all(u == u[0]):
        raise ValueError("degenerate follow-up: all observed times are identical")
    if j == 1:
        return TimeGrid(np.array([np.quantile(u, 0.5)]))
    lo, hi = np.quantile(u, [q_lo, q_hi])
    if not hi > lo:
        raise ValueError(f"degenerate follow-up: quantiles {q_lo} and {q_hi} coincide")
    return TimeGrid(np.linspace(lo, hi, j))


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    """``fold_of[i]`` is the 0-based fold holding record ``i``."""

    fold_of: np.ndarray
    k: int

    def __post_init__(self):
        self.fold_of.setflags(write=False)

    def members(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == fold)

    def complement(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != fold)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.fold_of, minlength=self.k)


def assign_folds(n: int, k: int, seed: int) -> FoldAssignment:
    """Random partition of ``range(n)`` into ``k`` folds whose sizes differ by at most one."""
    if k < 2:
        raise ValueError("need at least 2 folds")
    if k > n:
        raise ValueError(f"cannot split {n} records into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[perm] = np.arange(n) % k
    return FoldAssignment(fold_of, k)


@dataclass(frozen=True, eq=False)
class StepFunction:
    """Right-continuous step function.

    ``f(t) = value_before_first`` for ``t < knots[0]`` and ``values[i]`` on
    ``[knots[i], knots[i+1])``.
    """

    knots: np.ndarray
    values: np.ndarray
    value_before_first: float = 0.0

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if knots.shape != values.shape or knots.ndim != 1:
            raise ValueError("knots and values must be 1-D arrays of equal length")
        if np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        knots.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        pos = np.searchsorted(self.knots, t, side="right") - 1
        table = np.concatenate([[self.value_before_first], self.values])
        return table[pos + 1]


def kaplan_meier(dataset: Dataset, arm: Optional[int] = None) -> StepFunction:
    """Product-limit survival estimate, optionally within one treatment arm.

    At tied times events are counted before censorings, so subjects censored
    at an event time are still in that time's risk set.
    """
    if arm is not None:
        dataset_u = dataset.u[dataset.w == arm]
        dataset_delta = dataset.delta[dataset.w == arm]
    else:
        dataset_u, dataset_delta = dataset.u, dataset.delta
    if dataset_u.size == 0:
        raise ValueError(f"no records in arm {arm}")
    times, inverse = np.unique(dataset_u, return_inverse=True)
    events = np.bincount(inverse, weights=dataset_delta, minlength=times.size)
    removed = np.bincount(inverse, minlength=times.size)
    at_risk = dataset_u.size - np.concatenate([[0], np.cumsum(removed)[:-1]])
    has_event = events > 0
    factors = 1.0 - events[has_event] / at_risk[has_event]
    return StepFunction(times[has_event], np.cumprod(factors), 1.0)


# --- CSV ingestion -----------------------------------------------------------

CSV_FIXED_COLUMNS = ("time", "event", "treatment")


@dataclass(frozen=True)
class CsvTable:
    """Parsed CSV: raw covariate matrix (NaN for missing cells) plus column names."""

    time: np.ndarray
    event: np.ndarray
    treatment: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple = field(default_factory=tuple)

    def imputed(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean-impute missing covariate cells; returns ``(x, column_means)``."""
        x = self.covariates.copy()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # all-missing column, reported below
            means = np.nanmean(x, axis=0)
        empty = np.flatnonzero(np.isnan(means))
        if empty.size:
            raise DataValidationError(f"covariate column {self.covariate_names[empty[0]]!r} has no observed values")
        rows, cols = np.nonzero(np.isnan(x))
        x[rows, cols] = means[cols]
        return x, means

    def to_dataset(self) -> Dataset:
        x, _ = self.imputed()
        return Dataset.from_arrays(self.time, self.event, x, self.treatment)


def read_csv(path) -> CsvTable:
    """Read ``time,event,treatment,x1,...,xd``; empty covariate cells become NaN."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataValidationError(f"{path}: empty file") from None
        if tuple(header[:3]) != CSV_FIXED_COLUMNS or len(header) < 4:
            raise DataValidationError(
                f"{path}: header must start with time,event,treatment and name at least one covariate")
        rows = [row for row in reader if row]
    if not rows:
        raise DataValidationError(f"{path}: no data rows")
    n, d = len(rows), len(header) - 3
    time = np.empty(n)
    event = np.empty(n, dtype=np.int64)
    treat = np.empty(n, dtype=np.int64)
    x = np.empty((n, d))
    for i, row in enumerate(rows):
        if len(row) != d + 3:
            raise DataValidationError(f"{path}: row {i} has {len(row)} fields, expected {d + 3}")
        try:
            time[i] = float(row[0])
            event[i] = _parse_flag(row[1])
            treat[i] = _parse_flag(row[2])
            x[i] = [math.nan if cell.strip() == "" else float(cell) for cell in row[3:]]
        except ValueError as exc:
            raise DataValidationError(f"{path}: malformed value in row {i}: {exc}") from None
    _check_columns(time, event, treat, np.nan_to_num(x))
    return CsvTable(time, event, treat, x, tuple(header[3:]))


def _parse_flag(cell: str) -> int:
    value = float(cell)
    if value != int(value):
        raise ValueError(f"expected 0/1, got {cell!r}")
    return int(value)


def write_csv(dataset: Dataset, path, covariate_names: Optional[Iterable[str]] = None) -> None:
    names = list(covariate_names) if covariate_names is not None else [f"x{k + 1}" for k in range(dataset.d)]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(CSV_FIXED_COLUMNS) + names)
        for i in range(dataset.n):
            writer.writerow([repr(float(dataset.u[i])), int(dataset.delta[i]), int(dataset.w[i])]
                            + [repr(float(v)) for v in dataset.x[i]])
