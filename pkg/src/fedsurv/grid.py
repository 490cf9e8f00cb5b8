"""Discrete time grid and indicator-vector targets for right-censored records."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InvalidRecordError(ValueError):
    """A record violates the domain contract (e.g. negative observed time)."""


@dataclass(frozen=True)
class TimeGrid:
    """Ordered interval boundaries tau_0 = 0 < tau_1 < ... < tau_T (months).

    Interval l (1-based) covers [tau_{l-1}, tau_l).
    """

    boundaries: tuple[float, ...]

    def __post_init__(self) -> None:
        b = np.asarray(self.boundaries, dtype=float)
        if b.ndim != 1 or b.size < 2:
            raise ValueError("grid needs at least two boundaries")
        if b[0] != 0.0:
            raise ValueError("grid must start at 0")
        if not np.all(np.diff(b) > 0):
            raise ValueError("boundaries must be strictly increasing")
        object.__setattr__(self, "boundaries", tuple(float(x) for x in b))

    @classmethod
    def monthly(cls, n_intervals: int, width: float = 1.0) -> "TimeGrid":
        """Equal-width grid of n_intervals intervals starting at 0."""
        if n_intervals < 1:
            raise ValueError("need at least one interval")
        return cls(tuple(width * i for i in range(n_intervals + 1)))

    @property
    def n_intervals(self) -> int:
        return len(self.boundaries) - 1

    @property
    def horizon(self) -> float:
        return self.boundaries[-1]

    def midpoints(self) -> np.ndarray:
        b = np.asarray(self.boundaries)
        return (b[:-1] + b[1:]) / 2.0

    def interval_of(self, t: float) -> int:
        """1-based interval index containing t; boundaries belong to the
        following interval (tau_{l-1} <= t < tau_l). Times at or past the
        horizon map to n_intervals + 1."""
        return int(np.searchsorted(self.boundaries, t, side="right"))


@dataclass(frozen=True)
class SurvivalRecord:
    """One subject: covariates, observed time (event or censoring), event flag."""

    covariates: np.ndarray
    time: float
    event: int

    def __post_init__(self) -> None:
        x = np.asarray(self.covariates, dtype=float)
        if x.ndim != 1:
            raise InvalidRecordError("covariates must be a 1-d vector")
        if not np.all(np.isfinite(x)):
            raise InvalidRecordError("covariates must be finite")
        if not np.isfinite(self.time) or self.time < 0:
            raise InvalidRecordError(f"observed time must be >= 0, got {self.time}")
        if self.event not in (0, 1):
            raise InvalidRecordError(f"event flag must be 0 or 1, got {self.event}")
        object.__setattr__(self, "covariates", x)


@dataclass(frozen=True)
class DiscretizedTarget:
    """Indicator vectors over the grid: survived[l] marks surviving interval
    l+1, failed[l] marks the (single) failure interval."""

    survived: np.ndarray
    failed: np.ndarray

    def __post_init__(self) -> None:
        s = np.asarray(self.survived, dtype=np.int8)
        f = np.asarray(self.failed, dtype=np.int8)
        if s.shape != f.shape or s.ndim != 1:
            raise ValueError("indicator vectors must be 1-d and same length")
        object.__setattr__(self, "survived", s)
        object.__setattr__(self, "failed", f)

    def validate(self) -> None:
        s, f = self.survived, self.failed
        if f.sum() not in (0, 1):
            raise ValueError("at most one failure interval")
        ones = int(s.sum())
        if not np.all(s[:ones] == 1):
            raise ValueError("survival indicators must be a prefix of ones")
        if f.sum() == 1:
            j = int(np.argmax(f))
            if ones != j:
                raise ValueError("failure bit must follow the survived prefix")


def discretize(record: SurvivalRecord, grid: TimeGrid) -> DiscretizedTarget:
    """Build the indicator-vector target for one record.

    Uncensored records fail in the interval containing their time; a time on
    a boundary belongs to the following interval, and an event at the horizon
    is clamped into the last interval. Events strictly past the horizon are
    outside the observation window and become censored at the horizon.
    Censored records survive interval l iff the time reaches the interval
    midpoint.
    """
    if record.time < 0:
        raise InvalidRecordError("negative observed time")
    s, f = _discretize_arrays(
        np.asarray([record.time]), np.asarray([record.event]), grid
    )
    return DiscretizedTarget(s[0], f[0])


def discretize_dataset(
    times: np.ndarray, events: np.ndarray, grid: TimeGrid
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised discretize over a dataset: returns (survived, failed),
    each of shape (n, T)."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events)
    if np.any(times < 0) or not np.all(np.isfinite(times)):
        raise InvalidRecordError("observed times must be finite and >= 0")
    return _discretize_arrays(times, events, grid)


def _discretize_arrays(
    times: np.ndarray, events: np.ndarray, grid: TimeGrid
) -> tuple[np.ndarray, np.ndarray]:
    n = times.shape[0]
    n_int = grid.n_intervals
    bounds = np.asarray(grid.boundaries)
    survived = np.zeros((n, n_int), dtype=np.int8)
    failed = np.zeros((n, n_int), dtype=np.int8)

    is_event = np.asarray(events, dtype=bool) & (times <= grid.horizon)
    censored = ~is_event  # includes events past the window, relabelled

    if np.any(is_event):
        t_ev = times[is_event]
        # interval index, boundary ties go right; clamp horizon hits into T
        idx = np.searchsorted(bounds, t_ev, side="right")
        idx = np.minimum(idx, n_int)
        cols = np.arange(1, n_int + 1)
        survived[is_event] = (cols[None, :] < idx[:, None]).astype(np.int8)
        failed[is_event, idx - 1] = 1

    if np.any(censored):
        mids = grid.midpoints()
        survived[censored] = (times[censored][:, None] >= mids[None, :]).astype(np.int8)

    return survived, failed
