"""Series containers, CSV ingestion, log transforms and time grids.

Times are measured in years. Daily market data uses ``dt = 1/252``;
the first grid point is ``dt`` rather than zero because Brownian-type
kernels are degenerate at the origin.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from datetime import date, datetime
from pathlib import Path

import numpy as np

TRADING_DAYS = 252
MINUTES_PER_YEAR = 365 * 24 * 60
DAILY_DT = 1.0 / TRADING_DAYS


class SeriesError(ValueError):
    """Raised for malformed series input."""


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def minutes_dt(interval_minutes: float) -> float:
    """Step size in years for data sampled every ``interval_minutes``."""
    return interval_minutes / MINUTES_PER_YEAR


@dataclass(frozen=True)
class TimeSeries:
    times: np.ndarray
    values: np.ndarray
    dt: float = DAILY_DT
    label: str = ""
    log_applied: bool = False
    shift: float = 0.0

    def __post_init__(self):
        times = _frozen(self.times)
        values = _frozen(self.values)
        if times.ndim != 1 or times.shape != values.shape:
            raise SeriesError("times and values must be 1-d arrays of equal length")
        if len(times) < 1:
            raise SeriesError("series must contain at least one point")
        if np.any(np.diff(times) <= 0):
            raise SeriesError("times must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise SeriesError("values must be finite")
        if self.dt <= 0:
            raise SeriesError("dt must be positive")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)

    def to_raw(self) -> "TimeSeries":
        """Undo :func:`to_log`; a no-op for raw series."""
        if not self.log_applied:
            return self
        return replace(self, values=np.exp(self.values) - self.shift,
                       log_applied=False, shift=0.0)

    def head(self, n: int) -> "TimeSeries":
        return replace(self, times=self.times[:n], values=self.values[:n])


@dataclass(frozen=True)
class ReturnSeries:
    """Log returns; ``times[i]`` is the right endpoint of interval ``i``."""

    times: np.ndarray
    returns: np.ndarray
    dt: float

    def __post_init__(self):
        object.__setattr__(self, "times", _frozen(self.times))
        object.__setattr__(self, "returns", _frozen(self.returns))
        if not np.all(np.isfinite(self.returns)):
            raise SeriesError("returns must be finite")

    def __len__(self) -> int:
        return len(self.returns)


@dataclass(frozen=True)
class TimeGrid:
    n: int
    dt: float
    times: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.dt <= 0:
            raise SeriesError(f"dt must be positive, got {self.dt}")
        if self.n < 0:
            raise SeriesError(f"n must be nonnegative, got {self.n}")
        object.__setattr__(self, "times", _frozen(self.dt * np.arange(1, self.n + 1)))

    def __len__(self) -> int:
        return self.n


def make_grid(n: int, dt: float) -> TimeGrid:
    return TimeGrid(int(n), float(dt))


def _parse_time(cell: str):
    try:
        return float(cell)
    except ValueError:
        pass
    try:
        return datetime.fromisoformat(cell)
    except ValueError:
        return date.fromisoformat(cell)


def load_series(path, time_col: str = "time", value_col: str = "value",
                dt: float = DAILY_DT, label: str | None = None) -> TimeSeries:
    """Read a two-column series from a CSV file with a header row.

    Numeric time stamps must be evenly spaced. ISO-8601 dates only need to
    be strictly increasing: a trading calendar skips weekends, so each row
    is one step of ``dt``. Returned times are ``dt, 2 dt, ...``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing file: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in (time_col, value_col):
            if col not in header:
                raise SeriesError(f"missing column {col!r} in {path}")
        stamps, values = [], []
        for k, row in enumerate(reader, start=1):
            try:
                stamps.append(_parse_time(row[time_col].strip()))
                v = float(row[value_col])
            except (ValueError, TypeError, AttributeError):
                raise SeriesError(f"unparsable cell at row {k}") from None
            if not math.isfinite(v):
                raise SeriesError(f"unparsable cell at row {k}")
            values.append(v)
    if not values:
        raise SeriesError(f"no data rows in {path}")
    kinds = {isinstance(s, float) for s in stamps}
    if len(kinds) > 1:
        raise SeriesError("time column mixes numbers and dates")
    for k in range(1, len(stamps)):
        if stamps[k] == stamps[k - 1]:
            raise SeriesError(f"duplicate timestamp at row {k + 1}")
        if stamps[k] < stamps[k - 1]:
            raise SeriesError(f"non-monotone timestamp at row {k + 1}")
    if isinstance(stamps[0], float) and len(stamps) > 2:
        steps = np.diff(np.asarray(stamps))
        if np.max(np.abs(steps - steps[0])) > 1e-6 * abs(steps[0]):
            raise SeriesError("time stamps are not evenly spaced")
    grid = make_grid(len(values), dt)
    return TimeSeries(grid.times, np.asarray(values), dt=dt, label=label or path.stem)


def load_panel(path, time_col: str = "time", value_cols=(), dt: float = DAILY_DT) -> list:
    """One :class:`TimeSeries` per value column of a shared-time CSV."""
    value_cols = list(value_cols)
    if not value_cols:
        raise SeriesError("a panel needs at least one value column")
    return [load_series(path, time_col, col, dt, label=col) for col in value_cols]


def to_log(series: TimeSeries, shift: float = 0.0) -> TimeSeries:
    """Return ``log(values + shift)``; the wind-speed convention uses ``shift=1``."""
    if shift < 0:
        raise SeriesError("shift must be nonnegative")
    if series.log_applied:
        raise SeriesError("series is already in log space")
    shifted = series.values + shift
    if np.min(shifted) <= 0:
        raise SeriesError("nonpositive shifted value; cannot take log")
    return replace(series, values=np.log(shifted), log_applied=True, shift=float(shift))


def log_returns(series: TimeSeries) -> ReturnSeries:
    if series.log_applied:
        raise SeriesError("log_returns expects a raw series")
    if len(series) < 2:
        raise SeriesError("need at least two points to form returns")
    if np.min(series.values) <= 0:
        raise SeriesError("nonpositive raw value")
    steps = np.diff(series.times)
    if np.max(np.abs(steps - series.dt)) > 1e-9 * series.dt * len(series):
        raise SeriesError("series is not uniformly spaced")
    logs = np.log(series.values)
    return ReturnSeries(series.times[1:], np.diff(logs), series.dt)
