"""Day/slot time grid, calendar marks and the dense count-series container."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, GridRangeError, ShapeError, ValidationError

D_TEMP = 4
# Marks use fixed divisors for weekday/month/day so the encoding is stable across datasets.
WEEKDAY_DIV = 6.0
MONTH_DIV = 12.0
DAY_DIV = 32.0


@dataclass(frozen=True)
class SlotGrid:
    slots_per_day: int = 14
    first_hour: int = 8
    last_hour_exclusive: int = 22

    def __post_init__(self):
        if self.slots_per_day < 1:
            raise ConfigError(f"slots_per_day must be >= 1, got {self.slots_per_day}")
        if self.last_hour_exclusive - self.first_hour != self.slots_per_day:
            raise ConfigError(
                f"hours [{self.first_hour}, {self.last_hour_exclusive}) do not span "
                f"{self.slots_per_day} slots"
            )

    def hour_of_slot(self, slot: int) -> int:
        if not 0 <= slot < self.slots_per_day:
            raise GridRangeError(f"slot {slot} outside [0, {self.slots_per_day - 1}]")
        return self.first_hour + slot


def slot_of_hour(hour: int, grid: SlotGrid = SlotGrid()) -> int:
    """Map a clock hour to the slot that starts at that hour."""
    if not grid.first_hour <= hour < grid.last_hour_exclusive:
        raise GridRangeError(
            f"hour {hour} outside [{grid.first_hour}, {grid.last_hour_exclusive})"
        )
    return hour - grid.first_hour


@dataclass(frozen=True)
class CalendarMark:
    hour_norm: float
    weekday_norm: float
    month_norm: float
    day_norm: float

    def as_array(self) -> np.ndarray:
        return np.array([self.hour_norm, self.weekday_norm, self.month_norm, self.day_norm])


def _coerce_date(date) -> dt.date:
    if isinstance(date, dt.datetime):
        return date.date()
    if isinstance(date, dt.date):
        return date
    if isinstance(date, str):
        try:
            return dt.date.fromisoformat(date)
        except ValueError as exc:
            raise ValidationError(f"invalid date {date!r}: {exc}") from None
    if isinstance(date, tuple) and len(date) == 3:
        try:
            return dt.date(*date)
        except ValueError as exc:
            raise ValidationError(f"invalid date {date!r}: {exc}") from None
    raise ValidationError(f"cannot interpret {date!r} as a date")


def build_mark(date, slot: int, grid: SlotGrid = SlotGrid()) -> CalendarMark:
    date = _coerce_date(date)
    if not 0 <= slot < grid.slots_per_day:
        raise GridRangeError(f"slot {slot} outside [0, {grid.slots_per_day - 1}]")
    hour_div = max(grid.slots_per_day - 1, 1)
    return CalendarMark(
        hour_norm=slot / hour_div,
        weekday_norm=date.weekday() / WEEKDAY_DIV,
        month_norm=date.month / MONTH_DIV,
        day_norm=date.day / DAY_DIV,
    )


def marks_for_span(start_date, num_days: int, grid: SlotGrid = SlotGrid()) -> np.ndarray:
    """Stacked marks for ``num_days`` consecutive days, slot-major within day."""
    start_date = _coerce_date(start_date)
    T = grid.slots_per_day
    out = np.empty((num_days * T, D_TEMP))
    for d in range(num_days):
        day = start_date + dt.timedelta(days=d)
        for s in range(T):
            out[d * T + s] = build_mark(day, s, grid).as_array()
    return out


@dataclass(frozen=True, eq=False)
class SlotSeries:
    """Dense (day, slot, channel) count grid flattened to ``(D*T, C)``."""

    start_date: dt.date
    num_days: int
    channels: tuple[str, ...]
    values: np.ndarray
    grid: SlotGrid = field(default_factory=SlotGrid)

    def __post_init__(self):
        object.__setattr__(self, "start_date", _coerce_date(self.start_date))
        object.__setattr__(self, "channels", tuple(self.channels))
        values = np.asarray(self.values, dtype=np.float64)
        expected = (self.num_days * self.grid.slots_per_day, len(self.channels))
        if values.shape != expected:
            raise ShapeError(f"values shape {values.shape} != expected {expected}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("series contains non-finite values")
        if np.any(values < 0):
            raise ValidationError("series contains negative counts")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def end_date(self) -> dt.date:
        """Last covered date (inclusive)."""
        return self.start_date + dt.timedelta(days=self.num_days - 1)

    def day_index(self, date) -> int:
        return (_coerce_date(date) - self.start_date).days

    def date_of(self, day_index: int) -> dt.date:
        return self.start_date + dt.timedelta(days=day_index)

    def cube(self) -> np.ndarray:
        """View as ``(D, T, C)``."""
        return self.values.reshape(self.num_days, self.grid.slots_per_day, len(self.channels))

    def days(self, first: int, count: int) -> np.ndarray:
        """Rows for days ``[first, first+count)`` as ``(count*T, C)``."""
        T = self.grid.slots_per_day
        if first < 0 or first + count > self.num_days:
            raise GridRangeError(f"days [{first}, {first + count}) outside [0, {self.num_days})")
        return self.values[first * T:(first + count) * T]

    def window(self, first: int, count: int) -> "SlotSeries":
        """Sub-series covering days ``[first, first+count)``."""
        return SlotSeries(self.date_of(first), count, self.channels, self.days(first, count),
                          self.grid)

    def daily_totals(self) -> np.ndarray:
        """Sum over slots and channels, one value per day."""
        return self.cube().sum(axis=(1, 2))

    def channel(self, name: str) -> np.ndarray:
        return self.values[:, self.channels.index(name)]

    def total(self, label: str = "Total") -> "SlotSeries":
        return SlotSeries(self.start_date, self.num_days, (label,),
                          self.values.sum(axis=1, keepdims=True), self.grid)

    def select(self, channels: Sequence[str]) -> "SlotSeries":
        idx = [self.channels.index(c) for c in channels]
        return SlotSeries(self.start_date, self.num_days, tuple(channels),
                          self.values[:, idx], self.grid)

    def dates(self) -> list[dt.date]:
        return [self.date_of(i) for i in range(self.num_days)]
