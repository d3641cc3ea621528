"""CSV loaders/writers, forecast windowing, chronological split and standardisation."""

from __future__ import annotations

import csv
import datetime as dt
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (DuplicateKeyError, ParseError, ShapeError, SplitError,
                     ValidationError, WindowError)
from .synthgen import ReservationLog, cumulative_by_lead
from .timegrid import D_TEMP, SlotGrid, SlotSeries, _coerce_date, marks_for_span

DEFAULT_GATES = ("East", "West")
ENTRANCE_HEADER = ["date", "slot", "gate", "count"]
RESERVATION_HEADER = ["booking_date", "target_date", "slot", "gate", "delta"]
TOTAL = "Total"


# --------------------------------------------------------------------------- CSV


def _parse_date(text: str, line: int) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise ParseError(f"bad date {text!r}", line) from None


def _parse_int(text: str, what: str, line: int) -> int:
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"bad {what} {text!r}", line) from None


def _read_rows(path, header: list[str]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first != header:
            raise ParseError(f"expected header {','.join(header)}, got {first}", 1)
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", reader.line_num)
            yield reader.line_num, row


def load_entrance_csv(path, grid: SlotGrid = SlotGrid(), gates: Sequence[str] = DEFAULT_GATES,
                      start_date=None, num_days: int | None = None) -> SlotSeries:
    """Read ``date,slot,gate,count`` rows into a dense series.

    Missing (date, slot, gate) cells are zero.  The span is ``[min_date, max_date]``
    unless ``start_date``/``num_days`` declare it explicitly.
    """
    gates = tuple(gates)
    records: dict[tuple[dt.date, int, int], int] = {}
    for line, (d, s, g, c) in _read_rows(path, ENTRANCE_HEADER):
        date = _parse_date(d, line)
        slot = _parse_int(s, "slot", line)
        if not 0 <= slot < grid.slots_per_day:
            raise ParseError(f"slot {slot} outside [0, {grid.slots_per_day - 1}]", line)
        if g not in gates:
            raise ParseError(f"unknown gate {g!r}", line)
        count = _parse_int(c, "count", line)
        if count < 0:
            raise ValidationError(f"line {line}: negative count {count}")
        key = (date, slot, gates.index(g))
        if key in records:
            raise DuplicateKeyError(f"duplicate row for {date} slot {slot} gate {g}", line)
        records[key] = count

    if start_date is None:
        if not records:
            raise ParseError("empty entrance file and no declared span")
        start_date = min(k[0] for k in records)
    start_date = _coerce_date(start_date)
    if num_days is None:
        num_days = (max(k[0] for k in records) - start_date).days + 1
    values = np.zeros((num_days, grid.slots_per_day, len(gates)))
    for (date, slot, gate), count in records.items():
        day = (date - start_date).days
        if not 0 <= day < num_days:
            raise ValidationError(f"row date {date} outside declared span")
        values[day, slot, gate] = count
    return SlotSeries(start_date, num_days, gates,
                      values.reshape(num_days * grid.slots_per_day, len(gates)), grid)


def write_entrance_csv(series: SlotSeries, path) -> None:
    cube = series.cube()
    if np.any(cube != np.round(cube)):
        raise ValidationError("entrance counts must be integers to be written")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ENTRANCE_HEADER)
        for d in range(series.num_days):
            day = series.date_of(d).isoformat()
            for s in range(series.grid.slots_per_day):
                for g, gate in enumerate(series.channels):
                    w.writerow([day, s, gate, int(cube[d, s, g])])


def load_reservation_csv(path, grid: SlotGrid = SlotGrid(),
                         gates: Sequence[str] = DEFAULT_GATES) -> ReservationLog:
    gates = tuple(gates)
    cols: list[list] = [[], [], [], [], []]
    for line, (b, t, s, g, d) in _read_rows(path, RESERVATION_HEADER):
        slot = _parse_int(s, "slot", line)
        if not 0 <= slot < grid.slots_per_day:
            raise ParseError(f"slot {slot} outside [0, {grid.slots_per_day - 1}]", line)
        if g not in gates:
            raise ParseError(f"unknown gate {g!r}", line)
        for col, val in zip(cols, (_parse_date(b, line), _parse_date(t, line), slot,
                                   gates.index(g), _parse_int(d, "delta", line))):
            col.append(val)
    if not cols[0]:
        return ReservationLog.empty(gates)
    return ReservationLog(gates, np.array(cols[0], dtype="datetime64[D]"),
                          np.array(cols[1], dtype="datetime64[D]"), cols[2], cols[3], cols[4])


def write_reservation_csv(log: ReservationLog, path) -> None:
    booking = np.datetime_as_string(log.booking, unit="D")
    target = np.datetime_as_string(log.target, unit="D")
    gate = np.asarray(log.gates, dtype=object)[log.gate]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESERVATION_HEADER)
        w.writerows(zip(booking.tolist(), target.tolist(), log.slot.tolist(), gate.tolist(),
                        log.delta.tolist()))


def load_data_dir(data_dir, grid: SlotGrid = SlotGrid(),
                  gates: Sequence[str] = DEFAULT_GATES) -> tuple[SlotSeries, ReservationLog]:
    data_dir = Path(data_dir)
    return (load_entrance_csv(data_dir / "entrance.csv", grid, gates),
            load_reservation_csv(data_dir / "reservations.csv", grid, gates))


# --------------------------------------------------------------------- windowing


@dataclass(frozen=True)
class WindowSpec:
    input_days: int = 7
    horizon_days: int = 5
    out_channels: int = 2
    res_feature_lags: tuple[int, ...] = (0, 1)
    grid: SlotGrid = field(default_factory=SlotGrid)

    def __post_init__(self):
        object.__setattr__(self, "res_feature_lags", tuple(int(v) for v in self.res_feature_lags))
        if self.input_days < 1 or self.horizon_days < 1:
            raise WindowError("input_days and horizon_days must be >= 1")
        if self.out_channels not in (1, 2):
            raise WindowError(f"out_channels must be 1 or 2, got {self.out_channels}")
        if not self.res_feature_lags or min(self.res_feature_lags) < 0:
            raise WindowError("res_feature_lags must be non-empty and nonnegative")

    @property
    def enc_len(self) -> int:
        return self.input_days * self.grid.slots_per_day

    @property
    def dec_len(self) -> int:
        return self.horizon_days * self.grid.slots_per_day

    @property
    def c_real(self) -> int:
        return self.out_channels

    @property
    def c_res(self) -> int:
        return self.out_channels * len(self.res_feature_lags)

    def channel_names(self, gates: Sequence[str] = DEFAULT_GATES) -> tuple[str, ...]:
        if self.out_channels == 1:
            return (TOTAL,)
        if len(gates) != 2:
            raise ShapeError(f"two-channel setting needs two gates, got {gates}")
        return tuple(gates)


@dataclass(frozen=True, eq=False)
class ForecastSample:
    """One encoder/decoder window.  All value blocks are in raw count units.

    ``x_dec`` columns are channel-major: for each output channel, one column per
    entry of ``res_feature_lags``.  ``res_as_of`` records the snapshot date behind
    each lag column; ``y`` is ``None`` for inference samples.
    """

    issue_date: dt.date
    x_enc: np.ndarray
    x_enc_mark: np.ndarray
    x_dec: np.ndarray
    x_dec_mark: np.ndarray
    y: np.ndarray | None
    res_as_of: tuple[dt.date, ...] = ()

    slots_per_day: int = 14

    @property
    def enc_dates(self) -> tuple[dt.date, dt.date]:
        """First and last date covered by the encoder block."""
        n = self.x_enc.shape[0] // self.slots_per_day
        return self.issue_date - dt.timedelta(days=n - 1), self.issue_date

    @property
    def target_dates(self) -> list[dt.date]:
        n = self.x_dec.shape[0] // self.slots_per_day
        return [self.issue_date + dt.timedelta(days=k + 1) for k in range(n)]


class _Windower:
    """Shared machinery for training and inference windows over one dataset."""

    def __init__(self, entrance: SlotSeries, reservations: ReservationLog, spec: WindowSpec,
                 extra_days: int = 0):
        if entrance.grid != spec.grid:
            raise ShapeError("entrance grid does not match window spec grid")
        if reservations.gates != entrance.channels:
            raise ShapeError(f"reservation gates {reservations.gates} != entrance channels "
                             f"{entrance.channels}")
        self.entrance = entrance
        self.spec = spec
        T = spec.grid.slots_per_day
        self.span_days = entrance.num_days + extra_days
        max_lead = spec.horizon_days + max(spec.res_feature_lags)
        cum = cumulative_by_lead(reservations, entrance.start_date, self.span_days, max_lead, spec.grid)
        ent = entrance.cube()
        if spec.out_channels == 1:
            cum = cum.sum(axis=2, keepdims=True)
            ent = ent.sum(axis=2, keepdims=True)
        self.cum = cum  # (span, T, C, lead)
        self.ent = ent  # (D, T, C)
        self.marks = marks_for_span(entrance.start_date, self.span_days, spec.grid).reshape(
            self.span_days, T, D_TEMP)

    def sample(self, i: int, with_target: bool = True) -> ForecastSample:
        spec, T = self.spec, self.spec.grid.slots_per_day
        D_in, D_out, C = spec.input_days, spec.horizon_days, spec.out_channels
        x_enc = self.ent[i - D_in + 1:i + 1].reshape(D_in * T, C)
        targets = np.arange(i + 1, i + D_out + 1)
        leads = targets - i  # days between issue date and each target
        cols = []
        for c in range(C):
            for lag in spec.res_feature_lags:
                block = self.cum[targets, :, c, :][np.arange(D_out), :, leads + lag]
                cols.append(block.reshape(D_out * T))
        x_dec = np.stack(cols, axis=1)
        y = self.ent[i + 1:i + D_out + 1].reshape(D_out * T, C) if with_target else None
        issue = self.entrance.date_of(i)
        return ForecastSample(
            issue_date=issue,
            x_enc=x_enc,
            x_enc_mark=self.marks[i - D_in + 1:i + 1].reshape(D_in * T, D_TEMP),
            x_dec=x_dec,
            x_dec_mark=self.marks[i + 1:i + D_out + 1].reshape(D_out * T, D_TEMP),
            y=y,
            res_as_of=tuple(issue - dt.timedelta(days=lag) for lag in spec.res_feature_lags),
            slots_per_day=T,
        )


def build_samples(entrance: SlotSeries, reservations: ReservationLog,
                  spec: WindowSpec) -> list[ForecastSample]:
    """Every window with full encoder context and full target, by issue date."""
    N = entrance.num_days
    need = spec.input_days + spec.horizon_days
    if N < need:
        raise WindowError(f"span of {N} days is shorter than input+horizon = {need} days")
    win = _Windower(entrance, reservations, spec)
    return [win.sample(i) for i in range(spec.input_days - 1, N - spec.horizon_days)]


def build_inference_sample(entrance: SlotSeries, reservations: ReservationLog,
                           spec: WindowSpec, issue_date) -> ForecastSample:
    """Window issued on ``issue_date``; targets may run past the entrance span."""
    i = entrance.day_index(issue_date)
    if i < spec.input_days - 1 or i >= entrance.num_days:
        raise WindowError(
            f"issue date {_coerce_date(issue_date)} needs {spec.input_days} days of history "
            f"within [{entrance.start_date}, {entrance.end_date}]")
    extra = max(0, i + spec.horizon_days + 1 - entrance.num_days)
    win = _Windower(entrance, reservations, spec, extra_days=extra)
    has_target = i + spec.horizon_days < entrance.num_days
    return win.sample(i, with_target=has_target)


def chrono_split(samples: Sequence[ForecastSample],
                 train_fraction: float = 0.8) -> tuple[list[ForecastSample], list[ForecastSample]]:
    """Chronological split; train windows whose targets overlap the test span are purged."""
    if not 0 < train_fraction < 1:
        raise SplitError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(samples)
    n_train = int(np.floor(n * train_fraction))
    if n_train == 0 or n_train == n:
        raise SplitError(f"{n} samples at fraction {train_fraction} leaves one side empty")
    train, test = list(samples[:n_train]), list(samples[n_train:])
    first_test_target = test[0].issue_date + dt.timedelta(days=1)
    train = [s for s in train if s.target_dates[-1] < first_test_target]
    if not train:
        raise SplitError("purging overlapping targets left no training samples")
    return train, test


# ----------------------------------------------------------------- standardiser


@dataclass
class _Moments:
    mean: np.ndarray
    std: np.ndarray
    keep: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        z = (x - self.mean) / np.where(self.keep, self.std, 1.0)
        return np.where(self.keep, z, 0.0)

    def invert(self, z: np.ndarray) -> np.ndarray:
        return np.where(self.keep, z * self.std + self.mean, self.mean)

    @classmethod
    def fit(cls, x: np.ndarray, name: str) -> "_Moments":
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        keep = std > 1e-12 * np.maximum(1.0, np.abs(mean))
        for c in np.flatnonzero(~keep):
            warnings.warn(f"{name} channel {c} has zero variance on the training span; "
                          "it is dropped (standardised to 0)", stacklevel=3)
        return cls(mean, np.where(keep, std, 1.0), keep)


@dataclass
class Standardizer:
    """Per-channel z-scoring of encoder and decoder value blocks (marks untouched)."""

    enc: _Moments
    dec: _Moments

    def apply_enc(self, x: np.ndarray) -> np.ndarray:
        return self.enc.apply(x)

    def apply_dec(self, x: np.ndarray) -> np.ndarray:
        return self.dec.apply(x)

    def invert_enc(self, z: np.ndarray) -> np.ndarray:
        return self.enc.invert(z)

    def invert_dec(self, z: np.ndarray) -> np.ndarray:
        return self.dec.invert(z)

    def to_dict(self) -> dict:
        return {part: {k: getattr(getattr(self, part), k).tolist() for k in ("mean", "std", "keep")}
                for part in ("enc", "dec")}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        def mk(p):
            return _Moments(np.asarray(p["mean"], dtype=np.float64),
                            np.asarray(p["std"], dtype=np.float64),
                            np.asarray(p["keep"], dtype=bool))
        return cls(mk(d["enc"]), mk(d["dec"]))


def fit_standardizer(train: Sequence[ForecastSample]) -> Standardizer:
    if not train:
        raise ValueError("cannot fit a standardizer on an empty training set")
    return Standardizer(
        enc=_Moments.fit(np.concatenate([s.x_enc for s in train]), "encoder"),
        dec=_Moments.fit(np.concatenate([s.x_dec for s in train]), "decoder"),
    )
