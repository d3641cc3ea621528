"""Synthetic attendance and multi-update reservation streams.

The generator stands in for a proprietary entrance/reservation dataset.  Attendance
has weekly periodicity, a linear trend, shock days and lognormal day noise; the
reservation log is built per attendee so that cumulative bookings approach the
realised attendance as the visit day nears.

All sampling goes through one ``numpy.random.Generator`` (PCG64) seeded from the
config.  The only floating transcendentals in the sampling path are the ones
inside numpy's lognormal/geometric/binomial/poisson samplers.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .timegrid import SlotGrid, SlotSeries, _coerce_date

SHOCK_LABELS = ("rain", "special_event")
# Extra special-event demand cannot book before it learns of the event; awareness
# spreads uniformly over the days after the announcement.
ANNOUNCE_LEAD_DAYS = 10
# Share of rain-lost demand that had booked and then cancels late.
RAIN_CANCEL_SHARE = 0.35
MAX_RESCHEDULE_SHIFT = 3
MAX_EXPECTED_DAILY = 1e9

DEFAULT_PROFILE = (0.10, 0.16, 0.15, 0.12, 0.10, 0.08, 0.07,
                   0.06, 0.05, 0.04, 0.03, 0.02, 0.01, 0.01)


@dataclass(frozen=True)
class Shock:
    date: dt.date
    multiplier: float
    label: str

    def __post_init__(self):
        object.__setattr__(self, "date", _coerce_date(self.date))
        if self.label not in SHOCK_LABELS:
            raise ConfigError(f"shock label must be one of {SHOCK_LABELS}, got {self.label!r}")
        if not (self.multiplier >= 0 and np.isfinite(self.multiplier)):
            raise ConfigError(f"shock multiplier must be finite and >= 0, got {self.multiplier}")


DEFAULT_SHOCKS = (
    Shock(dt.date(2025, 5, 14), 0.60, "rain"),
    Shock(dt.date(2025, 5, 24), 1.35, "special_event"),
    Shock(dt.date(2025, 6, 10), 0.55, "rain"),
    Shock(dt.date(2025, 6, 21), 1.40, "special_event"),
    Shock(dt.date(2025, 7, 3), 0.65, "rain"),
    Shock(dt.date(2025, 7, 12), 1.50, "special_event"),
    Shock(dt.date(2025, 8, 19), 0.60, "rain"),
    Shock(dt.date(2025, 8, 23), 1.60, "special_event"),
)


@dataclass(frozen=True)
class GeneratorConfig:
    start_date: dt.date = dt.date(2025, 5, 1)
    num_days: int = 123
    gates: tuple[str, ...] = ("East", "West")
    base_daily_mean: tuple[float, ...] = (6000.0, 4000.0)
    weekend_multiplier: float = 1.4
    trend_slope: float = 0.002
    shock_calendar: tuple[Shock, ...] = DEFAULT_SHOCKS
    intraday_profile: tuple[float, ...] = DEFAULT_PROFILE
    reservation_rate: float = 0.9
    reschedule_prob: float = 0.1
    noshow_prob: float = 0.03
    lead_time_mean_days: float = 4.0
    noise_cv: float = 0.08
    seed: int = 3407
    grid: SlotGrid = field(default_factory=SlotGrid)

    def __post_init__(self):
        object.__setattr__(self, "start_date", _coerce_date(self.start_date))
        object.__setattr__(self, "gates", tuple(self.gates))
        object.__setattr__(self, "base_daily_mean", tuple(float(v) for v in self.base_daily_mean))
        object.__setattr__(self, "intraday_profile", tuple(float(v) for v in self.intraday_profile))
        object.__setattr__(self, "shock_calendar", tuple(
            s if isinstance(s, Shock) else Shock(**s) for s in self.shock_calendar))
        if self.num_days < 1:
            raise ConfigError(f"num_days must be >= 1, got {self.num_days}")
        if not self.gates or len(set(self.gates)) != len(self.gates):
            raise ConfigError(f"gates must be non-empty and unique, got {self.gates}")
        if len(self.base_daily_mean) != len(self.gates):
            raise ConfigError("base_daily_mean needs one entry per gate")
        if any(not (m > 0) for m in self.base_daily_mean):
            raise ConfigError("base_daily_mean entries must be > 0")
        if not self.weekend_multiplier > 0:
            raise ConfigError("weekend_multiplier must be > 0")
        profile = np.asarray(self.intraday_profile)
        if profile.shape != (self.grid.slots_per_day,):
            raise ConfigError(
                f"intraday_profile needs {self.grid.slots_per_day} weights, got {profile.size}")
        if np.any(profile < 0) or abs(profile.sum() - 1.0) > 1e-9:
            raise ConfigError("intraday_profile must be nonnegative and sum to 1")
        if not 0 < self.reservation_rate <= 1:
            raise ConfigError("reservation_rate must be in (0, 1]")
        for name in ("reschedule_prob", "noshow_prob"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must be in [0, 1)")
        if not self.lead_time_mean_days > 0:
            raise ConfigError("lead_time_mean_days must be > 0")
        if not self.noise_cv >= 0:
            raise ConfigError("noise_cv must be >= 0")

    def shock_multipliers(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-day attendance multiplier and label code (0 none, 1 rain, 2 special)."""
        mult = np.ones(self.num_days)
        code = np.zeros(self.num_days, dtype=np.int64)
        for shock in self.shock_calendar:
            i = (shock.date - self.start_date).days
            if 0 <= i < self.num_days:
                mult[i] *= shock.multiplier
                code[i] = SHOCK_LABELS.index(shock.label) + 1
        return mult, code


@dataclass(frozen=True, eq=False)
class ReservationLog:
    """Columnar stream of reservation updates.

    Row ``i`` says that on ``booking[i]`` the reserved count for
    ``(target[i], slot[i], gates[gate[i]])`` changed by ``delta[i]``.  Rows are kept in
    canonical order: booking date, then target/slot/gate, positives before negatives.
    """

    gates: tuple[str, ...]
    booking: np.ndarray
    target: np.ndarray
    slot: np.ndarray
    gate: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gates", tuple(self.gates))
        cols = {
            "booking": np.asarray(self.booking, dtype="datetime64[D]"),
            "target": np.asarray(self.target, dtype="datetime64[D]"),
            "slot": np.asarray(self.slot, dtype=np.int64),
            "gate": np.asarray(self.gate, dtype=np.int64),
            "delta": np.asarray(self.delta, dtype=np.int64),
        }
        n = {v.shape for v in cols.values()}
        if len(n) != 1 or len(next(iter(n))) != 1:
            raise ShapeError("reservation log columns must be 1-D and equally long")
        order = np.lexsort((-cols["delta"], cols["gate"], cols["slot"],
                            cols["target"], cols["booking"]))
        for k, v in cols.items():
            v = v[order]
            v.flags.writeable = False
            object.__setattr__(self, k, v)

    def __len__(self) -> int:
        return int(self.delta.size)

    def __iter__(self) -> Iterator[tuple[dt.date, dt.date, int, str, int]]:
        for b, t, s, g, d in zip(self.booking.tolist(), self.target.tolist(),
                                 self.slot.tolist(), self.gate.tolist(), self.delta.tolist()):
            yield b, t, s, self.gates[g], d

    @classmethod
    def empty(cls, gates: Sequence[str]) -> "ReservationLog":
        z = np.zeros(0, dtype=np.int64)
        return cls(tuple(gates), z.astype("datetime64[D]"), z.astype("datetime64[D]"), z, z, z)

    def until(self, as_of) -> "ReservationLog":
        """Events with ``booking <= as_of``."""
        keep = self.booking <= np.datetime64(_coerce_date(as_of), "D")
        return ReservationLog(self.gates, self.booking[keep], self.target[keep],
                              self.slot[keep], self.gate[keep], self.delta[keep])

    def target_span(self) -> tuple[dt.date, int]:
        if len(self) == 0:
            raise ShapeError("empty log has no target span")
        lo, hi = self.target.min(), self.target.max()
        return lo.astype(dt.date), int((hi - lo).astype(np.int64)) + 1

    def prefix_minimum(self) -> int:
        """Smallest running cumulative count over any key, scanning in log order."""
        if len(self) == 0:
            return 0
        key = np.stack([self.target.astype(np.int64), self.slot, self.gate], axis=1)
        _, inv = np.unique(key, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        order = np.argsort(inv, kind="stable")
        d = self.delta[order]
        grp = inv[order]
        csum = np.cumsum(d)
        starts = np.r_[0, np.flatnonzero(np.diff(grp)) + 1]
        offsets = np.repeat(np.r_[0, csum[starts[1:] - 1]], np.diff(np.r_[starts, d.size]))
        return int((csum - offsets).min())


def generate_attendance(config: GeneratorConfig) -> SlotSeries:
    rng = np.random.default_rng(config.seed)
    return _attendance(config, rng)


def _attendance(config: GeneratorConfig, rng: np.random.Generator) -> SlotSeries:
    D, G, T = config.num_days, len(config.gates), config.grid.slots_per_day
    days = np.arange(D)
    weekday = np.array([(config.start_date + dt.timedelta(days=int(i))).weekday() for i in days])
    weekend = weekday >= 5
    shock, _ = config.shock_multipliers()
    level = np.where(weekend, config.weekend_multiplier, 1.0) * (1.0 + config.trend_slope * days) * shock
    expected = np.asarray(config.base_daily_mean)[None, :] * level[:, None]
    if np.any(~np.isfinite(expected)) or np.any(expected < 0) or np.any(expected > MAX_EXPECTED_DAILY):
        bad = int(np.flatnonzero(~np.isfinite(expected).all(1) | (expected < 0).any(1)
                                 | (expected > MAX_EXPECTED_DAILY).any(1))[0])
        raise ConfigError(f"expected daily count invalid on day {bad}: {expected[bad].tolist()}")

    if config.noise_cv > 0:
        sigma = np.sqrt(np.log1p(config.noise_cv ** 2))
        expected = expected * rng.lognormal(-0.5 * sigma ** 2, sigma, size=(D, G))
    base = np.floor(expected)
    daily = (base + (rng.random((D, G)) < expected - base)).astype(np.int64)

    # Systematic sampling of the slot remainders keeps the daily total exact.
    profile = np.asarray(config.intraday_profile)
    share = daily[:, :, None] * profile[None, None, :]
    whole = np.floor(share)
    remainder = daily - whole.sum(axis=2).astype(np.int64)
    cum = np.cumsum(share - whole, axis=2)
    cum[:, :, -1] = remainder
    cum = np.minimum(cum, remainder[:, :, None])
    u = rng.random((D, G, 1))
    hits = np.ceil(cum - u)
    extra = np.diff(np.concatenate([np.zeros((D, G, 1)), hits], axis=2), axis=2)
    counts = (whole + extra).astype(np.int64)
    cube = counts.transpose(0, 2, 1).reshape(D * T, G)
    return SlotSeries(config.start_date, D, config.gates, cube.astype(np.float64), config.grid)


def _geometric_leads(rng: np.random.Generator, mean: float, size: int) -> np.ndarray:
    # Support {0, 1, ...} with the requested mean.
    return rng.geometric(1.0 / (mean + 1.0), size=size) - 1


def generate_reservations(attendance: SlotSeries, config: GeneratorConfig,
                          rng: np.random.Generator | None = None) -> ReservationLog:
    """Simulate per-attendee booking updates that end in ``attendance``.

    Called standalone it derives its own stream from ``config.seed`` so it is
    reproducible independently of the attendance draw.
    """
    if (attendance.num_days != config.num_days or attendance.channels != config.gates
            or attendance.grid != config.grid or attendance.start_date != config.start_date):
        raise ShapeError("attendance series does not match generator config grid/gates/span")
    if rng is None:
        rng = np.random.default_rng([config.seed, 1])
    D, T, G = attendance.num_days, config.grid.slots_per_day, len(config.gates)
    counts = attendance.cube().astype(np.int64)  # (D, T, G)
    shock_mult, shock_code = config.shock_multipliers()

    cell_day, cell_slot, cell_gate = (a.reshape(-1) for a in np.meshgrid(
        np.arange(D), np.arange(T), np.arange(G), indexing="ij"))
    n_cell = counts.reshape(-1)
    reservers = rng.binomial(n_cell, config.reservation_rate)

    parts: list[tuple[np.ndarray, ...]] = []

    def emit(booking, target, slot, gate, delta):
        parts.append((booking, target, slot, gate, np.broadcast_to(delta, booking.shape)))

    # Attendees who reserved.
    day = np.repeat(cell_day, reservers)
    slot = np.repeat(cell_slot, reservers)
    gate = np.repeat(cell_gate, reservers)
    n = day.size
    lead = _geometric_leads(rng, config.lead_time_mean_days, n)
    special = (shock_code[day] == 2) & (shock_mult[day] > 1)
    surge_p = np.where(special, 1.0 - 1.0 / np.maximum(shock_mult[day], 1.0), 0.0)
    surge = rng.random(n) < surge_p
    lead = np.where(surge, np.minimum(lead, rng.integers(0, ANNOUNCE_LEAD_DAYS + 1, n)), lead)
    booking = day - lead

    moved = rng.random(n) < config.reschedule_prob
    shift = rng.integers(1, MAX_RESCHEDULE_SHIFT + 1, n) * rng.choice([-1, 1], n)
    old = day + shift
    old = np.where(old < booking, day + np.abs(shift), old)
    rebook = booking + np.floor(rng.random(n) * (np.minimum(day, old) - booking + 1)).astype(np.int64)
    keep = ~moved
    emit(booking[keep], day[keep], slot[keep], gate[keep], 1)
    emit(booking[moved], old[moved], slot[moved], gate[moved], 1)
    emit(rebook[moved], old[moved], slot[moved], gate[moved], -1)
    emit(rebook[moved], day[moved], slot[moved], gate[moved], 1)

    # Reservations that never turn into an entry.
    if config.noshow_prob > 0:
        k = rng.poisson(reservers * (config.noshow_prob / (1.0 - config.noshow_prob)))
        nd = np.repeat(cell_day, k)
        emit(nd - _geometric_leads(rng, config.lead_time_mean_days, nd.size), nd,
             np.repeat(cell_slot, k), np.repeat(cell_gate, k), 1)

    # Rain days: bookings that get cancelled inside the last two days of lead time.
    rain_cell = (shock_code[cell_day] == 1) & (shock_mult[cell_day] < 1)
    if rain_cell.any():
        factor = np.where(rain_cell, RAIN_CANCEL_SHARE * (1.0 / np.maximum(shock_mult[cell_day], 1e-3) - 1.0), 0.0)
        k = rng.poisson(reservers * factor)
        cd = np.repeat(cell_day, k)
        cs, cg = np.repeat(cell_slot, k), np.repeat(cell_gate, k)
        first = cd - 2 - _geometric_leads(rng, config.lead_time_mean_days, cd.size)
        cancel = cd - rng.integers(0, 2, cd.size)
        emit(first, cd, cs, cg, 1)
        emit(cancel, cd, cs, cg, -1)

    b, t, s, g, d = (np.concatenate(c) for c in zip(*parts))
    # Collapse identical (booking, target, slot, gate, sign) updates into one row.
    lo = int(min(b.min(), t.min()))
    span = int(max(b.max(), t.max())) - lo + 1
    key = ((((b - lo) * span + (t - lo)) * T + s) * G + g) * 2 + (d > 0)
    uniq, inv = np.unique(key, return_inverse=True)
    summed = np.bincount(inv, weights=d, minlength=len(uniq)).astype(np.int64)
    rest, _ = np.divmod(uniq, 2)
    rest, ug = np.divmod(rest, G)
    rest, us = np.divmod(rest, T)
    ub, ut = np.divmod(rest, span)
    origin = np.datetime64(config.start_date, "D") + lo
    return ReservationLog(config.gates, origin + ub, origin + ut, us, ug, summed)


def generate(config: GeneratorConfig) -> tuple[SlotSeries, ReservationLog]:
    """Attendance plus reservation log, both reproducible from ``config.seed``."""
    attendance = generate_attendance(config)
    return attendance, generate_reservations(attendance, config)


def _span(log: ReservationLog, start_date, num_days):
    if start_date is None or num_days is None:
        lo, n = log.target_span()
        start_date = lo if start_date is None else _coerce_date(start_date)
        num_days = n if num_days is None else num_days
    return _coerce_date(start_date), int(num_days)


def aggregate_reservations(log: ReservationLog, as_of, grid: SlotGrid = SlotGrid(),
                           start_date=None, num_days: int | None = None) -> SlotSeries:
    """Cumulative reservations per (target day, slot, gate) known on ``as_of``.

    The target span defaults to the log's own span; pass ``start_date``/``num_days``
    to align with an attendance series.
    """
    start_date, num_days = _span(log, start_date, num_days)
    T, G = grid.slots_per_day, len(log.gates)
    out = np.zeros((num_days, T, G))
    sub = log.until(as_of)
    day = (sub.target - np.datetime64(start_date, "D")).astype(np.int64)
    ok = (day >= 0) & (day < num_days)
    np.add.at(out, (day[ok], sub.slot[ok], sub.gate[ok]), sub.delta[ok])
    return SlotSeries(start_date, num_days, log.gates, out.reshape(num_days * T, G), grid)


def cumulative_by_lead(log: ReservationLog, start_date, num_days: int, max_lead: int,
                       grid: SlotGrid = SlotGrid()) -> np.ndarray:
    """``out[d, s, g, l]`` = reservations for day ``d`` known ``l`` days before it.

    Equivalent to ``aggregate_reservations(log, as_of=day_d - l)`` evaluated at
    ``(d, s, g)`` for every ``l`` in ``[0, max_lead]``.
    """
    start_date = _coerce_date(start_date)
    T, G = grid.slots_per_day, len(log.gates)
    hist = np.zeros((num_days, T, G, max_lead + 1))
    day = (log.target - np.datetime64(start_date, "D")).astype(np.int64)
    lead = (log.target - log.booking).astype(np.int64)
    ok = (day >= 0) & (day < num_days) & (lead >= 0)
    np.add.at(hist, (day[ok], log.slot[ok], log.gate[ok], np.minimum(lead[ok], max_lead)),
              log.delta[ok])
    return np.flip(np.cumsum(np.flip(hist, axis=3), axis=3), axis=3)
