"""Error metrics, statistical baselines, the window x horizon evaluation grid and
lag-correlation analysis."""

from __future__ import annotations

import csv
import datetime as dt
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .dataset import ForecastSample, WindowSpec, build_samples, chrono_split
from .errors import MetricError, ShapeError, SplitError, WindowError
from .net import ModelConfig
from .synthgen import ReservationLog, cumulative_by_lead
from .timegrid import SlotSeries
from .training import VARIANTS, TrainConfig, make_variant, train

log = logging.getLogger(__name__)

REPORT_HEADER = ["variant", "setting", "input_days", "horizon_days", "mae", "mape_raw",
                 "mape_pct", "n_samples"]
CORR_HEADER = ["mode", "month", "lag", "pearson", "defined"]
SETTINGS = {1: "single", 2: "two"}
BASELINES = ("seasonal_naive", "persistence", "ar_p", "res_ridge")
GRID_DAYS = (1, 3, 5, 7, 14)


# ----------------------------------------------------------------------- metrics


def mae_metric(yhat, y) -> float:
    yhat, y = np.asarray(yhat, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if yhat.shape != y.shape:
        raise ShapeError(f"prediction shape {yhat.shape} != target shape {y.shape}")
    return float(np.mean(np.abs(y - yhat)))


@dataclass(frozen=True)
class MapeResult:
    raw: float
    n_used: int
    n_skipped: int

    @property
    def pct(self) -> float:
        return 100.0 * self.raw


def mape_metric(yhat, y) -> MapeResult:
    """Mean of ``|(y - yhat) / y|`` over entries with ``y != 0``; zero targets are skipped."""
    yhat, y = np.asarray(yhat, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if yhat.shape != y.shape:
        raise ShapeError(f"prediction shape {yhat.shape} != target shape {y.shape}")
    nz = y != 0
    if not nz.any():
        raise MetricError("MAPE undefined: every target is zero")
    raw = float(np.mean(np.abs((y[nz] - yhat[nz]) / y[nz])))
    return MapeResult(raw, int(nz.sum()), int((~nz).sum()))


def pearson(x, y) -> float | None:
    """Sample correlation, or ``None`` when either side has zero variance."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError("pearson needs two 1-D arrays of equal length")
    if x.size < 2:
        return None
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    scale = max(float(np.abs(x).max()), float(np.abs(y).max()), 1.0)
    if sxx <= (1e-12 * scale) ** 2 * x.size or syy <= (1e-12 * scale) ** 2 * y.size:
        return None
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


# --------------------------------------------------------------------- baselines


def _setting_cube(entrance: SlotSeries, out_channels: int) -> np.ndarray:
    cube = entrance.cube()
    return cube.sum(axis=2, keepdims=True) if out_channels == 1 else cube


class Baseline:
    """Statistical reference forecaster fitted on the training span only.

    ``seasonal_naive`` copies the same weekday from the latest observed week,
    ``persistence`` repeats the issue day, ``ar_p`` is a per-(slot, channel)
    AR(7) fitted by least squares and iterated forward, and ``res_ridge`` maps
    decoder reservation features plus calendar marks to targets with ridge
    regression (intercept unpenalised).
    """

    def __init__(self, kind: str, entrance: SlotSeries, spec: WindowSpec, order: int = 7,
                 ridge_lambda: float = 1.0):
        if kind not in BASELINES:
            raise ValueError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
        self.kind, self.spec, self.order, self.ridge_lambda = kind, spec, order, ridge_lambda
        self.entrance = entrance
        self.cube = _setting_cube(entrance, spec.out_channels)  # (D, T, C)
        self.fallbacks = 0

    def fit(self, train: Sequence[ForecastSample]) -> "Baseline":
        if not train:
            raise ValueError("baseline needs at least one training sample")
        if self.kind == "ar_p":
            last = self.entrance.day_index(max(s.target_dates[-1] for s in train))
            self._fit_ar(self.cube[:last + 1])
        elif self.kind == "res_ridge":
            X = np.concatenate([np.hstack([s.x_dec, s.x_dec_mark]) for s in train])
            Y = np.concatenate([s.y for s in train])
            self._fit_ridge(X, Y)
        return self

    def _fit_ar(self, history: np.ndarray) -> None:
        p = self.order
        D, T, C = history.shape
        self.ar_coef = np.zeros((T, C, p + 1))
        self.ar_ok = D > p + 1
        if not self.ar_ok:
            return
        for s in range(T):
            for c in range(C):
                series = history[:, s, c]
                lags = np.stack([series[p - j:D - j] for j in range(1, p + 1)], axis=1)
                A = np.hstack([np.ones((D - p, 1)), lags])
                self.ar_coef[s, c] = np.linalg.lstsq(A, series[p:], rcond=None)[0]

    def _fit_ridge(self, X: np.ndarray, Y: np.ndarray) -> None:
        xm, ym = X.mean(axis=0), Y.mean(axis=0)
        Xc = X - xm
        gram = Xc.T @ Xc + self.ridge_lambda * np.eye(X.shape[1])
        self.ridge_beta = np.linalg.solve(gram, Xc.T @ (Y - ym))
        self.ridge_intercept = ym - xm @ self.ridge_beta

    def _persistence(self, i: int) -> np.ndarray:
        return np.tile(self.cube[i], (self.spec.horizon_days, 1))

    def predict(self, sample: ForecastSample) -> np.ndarray:
        spec = self.spec
        i = self.entrance.day_index(sample.issue_date)
        H = spec.horizon_days
        if self.kind == "persistence":
            return self._persistence(i)
        if self.kind == "seasonal_naive":
            out = []
            for k in range(1, H + 1):
                src = i + k - 7 * int(np.ceil(k / 7))
                if src < 0:
                    self.fallbacks += 1
                    return self._persistence(i)
                out.append(self.cube[src])
            return np.concatenate(out)
        if self.kind == "ar_p":
            p = self.order
            if not self.ar_ok or i + 1 < p:
                self.fallbacks += 1
                return self._persistence(i)
            hist = list(self.cube[i - p + 1:i + 1])
            out = []
            for _ in range(H):
                lagged = np.stack(hist[::-1][:p], axis=-1)  # (T, C, p), most recent first
                nxt = self.ar_coef[..., 0] + np.sum(self.ar_coef[..., 1:] * lagged, axis=-1)
                out.append(nxt)
                hist.append(nxt)
            return np.concatenate(out)
        X = np.hstack([sample.x_dec, sample.x_dec_mark])
        return X @ self.ridge_beta + self.ridge_intercept


def baseline_predict(kind: str, train: Sequence[ForecastSample], sample: ForecastSample,
                     entrance: SlotSeries, spec: WindowSpec) -> np.ndarray:
    return Baseline(kind, entrance, spec).fit(train).predict(sample)


# -------------------------------------------------------------------- grid eval


@dataclass(frozen=True)
class EvalRow:
    variant: str
    setting: str
    input_days: int
    horizon_days: int
    mae: float
    mape_raw: float
    mape_pct: float
    n_samples: int

    def as_list(self) -> list:
        return [self.variant, self.setting, self.input_days, self.horizon_days, repr(self.mae),
                repr(self.mape_raw), repr(self.mape_pct), self.n_samples]


@dataclass(frozen=True)
class PredictionRecord:
    variant: str
    setting: str
    input_days: int
    horizon_days: int
    issue_date: dt.date
    target_date: dt.date
    slot: int
    channel: str
    y: float
    yhat: float


PREDICTION_HEADER = ["variant", "setting", "input_days", "horizon_days", "issue_date",
                     "target_date", "slot", "channel", "y", "yhat"]


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    predictions: list[PredictionRecord] = field(default_factory=list)
    skipped: list[tuple[str, str, int, int, str]] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_HEADER)
            w.writerows(r.as_list() for r in self.rows)

    def write_predictions(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PREDICTION_HEADER)
            for p in self.predictions:
                w.writerow([p.variant, p.setting, p.input_days, p.horizon_days,
                            p.issue_date.isoformat(), p.target_date.isoformat(), p.slot,
                            p.channel, repr(p.y), repr(p.yhat)])

    def row(self, variant: str, setting: str, input_days: int, horizon_days: int) -> EvalRow:
        for r in self.rows:
            if (r.variant, r.setting, r.input_days, r.horizon_days) == (
                    variant, setting, input_days, horizon_days):
                return r
        raise KeyError((variant, setting, input_days, horizon_days))


def _score(label: str, setting: str, spec: WindowSpec, test: Sequence[ForecastSample],
           yhat: np.ndarray, channels: Sequence[str]) -> tuple[EvalRow, list[PredictionRecord]]:
    """Metrics on the total over output channels (gates are summed for two-channel)."""
    y = np.stack([s.y for s in test])
    y_tot, yhat_tot = y.sum(axis=-1), yhat.sum(axis=-1)
    mape = mape_metric(yhat_tot, y_tot)
    row = EvalRow(label, setting, spec.input_days, spec.horizon_days, mae_metric(yhat_tot, y_tot),
                  mape.raw, mape.pct, len(test))
    T = spec.grid.slots_per_day
    recs = []
    names = list(channels) + (["Total"] if len(channels) > 1 else [])
    for n, s in enumerate(test):
        for h in range(spec.dec_len):
            target = s.issue_date + dt.timedelta(days=h // T + 1)
            vals = [(y[n, h, c], yhat[n, h, c]) for c in range(len(channels))]
            if len(channels) > 1:
                vals.append((y_tot[n, h], yhat_tot[n, h]))
            for name, (yy, pp) in zip(names, vals):
                recs.append(PredictionRecord(label, setting, spec.input_days, spec.horizon_days,
                                             s.issue_date, target, h % T, name, float(yy),
                                             float(pp)))
    return row, recs


def _run_cell(entrance, reservations, variants, baselines, spec, train_cfg, model_base,
              train_fraction):
    setting = SETTINGS[spec.out_channels]
    channels = spec.channel_names(entrance.channels)
    try:
        samples = build_samples(entrance, reservations, spec)
        train_s, test_s = chrono_split(samples, train_fraction)
    except (WindowError, SplitError) as exc:
        return [], [], [(v, setting, spec.input_days, spec.horizon_days, str(exc))
                        for v in list(variants) + [f"baseline:{b}" for b in baselines]]
    rows, recs = [], []
    for v in variants:
        forecaster, _ = train(make_variant(v, spec, model_base), train_s, train_cfg)
        row, r = _score(v, setting, spec, test_s, forecaster.predict(test_s), channels)
        rows.append(row)
        recs.extend(r)
    for b in baselines:
        model = Baseline(b, entrance, spec).fit(train_s)
        yhat = np.stack([model.predict(s) for s in test_s])
        row, r = _score(f"baseline:{b}", setting, spec, test_s, yhat, channels)
        rows.append(row)
        recs.extend(r)
    return rows, recs, []


def grid_eval(entrance: SlotSeries, reservations: ReservationLog, variants: Iterable[str],
              input_days: Iterable[int] = GRID_DAYS, horizons: Iterable[int] = GRID_DAYS,
              train_cfg: TrainConfig = TrainConfig(), settings: Iterable[int] = (1, 2),
              baselines: Iterable[str] = (), model_base: ModelConfig | None = None,
              train_fraction: float = 0.8, res_feature_lags: Sequence[int] = (0, 1),
              jobs: int = 1) -> EvalReport:
    """Train and score one model per (setting, input window, horizon, variant).

    Cells whose data span is too short are recorded in ``report.skipped``.  Rows
    come out in a fixed order regardless of ``jobs``.
    """
    variants, baselines = list(variants), list(baselines)
    model_base = model_base or ModelConfig()
    specs = [WindowSpec(iw, h, c, tuple(res_feature_lags), model_base.spec.grid)
             for c in settings for iw in input_days for h in horizons]
    args = [(entrance, reservations, variants, baselines, s, train_cfg, model_base, train_fraction)
            for s in specs]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda a: _run_cell(*a), args))
    else:
        results = [_run_cell(*a) for a in args]
    report = EvalReport()
    for rows, recs, skipped in results:
        report.rows.extend(rows)
        report.predictions.extend(recs)
        report.skipped.extend(skipped)
    for v, setting, iw, h, why in report.skipped:
        log.warning("skipped %s/%s IW=%d H=%d: %s", v, setting, iw, h, why)
    return report


def run_ablation(entrance: SlotSeries, reservations: ReservationLog,
                 train_cfg: TrainConfig = TrainConfig(), out_channels: int = 1,
                 input_days: int = 7, horizon_days: int = 5,
                 model_base: ModelConfig | None = None, jobs: int = 1) -> EvalReport:
    return grid_eval(entrance, reservations, VARIANTS, (input_days,), (horizon_days,), train_cfg,
                     (out_channels,), model_base=model_base, jobs=jobs)


# -------------------------------------------------------------- lag correlation


@dataclass
class CorrMatrix:
    mode: str
    months: list[str]
    lags: list[int]
    values: np.ndarray  # (months, lags), NaN where undefined
    n_pairs: np.ndarray

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def get(self, month: str, lag: int) -> float | None:
        v = self.values[self.months.index(month), self.lags.index(lag)]
        return None if np.isnan(v) else float(v)

    def rows(self) -> list[list]:
        out = []
        for i, m in enumerate(self.months):
            for j, lag in enumerate(self.lags):
                v = self.values[i, j]
                out.append([self.mode, m, lag, "" if np.isnan(v) else repr(float(v)),
                            int(not np.isnan(v))])
        return out


def write_corr_csv(matrices: Sequence[CorrMatrix], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CORR_HEADER)
        for m in matrices:
            w.writerows(m.rows())


def lag_correlation(entrance: SlotSeries, reservations: ReservationLog | None = None,
                    mode: str = "reservations", lags: Sequence[int] | None = None,
                    months: Sequence[str] | None = None, min_pairs: int = 3) -> CorrMatrix:
    """Monthly Pearson correlation of daily totals with lagged predictors.

    ``visits``: daily total against the daily total ``lag`` days earlier.
    ``reservations``: daily total against cumulative reservations for that day as
    known ``lag`` days before it.  Months are ``YYYY-MM`` labels; cells with fewer
    than ``min_pairs`` pairs or zero variance are undefined.
    """
    if mode not in ("visits", "reservations"):
        raise ValueError(f"mode must be 'visits' or 'reservations', got {mode!r}")
    if lags is None:
        lags = range(1, 11) if mode == "visits" else range(0, 11)
    lags = [int(v) for v in lags]
    totals = entrance.daily_totals()
    D = entrance.num_days
    if mode == "visits":
        if min(lags) < 1:
            raise ValueError("visit lags start at 1")
        if max(lags) >= D:
            raise WindowError(f"span of {D} days cannot support lag {max(lags)}; feasible lags: "
                              f"{[v for v in lags if v < D]}")
        predictor = None
    else:
        if reservations is None:
            raise ValueError("reservations mode needs a reservation log")
        if min(lags) < 0:
            raise ValueError("reservation lags must be >= 0")
        cum = cumulative_by_lead(reservations, entrance.start_date, D, max(lags), entrance.grid)
        predictor = cum.sum(axis=(1, 2))  # (D, lead)
    labels = np.array([entrance.date_of(d).strftime("%Y-%m") for d in range(D)])
    months = list(dict.fromkeys(labels)) if months is None else list(months)
    values = np.full((len(months), len(lags)), np.nan)
    n_pairs = np.zeros((len(months), len(lags)), dtype=np.int64)
    for i, m in enumerate(months):
        days = np.flatnonzero(labels == m)
        for j, lag in enumerate(lags):
            if mode == "visits":
                d = days[days - lag >= 0]
                x = totals[d - lag]
            else:
                d = days
                x = predictor[d, lag]
            n_pairs[i, j] = d.size
            if d.size >= min_pairs:
                r = pearson(totals[d], x)
                if r is not None:
                    values[i, j] = r
    return CorrMatrix(mode, months, lags, values, n_pairs)
