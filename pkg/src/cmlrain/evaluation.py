"""Accuracy metrics, rain-event detection and per-day statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone

import numpy as np

from cmlrain.errors import DataError, LengthMismatch
from cmlrain.ingest import TimeSeries

WET_THRESHOLD_MM_H = 0.1
MIN_EVENT_MIN = 30
MIN_GAP_MIN = 60


@dataclass
class Metrics:
    rmse: float
    r2: float | None  # None when the truth has zero variance
    pcc: float | None  # None when either series has zero variance
    mae: float
    n: int


def metrics(y, yhat) -> Metrics:
    """RMSE, R^2, Pearson correlation and MAE of predictions ``yhat`` against ``y``."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape or y.ndim != 1:
        raise LengthMismatch(f"y {y.shape} and yhat {yhat.shape} must be equal-length vectors")
    if len(y) < 2:
        raise LengthMismatch("metrics need at least two samples")
    err = y - yhat
    sse = float(np.dot(err, err))
    rmse = math.sqrt(sse / len(y))
    mae = float(np.abs(err).mean())
    dy = y - y.mean()
    dp = yhat - yhat.mean()
    sst = float(np.dot(dy, dy))
    ssp = float(np.dot(dp, dp))
    r2 = 1.0 - sse / sst if sst > 0 else None
    pcc = float(np.dot(dy, dp)) / math.sqrt(sst * ssp) if sst > 0 and ssp > 0 else None
    if pcc is not None:
        pcc = min(1.0, max(-1.0, pcc))
    return Metrics(rmse, r2, pcc, mae, len(y))


@dataclass
class RainEvent:
    start: datetime  # first wet minute
    end: datetime  # one minute past the last wet minute
    peak_mm_h: float
    total_mm: float

    @property
    def duration_min(self) -> int:
        return int((self.end - self.start).total_seconds() // 60)


def event_spans(rate: np.ndarray) -> list[tuple[int, int]]:
    """Index spans [start, stop) of events in a 1-min rate array.

    Wet minutes (> 0.1 mm/h) are grouped into runs, runs closer than 60 dry
    minutes are merged, and merged spans shorter than 30 minutes are dropped.
    """
    wet = np.asarray(rate, dtype=np.float64) > WET_THRESHOLD_MM_H
    if not wet.any():
        return []
    edges = np.flatnonzero(np.diff(np.concatenate([[0], wet.astype(np.int8), [0]])))
    runs = list(zip(edges[::2].tolist(), edges[1::2].tolist()))
    merged = [list(runs[0])]
    for s, e in runs[1:]:
        if s - merged[-1][1] < MIN_GAP_MIN:
            merged[-1][1] = e
        else:
            merged.append([s, e])
    return [(s, e) for s, e in merged if e - s >= MIN_EVENT_MIN]


def detect_events(rate: TimeSeries) -> list[RainEvent]:
    if rate.step_s != 60:
        raise DataError("event detection expects a 1-min series")
    v = np.asarray(rate.values, dtype=np.float64)
    if np.isnan(v).any():
        raise DataError("event detection expects a gap-free series")
    out = []
    for s, e in event_spans(v):
        seg = v[s:e]
        out.append(
            RainEvent(
                start=rate.start + timedelta(minutes=s),
                end=rate.start + timedelta(minutes=e),
                peak_mm_h=float(seg.max()),
                total_mm=float(seg.sum() / 60.0),
            )
        )
    return out


@dataclass
class DayStats:
    day: date
    metrics: Metrics


def per_day_stats(y, yhat, epoch_seconds) -> list[DayStats]:
    """Metrics per UTC calendar day; days with fewer than two samples are skipped."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    secs = np.asarray(epoch_seconds, dtype=np.int64)
    if not (len(y) == len(yhat) == len(secs)):
        raise LengthMismatch("y, yhat and timestamps must have equal length")
    day_index = secs // 86400
    out = []
    for d in np.unique(day_index):
        sel = day_index == d
        if sel.sum() < 2:
            continue
        day = datetime.fromtimestamp(int(d) * 86400, tz=timezone.utc).date()
        out.append(DayStats(day, metrics(y[sel], yhat[sel])))
    return out


@dataclass
class EvalReport:
    model: str
    rmse: float
    r2: float | None
    pcc: float | None
    mae: float
    n: int
    per_day: list[DayStats] = field(default_factory=list)
    events: list[RainEvent] = field(default_factory=list)


def evaluate(model: str, y, yhat, epoch_seconds, events: list[RainEvent] | None = None) -> EvalReport:
    m = metrics(y, yhat)
    return EvalReport(model, m.rmse, m.r2, m.pcc, m.mae, m.n, per_day_stats(y, yhat, epoch_seconds), events or [])
