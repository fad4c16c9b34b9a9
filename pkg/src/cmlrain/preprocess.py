"""Turning raw link and gauge series into scaled, windowed model inputs."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from cmlrain.autodiff import load_tensors, save_tensors
from cmlrain.errors import (
    BufferTooSmall,
    ConfigInvalid,
    DataError,
    EmptyColumn,
    OverlappingSplits,
    TooSparse,
    WrongStep,
)
from cmlrain.ingest import GaugeRecord, LinkData, TimeSeries

SPLITS = ("train", "val", "test")
TIME_FEATURES = ("x_sin_hour", "x_cos_hour", "x_sin_min", "x_cos_min")


class DegenerateSpreadWarning(UserWarning):
    """Raised as a warning when a column has zero interquartile range."""


# ---------------------------------------------------------------------------
# series transforms
# ---------------------------------------------------------------------------


def downsample_rsl(rsl: TimeSeries, target_step_s: int = 60) -> TimeSeries:
    """Mean of non-overlapping blocks of 10-s samples aligned to whole minutes.

    Leading samples before the first minute boundary and a trailing partial
    block are dropped.  A block with any missing sample is missing.
    """
    if rsl.step_s != 10:
        raise WrongStep(f"expected a 10-s series, got step {rsl.step_s} s")
    factor = target_step_s // rsl.step_s
    secs = int(rsl.start.timestamp())
    skip = (-secs % target_step_s) // rsl.step_s
    values = rsl.values[skip:]
    n_out = len(values) // factor
    if n_out < 1:
        raise DataError(f"need at least {factor} aligned samples to downsample")
    blocks = values[: n_out * factor].reshape(n_out, factor)
    start = rsl.start + timedelta(seconds=skip * rsl.step_s)
    return TimeSeries(start, target_step_s, blocks.mean(axis=1), rsl.unit)


def moving_average(values: np.ndarray, width: int) -> np.ndarray:
    """Centred moving average; windows shrink at the edges and skip NaNs."""
    if width < 1 or width % 2 == 0:
        raise ConfigInvalid(f"smoothing width must be odd and >= 1, got {width}")
    v = np.asarray(values, dtype=np.float64)
    if width == 1:
        return v.copy()
    half = width // 2
    finite = np.isfinite(v)
    csum = np.concatenate([[0.0], np.cumsum(np.where(finite, v, 0.0))])
    ccnt = np.concatenate([[0], np.cumsum(finite)])
    idx = np.arange(len(v))
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, len(v))
    total = csum[hi] - csum[lo]
    count = ccnt[hi] - ccnt[lo]
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    return out


def gauge_to_rate(gauge: GaugeRecord, smooth_win: int = 5) -> TimeSeries:
    """Convert per-sample accumulations (mm) to a smoothed rate in mm/h."""
    series = gauge.series
    rate = series.values * (3600.0 / series.step_s)
    return series.with_values(moving_average(rate, smooth_win), unit="mm_per_h")


def impute(ts: TimeSeries, order: int = 2, n_neighbors: int | None = None) -> TimeSeries:
    """Fill gaps with a local polynomial through the nearest observed samples.

    Each interior gap is filled from one polynomial of degree ``order`` fitted
    to ``n_neighbors`` observed samples split across both sides of the gap
    (default ``2 * order``).  Leading and trailing gaps repeat the nearest
    observed value.
    """
    v = np.array(ts.values, dtype=np.float64)
    missing = np.isnan(v)
    if not missing.any():
        return ts
    good = np.flatnonzero(~missing)
    if len(good) < order + 1:
        raise TooSparse(f"need at least {order + 1} observed samples, found {len(good)}")
    k = max(n_neighbors or 2 * order, order + 1)
    n = len(v)

    edges = np.flatnonzero(np.diff(np.concatenate([[0], missing.astype(np.int8), [0]])))
    for s, e in zip(edges[::2], edges[1::2]):
        if s == 0:
            v[s:e] = v[e]
            continue
        if e == n:
            v[s:e] = v[s - 1]
            continue
        i = np.searchsorted(good, s)
        n_left = min(k // 2, i)
        n_right = min(k - n_left, len(good) - i)
        n_left = min(k - n_right, i)
        pts = good[i - n_left : i + n_right]
        deg = min(order, len(pts) - 1)
        x = (pts - s).astype(np.float64)
        coef = np.polyfit(x, v[pts], deg)
        v[s:e] = np.polyval(coef, np.arange(e - s, dtype=np.float64))
    return ts.with_values(v)


def robust_scale(col) -> tuple[np.ndarray, float, float]:
    """(x - median) / IQR with quartiles by linear interpolation.

    A zero IQR divides by 1 instead and emits DegenerateSpreadWarning.
    """
    x = np.asarray(col, dtype=np.float64)
    if x.ndim != 1 or len(x) < 2 or np.isnan(x).all():
        raise EmptyColumn("robust_scale needs a column with at least two values")
    median, iqr, degenerate = _robust_stats(x)
    if degenerate:
        warnings.warn("zero interquartile range; scaling by 1", DegenerateSpreadWarning, stacklevel=2)
    return (x - median) / (1.0 if degenerate else iqr), median, iqr


def _robust_stats(x: np.ndarray) -> tuple[float, float, bool]:
    q1, median, q3 = np.nanpercentile(x, [25.0, 50.0, 75.0], method="linear")
    iqr = float(q3 - q1)
    return float(median), iqr, not iqr > 0


@dataclass
class ScalerState:
    median: float
    iqr: float
    degenerate: bool = False

    @property
    def divisor(self) -> float:
        return 1.0 if self.degenerate else self.iqr


@dataclass
class RobustScaler:
    """Per-column median/IQR scaler; fit on training rows only."""

    state: dict[str, ScalerState] = field(default_factory=dict)

    def fit(self, columns: dict[str, np.ndarray]) -> "RobustScaler":
        for name, col in columns.items():
            col = np.asarray(col, dtype=np.float64)
            if len(col) < 2:
                raise EmptyColumn(f"column {name!r} has fewer than two training rows")
            median, iqr, degenerate = _robust_stats(col)
            if degenerate:
                warnings.warn(f"{name}: zero interquartile range", DegenerateSpreadWarning, stacklevel=2)
            self.state[name] = ScalerState(median, iqr, degenerate)
        return self

    def transform(self, name: str, col) -> np.ndarray:
        s = self.state[name]
        return (np.asarray(col, dtype=np.float64) - s.median) / s.divisor

    def inverse_transform(self, name: str, col) -> np.ndarray:
        s = self.state[name]
        return np.asarray(col, dtype=np.float64) * s.divisor + s.median

    def to_dict(self) -> dict:
        return {k: asdict(v) for k, v in self.state.items()}

    @classmethod
    def from_dict(cls, data: dict) -> "RobustScaler":
        return cls({k: ScalerState(**v) for k, v in data.items()})


def time_features(epoch_seconds) -> np.ndarray:
    """[sin, cos] of hour-of-day (period 24) and minute-of-hour (period 60)."""
    secs = np.asarray(epoch_seconds, dtype=np.int64)
    hour = (secs // 3600) % 24
    minute = (secs // 60) % 60
    ang_h = 2.0 * np.pi * hour / 24.0
    ang_m = 2.0 * np.pi * minute / 60.0
    return np.column_stack([np.sin(ang_h), np.cos(ang_h), np.sin(ang_m), np.cos(ang_m)])


# ---------------------------------------------------------------------------
# splitting and windowing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitBound:
    name: str
    start: date  # first day, inclusive
    end: date  # last day, inclusive

    @property
    def start_s(self) -> int:
        return int(datetime(self.start.year, self.start.month, self.start.day, tzinfo=timezone.utc).timestamp())

    @property
    def end_s(self) -> int:
        """Epoch seconds of the first instant after the last day."""
        nxt = self.end + timedelta(days=1)
        return int(datetime(nxt.year, nxt.month, nxt.day, tzinfo=timezone.utc).timestamp())

    def to_dict(self) -> dict:
        return {"name": self.name, "start": self.start.isoformat(), "end": self.end.isoformat()}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitBound":
        return cls(d["name"], date.fromisoformat(d["start"]), date.fromisoformat(d["end"]))


def default_bounds(year: int = 2015) -> list[SplitBound]:
    """June 1 - Aug 2 / Aug 4 - Aug 20 / Aug 22 - Aug 31 with one-day buffers."""
    return [
        SplitBound("train", date(year, 6, 1), date(year, 8, 2)),
        SplitBound("val", date(year, 8, 4), date(year, 8, 20)),
        SplitBound("test", date(year, 8, 22), date(year, 8, 31)),
    ]


def proportional_bounds(first_day: date, days: int) -> list[SplitBound]:
    """Scaled-down analogue of the default calendar for short synthetic runs.

    Keeps roughly the 63/17/10 train/val/test day ratio with one-day buffers.
    """
    usable = days - 2
    if usable < 3:
        raise ConfigInvalid("need at least 5 days for train/val/test plus two buffer days")
    n_test = max(1, round(usable * 10 / 90))
    n_val = max(1, round(usable * 17 / 90))
    n_train = usable - n_val - n_test
    if n_train < 1:
        raise ConfigInvalid("too few days for a training split")
    d = first_day
    out = []
    for name, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        out.append(SplitBound(name, d, d + timedelta(days=n - 1)))
        d = d + timedelta(days=n + 1)
    return out


def validate_bounds(bounds: Sequence[SplitBound]) -> None:
    names = [b.name for b in bounds]
    if names != list(SPLITS):
        raise ConfigInvalid(f"split bounds must be named {SPLITS} in order, got {names}")
    for b in bounds:
        if b.end < b.start:
            raise ConfigInvalid(f"split {b.name}: end {b.end} precedes start {b.start}")
    for prev, nxt in zip(bounds, bounds[1:]):
        if nxt.start <= prev.end:
            raise OverlappingSplits(f"{prev.name} ({prev.start}..{prev.end}) overlaps {nxt.name} ({nxt.start}..)")
        if (nxt.start - prev.end).days < 2:
            raise BufferTooSmall(f"no full buffer day between {prev.name} and {nxt.name}")


@dataclass
class FeatureMatrix:
    times: np.ndarray  # epoch seconds, uniform 60-s grid
    values: np.ndarray  # [T, F]
    names: list[str]
    scaler: RobustScaler = field(default_factory=RobustScaler)

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ConfigInvalid("feature names must be unique")
        if self.values.shape != (len(self.times), len(self.names)):
            raise DataError("feature matrix shape does not match times/names")

    @property
    def rsl_columns(self) -> list[str]:
        return [n for n in self.names if n not in TIME_FEATURES]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]


@dataclass
class WindowedDataset:
    """Sliding windows over a feature matrix.

    Window ``k`` reads rows ``starts[k] .. starts[k] + window_len - 1`` and
    targets the rate at row ``starts[k] + window_len``.
    """

    features: np.ndarray  # [T, F] scaled
    rates: np.ndarray  # [T] mm/h
    times: np.ndarray  # [T] epoch seconds
    starts: np.ndarray  # [N] int64
    split: np.ndarray  # [N] int8, index into SPLITS
    window_len: int = 30
    feature_names: list[str] = field(default_factory=list)
    scaler: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.starts)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == SPLITS.index(split))

    def inputs(self, idx=None) -> np.ndarray:
        starts = self.starts if idx is None else self.starts[idx]
        return self.features[starts[:, None] + np.arange(self.window_len)]

    def targets(self, idx=None) -> np.ndarray:
        starts = self.starts if idx is None else self.starts[idx]
        return self.rates[starts + self.window_len]

    def target_times(self, idx=None) -> np.ndarray:
        starts = self.starts if idx is None else self.starts[idx]
        return self.times[starts + self.window_len]

    def source_minutes(self, split: str) -> set[int]:
        """Every row (input or target) touched by windows of ``split``."""
        s = self.starts[self.indices(split)]
        rows = (s[:, None] + np.arange(self.window_len + 1)).ravel()
        return set(self.times[np.unique(rows)].tolist())

    def split_counts(self) -> dict[str, int]:
        return {name: int((self.split == i).sum()) for i, name in enumerate(SPLITS)}

    def subset(self, idx) -> "WindowedDataset":
        return WindowedDataset(
            self.features,
            self.rates,
            self.times,
            self.starts[idx],
            self.split[idx],
            self.window_len,
            list(self.feature_names),
            dict(self.scaler),
        )

    # -- persistence ---------------------------------------------------
    def save(self, out_dir) -> None:
        """Write dataset.bin (materialised windows) plus manifest.json."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        tensors = {
            "inputs": self.inputs(),
            "targets": self.targets(),
            "split": self.split.astype(np.int64),
            "target_time": self.target_times(),
            "features": self.features,
            "rates": self.rates,
            "times": self.times,
            "starts": self.starts,
        }
        manifest = {
            "format": "cmlrain-windows/1",
            "window_len": self.window_len,
            "feature_names": list(self.feature_names),
            "shapes": {k: list(np.shape(v)) for k, v in tensors.items()},
            "scaler": self.scaler,
            "split_counts": self.split_counts(),
        }
        save_tensors(out / "dataset.bin", tensors, {"manifest": manifest})
        with open(out / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, data_dir) -> "WindowedDataset":
        root = Path(data_dir)
        arrays, meta = load_tensors(root / "dataset.bin")
        manifest = meta["manifest"]
        return cls(
            features=arrays["features"],
            rates=arrays["rates"],
            times=arrays["times"],
            starts=arrays["starts"],
            split=arrays["split"].astype(np.int8),
            window_len=int(manifest["window_len"]),
            feature_names=list(manifest["feature_names"]),
            scaler=manifest["scaler"],
        )


def chrono_split(
    fm: FeatureMatrix, rates: np.ndarray, bounds: Sequence[SplitBound], window_len: int = 30
) -> WindowedDataset:
    """Stride-1 windows; a window joins a split only if all of its input
    minutes and its target minute fall inside that split's days."""
    validate_bounds(bounds)
    times = np.asarray(fm.times, dtype=np.int64)
    rates = np.asarray(rates, dtype=np.float64)
    if len(rates) != len(times):
        raise DataError("targets and feature rows differ in length")
    if len(times) > 1 and np.any(np.diff(times) != 60):
        raise DataError("feature matrix must sit on a gap-free 1-min grid")
    n_windows = len(times) - window_len
    if n_windows <= 0:
        return WindowedDataset(
            fm.values, rates, times, np.zeros(0, np.int64), np.zeros(0, np.int8), window_len, list(fm.names),
            fm.scaler.to_dict(),
        )
    first = times[:n_windows]
    last = times[window_len:]
    split = np.full(n_windows, -1, dtype=np.int8)
    for code, b in enumerate(bounds):
        inside = (first >= b.start_s) & (last < b.end_s)
        split[inside] = code
    finite_rows = np.isfinite(fm.values).all(axis=1)
    # a window is usable only when every input row is finite and the target is a valid rate
    bad_rows = np.concatenate([[0], np.cumsum(~finite_rows)])
    inputs_ok = (bad_rows[window_len:][: n_windows] - bad_rows[:n_windows]) == 0
    target = rates[window_len:]
    ok = (split >= 0) & inputs_ok & np.isfinite(target) & (target >= 0)
    starts = np.flatnonzero(ok).astype(np.int64)
    return WindowedDataset(
        fm.values, rates, times, starts, split[ok], window_len, list(fm.names), fm.scaler.to_dict()
    )


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


@dataclass
class PreprocessConfig:
    smooth_win: int = 5
    impute_order: int = 2
    impute_neighbors: int = 4
    window_len: int = 30
    bounds: list[SplitBound] = field(default_factory=default_bounds)

    def __post_init__(self):
        if self.smooth_win < 1 or self.smooth_win % 2 == 0:
            raise ConfigInvalid("smooth_win must be odd and >= 1")
        if self.impute_order < 0 or self.impute_neighbors < self.impute_order + 1:
            raise ConfigInvalid("impute_neighbors must be at least impute_order + 1")
        if self.window_len < 1:
            raise ConfigInvalid("window_len must be positive")
        self.bounds = [b if isinstance(b, SplitBound) else SplitBound.from_dict(b) for b in self.bounds]
        validate_bounds(self.bounds)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = [b.to_dict() for b in self.bounds]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigInvalid(f"unknown preprocessing fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Prepared:
    """Everything downstream stages need from one site."""

    dataset: WindowedDataset
    feature_matrix: FeatureMatrix
    rsl_1min: list[tuple]  # (LinkMeta, imputed unscaled 1-min TimeSeries)
    rate: TimeSeries  # smoothed gauge rate on the common grid


def _align(series: TimeSeries, start_s: int, n: int) -> np.ndarray:
    offset = (start_s - int(series.start.timestamp())) // series.step_s
    out = np.full(n, np.nan)
    lo, hi = max(0, -offset), min(n, len(series.values) - offset)
    if hi > lo:
        out[lo:hi] = series.values[lo + offset : hi + offset]
    return out


def prepare(links: Sequence[LinkData], gauge: GaugeRecord, cfg: PreprocessConfig) -> Prepared:
    """Downsample, impute, scale (train-only fit), add time features and window."""
    if not links:
        raise DataError("no links to prepare")
    rsl_1min = [(l.meta, impute(downsample_rsl(l.rsl), cfg.impute_order, cfg.impute_neighbors)) for l in links]
    rate = gauge_to_rate(gauge, cfg.smooth_win)
    if rate.step_s != 60:
        raise WrongStep(f"gauge must be 1-min, got {rate.step_s} s")

    start_s = max(int(s.start.timestamp()) for s in [rate] + [r for _, r in rsl_1min])
    end_s = min(int(s.start.timestamp()) + 60 * len(s) for s in [rate] + [r for _, r in rsl_1min])
    if end_s <= start_s:
        raise DataError("link and gauge records do not overlap in time")
    start_s += -start_s % 60
    n = (end_s - start_s) // 60
    times = start_s + 60 * np.arange(n, dtype=np.int64)

    names = [f"rsl_{meta.link_id}" for meta, _ in rsl_1min]
    raw = np.column_stack([_align(r, start_s, n) for _, r in rsl_1min])
    if np.isnan(raw).any():
        raise DataError("links do not cover the common time grid after imputation")

    train = cfg.bounds[0]
    train_rows = (times >= train.start_s) & (times < train.end_s)
    if train_rows.sum() < 2:
        raise DataError("training period holds fewer than two minutes of data")
    scaler = RobustScaler().fit({name: raw[train_rows, j] for j, name in enumerate(names)})
    scaled = np.column_stack([scaler.transform(name, raw[:, j]) for j, name in enumerate(names)])

    check = RobustScaler().fit({name: raw[train_rows, j] for j, name in enumerate(names)})
    assert check.to_dict() == scaler.to_dict(), "scaler state must equal a train-only fit"

    values = np.column_stack([scaled, time_features(times)])
    fm = FeatureMatrix(times, values, names + list(TIME_FEATURES), scaler)
    targets = _align(rate, start_s, n)
    ds = chrono_split(fm, targets, cfg.bounds, cfg.window_len)
    aligned_rate = TimeSeries(datetime.fromtimestamp(start_s, tz=timezone.utc), 60, targets, "mm_per_h")
    return Prepared(ds, fm, rsl_1min, aligned_rate)
