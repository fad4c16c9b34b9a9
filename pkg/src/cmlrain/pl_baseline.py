"""Physics power-law retrieval: wet/dry, baseline, WAA offset, A = a R^b L inversion.

Units: attenuation in dB, path length in km, so ``a`` is in dB/km per
(mm/h)^b and ``R`` in mm/h.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from cmlrain.errors import ConfigInvalid, DataError, MissingCoefficient, NoDryPeriod, WindowTooLong
from cmlrain.ingest import LinkMeta, TimeSeries

# Specific-attenuation coefficients (a in dB/km, b dimensionless) by
# polarisation and frequency in GHz.  External ITU-R P.838 tabulated values,
# not fitted here; override through PLConfig.coeffs.
ITU_COEFFS: dict[str, dict[float, tuple[float, float]]] = {
    "V": {
        25.0: (0.113, 1.030),
        30.0: (0.167, 1.000),
        35.0: (0.233, 0.963),
        40.0: (0.310, 0.929),
        45.0: (0.393, 0.897),
    },
    "H": {
        25.0: (0.124, 1.061),
        30.0: (0.187, 1.021),
        35.0: (0.263, 0.979),
        40.0: (0.350, 0.939),
        45.0: (0.442, 0.903),
    },
}

# numerical floor below which a rolling std counts as exactly zero (dB)
_STD_FLOOR = 1e-9


@dataclass
class PLConfig:
    std_window_min: int = 15
    # None -> threshold_factor * median rolling std over the calibration period
    wet_threshold: float | None = None
    threshold_factor: float = 0.8
    # None -> max(0, waa_intercept_db + waa_slope_db_per_ghz * f_GHz)
    waa_offset_db: float | None = None
    waa_intercept_db: float = -0.6
    waa_slope_db_per_ghz: float = 0.05
    baseline_window_min: int = 60
    coeffs: dict = field(default_factory=lambda: {p: dict(t) for p, t in ITU_COEFFS.items()})
    coeff_lookup: str = "nearest"
    max_freq_gap_ghz: float = 5.0

    def __post_init__(self):
        if self.std_window_min < 2:
            raise ConfigInvalid("std_window_min must be >= 2")
        if self.baseline_window_min < 1:
            raise ConfigInvalid("baseline_window_min must be >= 1")
        if self.waa_offset_db is not None and self.waa_offset_db < 0:
            raise ConfigInvalid("waa_offset_db must be >= 0")
        if self.coeff_lookup not in ("nearest", "loglinear"):
            raise ConfigInvalid("coeff_lookup must be 'nearest' or 'loglinear'")
        self.coeffs = {
            str(pol).upper(): {float(f): (float(ab[0]), float(ab[1])) for f, ab in table.items()}
            for pol, table in self.coeffs.items()
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["coeffs"] = {pol: {repr(f): list(ab) for f, ab in t.items()} for pol, t in self.coeffs.items()}
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "PLConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigInvalid(f"unknown PLConfig fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "PLConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def waa_for(self, meta: LinkMeta) -> float:
        if self.waa_offset_db is not None:
            return float(self.waa_offset_db)
        return max(0.0, self.waa_intercept_db + self.waa_slope_db_per_ghz * meta.frequency_ghz)


def lookup_coefficients(
    frequency_ghz: float, polarization: str = "V", cfg: PLConfig | None = None
) -> tuple[float, float]:
    """(a, b) for a link, by nearest tabulated frequency or log-linear interpolation."""
    table = (cfg.coeffs if cfg is not None else ITU_COEFFS).get(polarization.upper())
    max_gap = cfg.max_freq_gap_ghz if cfg is not None else 5.0
    mode = cfg.coeff_lookup if cfg is not None else "nearest"
    if not table:
        raise MissingCoefficient(f"no coefficients for polarization {polarization!r}")
    freqs = np.array(sorted(table))
    nearest = freqs[np.argmin(np.abs(freqs - frequency_ghz))]
    if abs(nearest - frequency_ghz) > max_gap:
        raise MissingCoefficient(f"no coefficient within {max_gap} GHz of {frequency_ghz} GHz")
    if mode == "nearest" or len(freqs) == 1 or frequency_ghz in table:
        return table[float(nearest)]
    lo = freqs[freqs <= frequency_ghz]
    hi = freqs[freqs >= frequency_ghz]
    if not len(lo) or not len(hi):
        return table[float(nearest)]
    f0, f1 = float(lo[-1]), float(hi[0])
    (a0, b0), (a1, b1) = table[f0], table[f1]
    w = (np.log(frequency_ghz) - np.log(f0)) / (np.log(f1) - np.log(f0))
    return float(np.exp((1 - w) * np.log(a0) + w * np.log(a1))), float((1 - w) * b0 + w * b1)


def _values(x) -> np.ndarray:
    return np.asarray(x.values if isinstance(x, TimeSeries) else x, dtype=np.float64)


def rolling_std(values: np.ndarray, window: int) -> np.ndarray:
    """Centred rolling population std with windows shrinking at the edges."""
    n = len(values)
    left = (window - 1) // 2
    right = window - 1 - left
    padded = np.concatenate([np.full(left, np.nan), values, np.full(right, np.nan)])
    windows = sliding_window_view(padded, window)
    # shift by the centre sample so constant runs give exactly 0
    anchor = values[:, None]
    std = np.sqrt(np.nanmean((windows - anchor) ** 2, axis=1) - np.nanmean(windows - anchor, axis=1) ** 2)
    std = np.nan_to_num(std, nan=0.0)
    std[std < _STD_FLOOR] = 0.0
    assert std.shape == (n,)
    return std


def calibrate_threshold(rsl, cfg: PLConfig) -> float:
    """threshold_factor times the typical (median) rolling std of a mostly-dry period."""
    v = _values(rsl)
    return float(cfg.threshold_factor * np.median(rolling_std(v, cfg.std_window_min)))


def wet_dry(rsl, cfg: PLConfig, threshold: float | None = None) -> np.ndarray:
    """Boolean series: True where the centred rolling std exceeds the threshold."""
    v = _values(rsl)
    if np.isnan(v).any():
        raise DataError("wet_dry needs a gap-free series; impute first")
    if cfg.std_window_min > len(v):
        raise WindowTooLong(f"std window {cfg.std_window_min} longer than series ({len(v)})")
    if threshold is None:
        threshold = cfg.wet_threshold if cfg.wet_threshold is not None else calibrate_threshold(v, cfg)
    return rolling_std(v, cfg.std_window_min) > threshold


def _trailing_median(values: np.ndarray, window: int) -> np.ndarray:
    n = len(values)
    out = np.empty(n)
    head = min(window - 1, n)
    for i in range(head):
        out[i] = np.median(values[: i + 1])
    if n >= window:
        out[window - 1 :] = np.median(sliding_window_view(values, window), axis=1)
    return out


def baseline_attenuation(rsl, wet: np.ndarray, window: int = 60) -> np.ndarray:
    """Rain attenuation A_t = baseline_t - rsl_t, clamped at 0 (dB).

    The baseline is the median of the last ``window`` dry samples, carried
    forward through wet spells; samples before the first dry one take the
    first dry baseline.
    """
    v = _values(rsl)
    wet = np.asarray(wet, dtype=bool)
    if wet.shape != v.shape:
        raise DataError("wet flags and RSL differ in length")
    dry_idx = np.flatnonzero(~wet)
    if not len(dry_idx):
        raise NoDryPeriod("no dry samples to anchor the baseline")
    med = _trailing_median(v[dry_idx], window)
    pos = np.searchsorted(dry_idx, np.arange(len(v)), side="right") - 1
    baseline = med[np.maximum(pos, 0)]
    return np.maximum(baseline - v, 0.0)


def invert_power_law(attenuation, meta: LinkMeta, cfg: PLConfig, wet=None, coeffs: tuple | None = None):
    """R = (max(A - WAA, 0) / (a L))^(1/b) on wet samples, 0 on dry ones."""
    A = np.asarray(attenuation, dtype=np.float64)
    if np.any(A < 0):
        raise DataError("attenuation must be non-negative")
    a, b = coeffs if coeffs is not None else lookup_coefficients(meta.frequency_ghz, meta.polarization, cfg)
    if a <= 0 or b <= 0:
        raise MissingCoefficient(f"invalid coefficients a={a}, b={b}")
    excess = np.maximum(A - cfg.waa_for(meta), 0.0)
    rate = (excess / (a * meta.length_km)) ** (1.0 / b)
    if wet is not None:
        rate = np.where(np.asarray(wet, dtype=bool), rate, 0.0)
    return rate if rate.ndim else float(rate)


def link_rain_rate(meta: LinkMeta, rsl: TimeSeries, cfg: PLConfig, calibration_end: datetime | None = None):
    """Full per-link chain on a gap-free 1-min RSL series; returns (rate, wet)."""
    v = _values(rsl)
    threshold = cfg.wet_threshold
    if threshold is None:
        calib = v
        if calibration_end is not None:
            n = int((calibration_end.timestamp() - rsl.start.timestamp()) // rsl.step_s)
            if n >= cfg.std_window_min:
                calib = v[:n]
        threshold = calibrate_threshold(calib, cfg)
    wet = wet_dry(v, cfg, threshold)
    att = baseline_attenuation(v, wet, cfg.baseline_window_min)
    return invert_power_law(att, meta, cfg, wet), wet


def pl_estimate(
    links: Sequence[tuple[LinkMeta, TimeSeries]],
    grid,
    cfg: PLConfig,
    calibration_end: datetime | None = None,
) -> TimeSeries:
    """Site estimate: unweighted mean of per-link rain rates on the gauge grid.

    ``grid`` is a TimeSeries (its timestamps are used) or an array of epoch
    seconds on a uniform 1-min grid.
    """
    if not links:
        raise DataError("pl_estimate needs at least one link")
    if isinstance(grid, TimeSeries):
        secs = grid.epoch_seconds()
        start, step = grid.start, grid.step_s
    else:
        secs = np.asarray(grid, dtype=np.int64)
        start = datetime.fromtimestamp(int(secs[0]), tz=timezone.utc)
        step = int(secs[1] - secs[0]) if len(secs) > 1 else 60
    rates = []
    for meta, rsl in links:
        rate, _ = link_rain_rate(meta, rsl, cfg, calibration_end)
        idx = (secs - int(rsl.start.timestamp())) // rsl.step_s
        ok = (idx >= 0) & (idx < len(rate)) & ((secs - int(rsl.start.timestamp())) % rsl.step_s == 0)
        on_grid = np.full(len(secs), np.nan)
        on_grid[ok] = rate[idx[ok]]
        rates.append(on_grid)
    return TimeSeries(start, step, np.mean(rates, axis=0), "mm_per_h")
