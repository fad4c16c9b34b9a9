"""End-to-end runs: data -> windows -> six models + power law -> reports."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from cmlrain.config import RunConfig
from cmlrain.errors import ConfigInvalid, DataError, EmptySplit, IoFailure, MissingInput
from cmlrain.evaluation import EvalReport, RainEvent, detect_events, evaluate
from cmlrain.ingest import (
    GaugeRecord,
    LinkData,
    TimeSeries,
    format_time,
    load_data_dir,
    parse_time,
    synth_dataset,
)
from cmlrain.model import ModelParams, predict, save_checkpoint
from cmlrain.pl_baseline import pl_estimate
from cmlrain.preprocess import DegenerateSpreadWarning, Prepared, downsample_rsl, gauge_to_rate, impute, prepare
from cmlrain.report import emit_report
from cmlrain.train import TrainHistory, train

log = logging.getLogger(__name__)

PL_NAME = "PL"


@dataclass
class RunResult:
    config: RunConfig
    reports: list[EvalReport]
    events: list[RainEvent]
    times: np.ndarray  # epoch seconds of the test targets
    truth: np.ndarray
    predictions: dict[str, np.ndarray] = field(default_factory=dict)
    histories: dict[str, TrainHistory] = field(default_factory=dict)
    params: dict[str, ModelParams] = field(default_factory=dict)

    def report(self, model: str) -> EvalReport:
        for r in self.reports:
            if r.model == model:
                return r
        raise KeyError(model)


def load_inputs(cfg: RunConfig) -> tuple[list[LinkData], GaugeRecord]:
    """Links and the reference gauge for a run, synthetic or from disk."""
    if cfg.synthetic:
        ds = synth_dataset(cfg.seed, cfg.synth_days)
        return ds.links, ds.gauge
    if not cfg.data_dir:
        raise ConfigInvalid("no data directory configured")
    data = load_data_dir(cfg.data_dir)
    if cfg.gauge_id is not None:
        if cfg.gauge_id not in data.gauges:
            raise MissingInput(f"gauge {cfg.gauge_id!r} not found; available: {sorted(data.gauges)}")
        return data.links, data.gauges[cfg.gauge_id]
    if len(data.gauges) != 1:
        raise ConfigInvalid(f"several gauges present {sorted(data.gauges)}; choose one with gauge_id")
    return data.links, next(iter(data.gauges.values()))


def prepare_run(cfg: RunConfig) -> Prepared:
    links, gauge = load_inputs(cfg)
    with warnings.catch_warnings():
        # clean synthetic links have flat dry periods; the scaler falls back to unit spread
        warnings.simplefilter("ignore" if cfg.synthetic else "default", DegenerateSpreadWarning)
        return prepare(links, gauge, cfg.preprocess)


def gauge_events(prep: Prepared, cfg: RunConfig) -> list[RainEvent]:
    """Gauge rain events inside the test period (missing gauge minutes count as dry)."""
    test = cfg.preprocess.bounds[2]
    secs = prep.rate.epoch_seconds()
    sel = (secs >= test.start_s) & (secs < test.end_s)
    if not sel.any():
        return []
    values = np.nan_to_num(np.asarray(prep.rate.values)[sel], nan=0.0)
    start = datetime.fromtimestamp(int(secs[sel][0]), tz=timezone.utc)
    return detect_events(TimeSeries(start, 60, values, "mm_per_h"))


def pl_on_test(prep: Prepared, cfg: RunConfig, times: np.ndarray) -> np.ndarray:
    """Power-law site estimate at the test target minutes."""
    grid = prep.rate.epoch_seconds()
    calibration_end = datetime.fromtimestamp(cfg.preprocess.bounds[0].end_s, tz=timezone.utc)
    est = pl_estimate(prep.rsl_1min, grid, cfg.pl, calibration_end)
    idx = (times - grid[0]) // 60
    return np.asarray(est.values)[idx]


def reproduce(cfg: RunConfig, write: bool = True) -> RunResult:
    """Train every configured model, score it and the power law on the test split."""
    prep = prepare_run(cfg)
    ds = prep.dataset
    test_idx = ds.indices("test")
    if not len(test_idx):
        raise EmptySplit("test split is empty")
    x_test, y_test = ds.inputs(test_idx), ds.targets(test_idx)
    times = ds.target_times(test_idx)
    events = gauge_events(prep, cfg)
    log.info("windows %s", ds.split_counts())

    result = RunResult(cfg, [], events, times, y_test)
    for kind in cfg.models:
        spec = cfg.spec_for(kind, ds.n_features)
        params, history = train(spec, ds, cfg.train)
        pred = predict(params, x_test, cfg.train.eval_batch_size)
        result.predictions[kind] = pred
        result.histories[kind] = history
        result.params[kind] = params
        result.reports.append(evaluate(kind, y_test, pred, times, events))
        log.info("model=%s best_epoch=%d test_rmse=%.6g", kind, history.best_epoch, result.reports[-1].rmse)

    pl = pl_on_test(prep, cfg, times)
    if np.isnan(pl).any():
        raise DataError("power-law estimate has gaps on the test grid")
    result.predictions[PL_NAME] = pl
    result.reports.append(evaluate(PL_NAME, y_test, pl, times, events))
    log.info("model=%s test_rmse=%.6g", PL_NAME, result.reports[-1].rmse)

    if write:
        write_run(result, cfg.out_dir)
    return result


def write_predictions(path, times, truth, predictions: dict[str, np.ndarray]) -> None:
    """predictions.csv: time, gauge, then one column per model."""
    names = list(predictions)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "gauge"] + names)
        for i, t in enumerate(times):
            stamp = format_time(datetime.fromtimestamp(int(t), tz=timezone.utc))
            w.writerow([stamp, repr(float(truth[i]))] + [repr(float(predictions[n][i])) for n in names])


def write_run(result: RunResult, out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        result.config.save(out / "run.json")
        series = {"gauge": result.truth, **result.predictions}
        emit_report(result.reports, out, result.events, series, result.times)
        write_predictions(out / "predictions.csv", result.times, result.truth, result.predictions)
        (out / "checkpoints").mkdir(exist_ok=True)
        for kind, history in result.histories.items():
            history.write_csv(out / f"history_{kind}.csv")
            save_checkpoint(out / "checkpoints" / f"{kind}.ckpt", result.params[kind], {"best_epoch": history.best_epoch})
    except OSError as exc:
        raise IoFailure(f"cannot write run outputs to {out}: {exc}") from exc
    return out


def replay(run_json, out_dir=None) -> RunResult:
    """Re-run a finished run from its run.json alone."""
    cfg = RunConfig.load(run_json)
    if out_dir is not None:
        cfg.out_dir = str(out_dir)
    return reproduce(cfg)


def read_predictions(path) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Inverse of write_predictions; also accepts a plain two-column rate CSV."""
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"{path} does not exist")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        rows = [r for r in reader if r]
    if not header or len(header) < 2 or header[0] != "time":
        raise DataError(f"{path}: expected a 'time' column followed by prediction columns")
    if not rows:
        raise DataError(f"{path} has no data rows")
    times = np.array([int(parse_time(r[0]).timestamp()) for r in rows], dtype=np.int64)
    cols = {}
    for j, name in enumerate(header[1:], start=1):
        cols[name] = np.array([float(r[j]) if j < len(r) and r[j] != "" else np.nan for r in rows])
    return times, cols


def link_rsl_1min(links: list[LinkData], cfg: RunConfig) -> list[tuple]:
    p = cfg.preprocess
    return [(l.meta, impute(downsample_rsl(l.rsl), p.impute_order, p.impute_neighbors)) for l in links]


def compare_pl(cfg: RunConfig, calibration_end: datetime | None = None) -> tuple[TimeSeries, TimeSeries]:
    """Power-law estimate and smoothed gauge rate on the gauge's 1-min grid."""
    links, gauge = load_inputs(cfg)
    rate = gauge_to_rate(gauge, cfg.preprocess.smooth_win)
    est = pl_estimate(link_rsl_1min(links, cfg), rate, cfg.pl, calibration_end)
    return est, rate
