"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence.  The default data directory comes from ``CMLRAIN_DATA_DIR``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from cmlrain import __version__
from cmlrain.autodiff import set_debug
from cmlrain.config import RunConfig, read_json, set_path, write_json
from cmlrain.errors import CmlRainError, ConfigInvalid, DataError, IoFailure
from cmlrain.evaluation import detect_events, evaluate
from cmlrain.ingest import SynthConfig, parse_time, read_rate_csv, synth_dataset, write_data_dir
from cmlrain.model import ModelSpec, load_checkpoint, predict, save_checkpoint
from cmlrain.pipeline import compare_pl, prepare_run, read_predictions, reproduce, write_predictions
from cmlrain.pl_baseline import PLConfig
from cmlrain.preprocess import WindowedDataset
from cmlrain.report import emit_report, fmt_metric, write_events
from cmlrain.train import TrainConfig, train

log = logging.getLogger("cmlrain")

ENV_DATA_DIR = "CMLRAIN_DATA_DIR"
LOG_FORMAT = "%(asctime)s cmlrain %(levelname)s %(name)s: %(message)s"


def _deep_merge(base: dict, top: dict) -> dict:
    out = dict(base)
    for k, v in top.items():
        out[k] = _deep_merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _parse_set(item: str) -> tuple[str, object]:
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigInvalid(f"--set expects key=value, got {item!r}")
    try:
        return key, json.loads(raw)
    except json.JSONDecodeError:
        return key, raw


def resolve_config(args) -> RunConfig:
    """Config file, then the synthetic profile defaults, then flags, then ``--set``."""
    given = read_json(args.config) if getattr(args, "config", None) else {}
    synthetic = bool(getattr(args, "synthetic", False) or given.get("synthetic", False))
    seed = args.seed if getattr(args, "seed", None) is not None else given.get("seed", 0)
    days = args.days if getattr(args, "days", None) is not None else given.get("synth_days")
    if synthetic:
        # split bounds of the synthetic profile scale with the record length
        desk = RunConfig.desk(seed) if days is None else RunConfig.desk(seed, synth_days=days)
        d = _deep_merge(desk.to_dict(), given)
    else:
        d = dict(given)
    d["synthetic"] = synthetic
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
        d.setdefault("train", {})["seed"] = args.seed
    if getattr(args, "days", None) is not None:
        d["synth_days"] = args.days
    data_dir = getattr(args, "data_dir", None) or d.get("data_dir") or os.environ.get(ENV_DATA_DIR)
    if data_dir and not synthetic:
        d["data_dir"] = str(data_dir)
    if getattr(args, "out", None):
        d["out_dir"] = str(args.out)
    for item in getattr(args, "set", None) or []:
        key, value = _parse_set(item)
        set_path(d, key, value)
    return RunConfig.from_dict(d)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = SynthConfig.clean() if args.clean else SynthConfig()
    ds = synth_dataset(args.seed, args.days, cfg)
    out = write_data_dir(args.out, ds)
    write_json(out / "synth.json", {"seed": args.seed, "days": args.days, "config": cfg.to_dict()})
    log.info("wrote synthetic data dir %s (%d links, %d days)", out, len(ds.links), args.days)
    return 0


def cmd_preprocess(args) -> int:
    cfg = resolve_config(args)
    prep = prepare_run(cfg)
    out = Path(cfg.out_dir)
    prep.dataset.save(out)
    cfg.save(out / "run.json")
    log.info("windows %s written to %s", prep.dataset.split_counts(), out)
    return 0


def cmd_train(args) -> int:
    dataset = WindowedDataset.load(args.data)
    spec_dict = read_json(args.spec)
    spec_dict.setdefault("n_features", dataset.n_features)
    spec_dict.setdefault("window_len", dataset.window_len)
    spec = ModelSpec.from_dict(spec_dict)
    tdict = read_json(args.train_config) if args.train_config else {}
    for flag in ("epochs", "lr", "batch_size", "max_steps"):
        if getattr(args, flag) is not None:
            tdict[flag] = getattr(args, flag)
    tdict["seed"] = args.seed
    tcfg = TrainConfig.from_dict(tdict)
    params, history = train(spec, dataset, tcfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, params, {"train": tcfg.to_dict(), "best_epoch": history.best_epoch})
    history.write_csv(args.history or out.with_suffix(".history.csv"))
    log.info("best epoch %d, val loss %.6g", history.best_epoch, history.val_loss[history.best_epoch])
    return 0


def cmd_predict(args) -> int:
    dataset = WindowedDataset.load(args.data)
    params = load_checkpoint(args.checkpoint)
    idx = dataset.indices(args.split)
    if not len(idx):
        raise DataError(f"split {args.split!r} holds no windows")
    pred = predict(params, dataset.inputs(idx))
    write_predictions(args.out, dataset.target_times(idx), dataset.targets(idx), {params.spec.kind: pred})
    return 0


def cmd_evaluate(args) -> int:
    times, preds = read_predictions(args.pred)
    preds.pop("gauge", None)
    if not preds:
        raise DataError(f"{args.pred} holds no prediction columns")
    truth = read_rate_csv(args.truth)
    secs = truth.epoch_seconds()
    idx = (times - secs[0]) // truth.step_s
    inside = (idx >= 0) & (idx < len(secs)) & ((times - secs[0]) % truth.step_s == 0)
    if not inside.all():
        raise DataError(f"{int((~inside).sum())} prediction times fall outside the truth series")
    y = np.asarray(truth.values)[idx]
    ok = np.isfinite(y)
    for name, p in preds.items():
        ok &= np.isfinite(p)
    if ok.sum() < 2:
        raise DataError("fewer than two aligned finite samples")
    events = detect_events(truth.with_values(np.nan_to_num(np.asarray(truth.values), nan=0.0)))
    reports = [evaluate(name, y[ok], p[ok], times[ok], events) for name, p in preds.items()]
    emit_report(reports, args.out, events, {"gauge": y[ok], **{k: v[ok] for k, v in preds.items()}}, times[ok])
    for r in reports:
        print(f"{r.model}: rmse={fmt_metric(r.rmse)} r2={fmt_metric(r.r2)} pcc={fmt_metric(r.pcc)} mae={fmt_metric(r.mae)}")
    return 0


def cmd_compare_pl(args) -> int:
    cfg = resolve_config(args)
    if args.pl_config:
        cfg.pl = PLConfig.from_json(args.pl_config)
    calibration_end = parse_time(args.calibration_end) if args.calibration_end else None
    est, rate = compare_pl(cfg, calibration_end)
    times = rate.epoch_seconds()
    write_predictions(args.out, times, np.asarray(rate.values), {"PL": np.asarray(est.values)})
    ok = np.isfinite(rate.values) & np.isfinite(est.values)
    if ok.sum() >= 2:
        r = evaluate("PL", np.asarray(rate.values)[ok], np.asarray(est.values)[ok], times[ok])
        print(f"PL: rmse={fmt_metric(r.rmse)} r2={fmt_metric(r.r2)} pcc={fmt_metric(r.pcc)} mae={fmt_metric(r.mae)}")
    return 0


def cmd_detect_events(args) -> int:
    rate = read_rate_csv(args.rate)
    if np.isnan(rate.values).any():
        log.warning("%d missing minutes treated as dry", int(np.isnan(rate.values).sum()))
        rate = rate.with_values(np.nan_to_num(np.asarray(rate.values), nan=0.0))
    events = detect_events(rate)
    write_events(args.out, events)
    print(f"{len(events)} events")
    return 0


def cmd_reproduce(args) -> int:
    cfg = resolve_config(args)
    result = reproduce(cfg)
    for r in result.reports:
        print(f"{r.model}: rmse={fmt_metric(r.rmse)} r2={fmt_metric(r.r2)} pcc={fmt_metric(r.pcc)} mae={fmt_metric(r.mae)}")
    log.info("outputs in %s", cfg.out_dir)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmlrain", description="Rain-rate retrieval from microwave links.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging and NaN guards on every op")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_flags(p, out_help: str):
        p.add_argument("--config", help="run config JSON (a previous run.json replays that run)")
        p.add_argument("--data-dir", help=f"data directory (default: ${ENV_DATA_DIR})")
        p.add_argument("--synthetic", action="store_true", help="generate data instead of reading a data dir")
        p.add_argument("--days", type=int, help="length of the synthetic record")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help=out_help)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. train.epochs=2")

    p = sub.add_parser("synth", help="write a synthetic data directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--days", type=int, default=12)
    p.add_argument("--clean", action="store_true", help="no noise, drift, wet-antenna loss or dropouts")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="build the windowed dataset")
    run_flags(p, "output directory for dataset.bin and manifest.json")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one model on a preprocessed dataset")
    p.add_argument("--spec", required=True, help="model spec JSON")
    p.add_argument("--data", required=True, help="preprocessed dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-config", help="training config JSON")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--history", help="history CSV path (default: next to the checkpoint)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write predictions of a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="preprocessed dataset directory")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True, help="predictions CSV")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against a gauge rate series")
    p.add_argument("--pred", required=True, help="CSV: time, then one column per model")
    p.add_argument("--truth", required=True, help="CSV: time, rain rate")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare-pl", help="power-law estimate against the gauge")
    run_flags(p, "output CSV (time, gauge, PL)")
    p.add_argument("--data", dest="data_dir", help=argparse.SUPPRESS)
    p.add_argument("--pl-config", help="power-law config JSON (coefficient table, thresholds)")
    p.add_argument("--calibration-end", help="end of the wet/dry calibration period, ISO time")
    p.set_defaults(func=cmd_compare_pl)

    p = sub.add_parser("detect-events", help="find rain events in a 1-min rate series")
    p.add_argument("--rate", required=True, help="CSV: time, rain rate")
    p.add_argument("--out", required=True, help="events CSV")
    p.set_defaults(func=cmd_detect_events)

    p = sub.add_parser("reproduce", help="train all models plus the power law and report test metrics")
    run_flags(p, "run directory")
    p.set_defaults(func=cmd_reproduce)
    return parser


def setup_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT, "%Y-%m-%dT%H:%M:%S"))
    root = logging.getLogger("cmlrain")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose, args.quiet)
    set_debug(args.verbose)
    if args.command == "compare-pl" and not args.out:
        parser.error("compare-pl needs --out")
    try:
        return args.func(args)
    except CmlRainError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except FloatingPointError as exc:
        log.error("NumericError: %s", exc)
        return 4
    except OSError as exc:
        log.error("IoFailure: %s", exc)
        return IoFailure.exit_code
    finally:
        set_debug(False)


if __name__ == "__main__":
    sys.exit(main())
