"""CSV and SVG report files.

CSV schemas (floats written with ``repr`` so they reload bit-exactly; an
empty cell means undefined)::

    metrics.csv   model,n,rmse,r2,pcc,mae
    per_day.csv   model,date,n,rmse,r2,pcc,mae
    events.csv    start,end,duration_min,peak_mm_h,total_mm
"""

from __future__ import annotations

import csv
import math
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from cmlrain.errors import IoFailure
from cmlrain.evaluation import DayStats, EvalReport, Metrics, RainEvent
from cmlrain.ingest import format_time, parse_time

METRIC_FIELDS = ("model", "n", "rmse", "r2", "pcc", "mae")
DAY_FIELDS = ("model", "date", "n", "rmse", "r2", "pcc", "mae")
EVENT_FIELDS = ("start", "end", "duration_min", "peak_mm_h", "total_mm")

PALETTE = ("#000000", "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _num(v) -> str:
    return "" if v is None else repr(float(v))


def _parse_num(text: str) -> float | None:
    return None if text == "" else float(text)


def emit_report(
    reports: Sequence[EvalReport],
    out_dir,
    events: Sequence[RainEvent] | None = None,
    series: Mapping[str, np.ndarray] | None = None,
    times=None,
) -> list[Path]:
    """Write metrics.csv, per_day.csv, events.csv and (with ``series``) timeseries.svg.

    ``series`` maps a label to a rate array aligned with ``times`` (epoch
    seconds); the ``"gauge"`` entry, when present, is drawn first.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if events is None:
            events = reports[0].events if reports else []
        written = [out / "metrics.csv", out / "per_day.csv", out / "events.csv"]
        with open(written[0], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRIC_FIELDS)
            for r in reports:
                w.writerow([r.model, r.n, _num(r.rmse), _num(r.r2), _num(r.pcc), _num(r.mae)])
        with open(written[1], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(DAY_FIELDS)
            for r in reports:
                for d in r.per_day:
                    m = d.metrics
                    w.writerow([r.model, d.day.isoformat(), m.n, _num(m.rmse), _num(m.r2), _num(m.pcc), _num(m.mae)])
        write_events(written[2], events)
        if series is not None and times is not None:
            path = out / "timeseries.svg"
            path.write_text(render_svg(times, series))
            written.append(path)
    except OSError as exc:
        raise IoFailure(f"cannot write report to {out}: {exc}") from exc
    return written


def write_events(path, events: Sequence[RainEvent]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVENT_FIELDS)
        for e in events:
            w.writerow([format_time(e.start), format_time(e.end), e.duration_min, _num(e.peak_mm_h), _num(e.total_mm)])


def load_report(out_dir) -> tuple[list[EvalReport], list[RainEvent]]:
    root = Path(out_dir)
    reports: dict[str, EvalReport] = {}
    with open(root / "metrics.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            reports[row["model"]] = EvalReport(
                row["model"],
                _parse_num(row["rmse"]),
                _parse_num(row["r2"]),
                _parse_num(row["pcc"]),
                _parse_num(row["mae"]),
                int(row["n"]),
            )
    with open(root / "per_day.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            m = Metrics(
                _parse_num(row["rmse"]), _parse_num(row["r2"]), _parse_num(row["pcc"]), _parse_num(row["mae"]), int(row["n"])
            )
            reports[row["model"]].per_day.append(DayStats(date.fromisoformat(row["date"]), m))
    events = []
    with open(root / "events.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            events.append(
                RainEvent(parse_time(row["start"]), parse_time(row["end"]), float(row["peak_mm_h"]), float(row["total_mm"]))
            )
    for r in reports.values():
        r.events = list(events)
    return list(reports.values()), events


def render_svg(times, series: Mapping[str, np.ndarray], width: int = 1000, height: int = 400) -> str:
    """Self-contained SVG with one polyline per series."""
    t = np.asarray(times, dtype=np.float64)
    margin_l, margin_r, margin_t, margin_b = 70, 150, 20, 60
    pw, ph = width - margin_l - margin_r, height - margin_t - margin_b
    names = sorted(series, key=lambda k: (k != "gauge", k))
    ymax = max([float(np.nanmax(series[k])) for k in names if np.isfinite(series[k]).any()] + [1e-9])
    t0, t1 = (float(t[0]), float(t[-1])) if len(t) else (0.0, 1.0)
    span = max(t1 - t0, 1.0)

    def x_of(v):
        return margin_l + (v - t0) / span * pw

    def y_of(v):
        return margin_t + ph - v / ymax * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<line x1="{margin_l}" y1="{margin_t + ph}" x2="{margin_l + pw}" y2="{margin_t + ph}" stroke="black"/>',
        f'<line x1="{margin_l}" y1="{margin_t}" x2="{margin_l}" y2="{margin_t + ph}" stroke="black"/>',
        f'<text x="{margin_l + pw / 2}" y="{height - 10}" text-anchor="middle" font-size="12">Time (UTC)</text>',
        f'<text x="15" y="{margin_t + ph / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 15 {margin_t + ph / 2})">Rain rate (mm/h)</text>',
    ]
    for k in range(5):
        yv = ymax * k / 4
        parts.append(
            f'<text x="{margin_l - 5}" y="{y_of(yv) + 4:.1f}" text-anchor="end" font-size="10">{yv:.2f}</text>'
        )
        tv = t0 + span * k / 4
        label = datetime.fromtimestamp(tv, tz=timezone.utc).strftime("%m-%d %H:%M")
        parts.append(f'<text x="{x_of(tv):.1f}" y="{margin_t + ph + 15}" text-anchor="middle" font-size="10">{label}</text>')
    for i, name in enumerate(names):
        v = np.asarray(series[name], dtype=np.float64)
        ok = np.isfinite(v)
        pts = " ".join(f"{x_of(a):.2f},{y_of(b):.2f}" for a, b in zip(t[ok], v[ok]))
        color = PALETTE[i % len(PALETTE)]
        label = escape(name)
        parts.append(
            f'<polyline data-series="{label}" fill="none" stroke="{color}" stroke-width="1" points="{pts}"/>'
        )
        ly = margin_t + 15 * (i + 1)
        parts.append(f'<line x1="{width - margin_r + 10}" y1="{ly}" x2="{width - margin_r + 30}" y2="{ly}" stroke="{color}"/>')
        parts.append(f'<text x="{width - margin_r + 35}" y="{ly + 4}" font-size="11">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def fmt_metric(v: float | None) -> str:
    return "undefined" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.4f}"
