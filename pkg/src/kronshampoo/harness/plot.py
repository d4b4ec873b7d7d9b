"""Dependency-free SVG line plots of run CSVs.

Output bytes depend only on the CSV contents: series are sorted, numbers
are printed with fixed precision and no timestamps are embedded.
"""
from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from pathlib import Path
from xml.sax.saxutils import escape

from ..errors import DataError
from .experiments import CSV_HEADER, atomic_write

WIDTH, HEIGHT = 640, 400
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 60, 200, 30, 50
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
           "#7f7f7f", "#bcbd22", "#17becf")


def read_rows(text: str):
    """Parse a run CSV, enforcing the exact header and numeric columns."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("CSV is empty") from None
    if tuple(header) != CSV_HEADER:
        raise DataError(f"CSV header must be {','.join(CSV_HEADER)}")
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if len(rec) != len(CSV_HEADER):
            raise DataError(f"line {lineno}: expected {len(CSV_HEADER)} fields, got {len(rec)}")
        row = dict(zip(CSV_HEADER, rec))
        try:
            row["step"] = int(row["step"])
            row["cosine"] = float(row["cosine"])
            row["batch_size"] = int(row["batch_size"]) if row["batch_size"] else None
        except ValueError as exc:
            raise DataError(f"line {lineno}: {exc}") from None
        if not math.isfinite(row["cosine"]):
            raise DataError(f"line {lineno}: cosine is not finite")
        rows.append(row)
    return rows


def series_of(rows):
    """Group into ``{label: [(x, y), ...]}``.

    The x axis is ``batch_size`` when every row comes from one step and
    carries a batch size (batch sweeps), and ``step`` otherwise.
    """
    by_batch = bool(rows) and len({r["step"] for r in rows}) == 1 and all(
        r["batch_size"] is not None for r in rows)
    out = defaultdict(list)
    for r in rows:
        label = f"{r['target']}/{r['estimator']}"
        if r["label_mode"]:
            label += f"/{r['label_mode']}"
        x = r["batch_size"] if by_batch else r["step"]
        out[label].append((float(x), r["cosine"]))
    return {k: sorted(v) for k, v in sorted(out.items())}, ("batch size" if by_batch else "step")


def _f(v):
    return f"{v:.2f}"


def _scale(lo, hi):
    if hi - lo <= 0:
        pad = abs(lo) * 0.05 or 0.5
        return lo - pad, hi + pad
    return lo, hi


def render_svg(series, x_label="step", title="") -> str:
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    if not xs:
        raise DataError("nothing to plot")
    x0, x1 = _scale(min(xs), max(xs))
    y0, y1 = _scale(min(ys), max(ys))
    pw = WIDTH - MARGIN_L - MARGIN_R
    ph = HEIGHT - MARGIN_T - MARGIN_B

    def px(x):
        return MARGIN_L + (x - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN_T + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" '
        f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" '
        'stroke="black"/>',
    ]
    if title:
        out.append(f'<text x="{MARGIN_L}" y="20" font-size="14">{escape(title)}</text>')
    for i in range(5):
        xv = x0 + (x1 - x0) * i / 4
        yv = y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{_f(px(xv))}" y="{HEIGHT - MARGIN_B + 16}" font-size="10" '
                   f'text-anchor="middle">{xv:.4g}</text>')
        out.append(f'<text x="{MARGIN_L - 4}" y="{_f(py(yv) + 3)}" font-size="10" '
                   f'text-anchor="end">{yv:.4g}</text>')
    out.append(f'<text x="{_f(MARGIN_L + pw / 2)}" y="{HEIGHT - 12}" font-size="12" '
               f'text-anchor="middle">{escape(x_label)}</text>')
    out.append(f'<text x="14" y="{_f(MARGIN_T + ph / 2)}" font-size="12" '
               f'transform="rotate(-90 14 {_f(MARGIN_T + ph / 2)})" '
               'text-anchor="middle">cosine</text>')
    for i, (label, pts) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{_f(px(x))},{_f(py(y))}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                   f'points="{coords}"/>')
        for x, y in pts:
            out.append(f'<circle cx="{_f(px(x))}" cy="{_f(py(y))}" r="2" fill="{color}"/>')
        ly = MARGIN_T + 14 * i + 10
        lx = WIDTH - MARGIN_R + 10
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 16}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 22}" y="{ly}" font-size="10">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot(csv_path, svg_path=None, title=None) -> Path:
    """Render ``csv_path`` to SVG (default: same name with ``.svg``)."""
    csv_path = Path(csv_path)
    try:
        text = csv_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {csv_path}: {exc.strerror}") from None
    series, x_label = series_of(read_rows(text))
    svg_path = Path(svg_path) if svg_path else csv_path.with_suffix(".svg")
    atomic_write(svg_path, render_svg(series, x_label, csv_path.stem if title is None else title))
    return svg_path
