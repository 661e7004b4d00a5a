"""Dependency-free SVG line charts from trial CSVs."""

from __future__ import annotations

import csv
import math
from collections import OrderedDict
from pathlib import Path
from xml.sax.saxutils import escape

from .sweep import atomic_write

WIDTH, HEIGHT = 640, 420
MARGIN = dict(left=70, right=150, top=30, bottom=55)
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


class PlotError(ValueError):
    pass


def _num(s: str, col: str) -> float:
    try:
        return float(s)
    except ValueError:
        raise PlotError(f"column {col!r} is not numeric (value {s!r})") from None


def aggregate(rows: list[dict], x: str, y: str, group_by: str | None):
    """``{group: [(x, mean_y, stderr_y), ...]}`` sorted by x; groups in first-seen order."""
    cells: "OrderedDict[str, dict[float, list[float]]]" = OrderedDict()
    for r in rows:
        g = r[group_by] if group_by else ""
        xv, yv = _num(r[x], x), _num(r[y], y)
        if math.isnan(xv) or math.isnan(yv):
            continue
        cells.setdefault(g, {}).setdefault(xv, []).append(yv)
    out = OrderedDict()
    for g, byx in cells.items():
        pts = []
        for xv in sorted(byx):
            ys = byx[xv]
            m = sum(ys) / len(ys)
            se = 0.0
            if len(ys) > 1:
                se = math.sqrt(sum((v - m) ** 2 for v in ys) / (len(ys) - 1) / len(ys))
            pts.append((xv, m, se))
        out[g] = pts
    return out


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((s * mag for s in (1, 2, 2.5, 5, 10) if s * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step - 1e-9) * step
    ticks = []
    v = start
    while v <= hi + 1e-9 * step:
        ticks.append(round(v, 12))
        v += step
    return ticks


def _label(v: float) -> str:
    return f"{v:.6g}"


def render_svg(series, x: str, y: str, group_by: str | None) -> str:
    allpts = [p for pts in series.values() for p in pts]
    if not allpts:
        raise PlotError("no numeric data to plot")
    xs = [p[0] for p in allpts]
    lo_y = min(p[1] - p[2] for p in allpts)
    hi_y = max(p[1] + p[2] for p in allpts)
    x0, x1 = min(xs), max(xs)
    if x0 == x1:
        x0, x1 = x0 - 1, x1 + 1
    if lo_y == hi_y:
        lo_y, hi_y = lo_y - 0.5, hi_y + 0.5
    pad = 0.05 * (hi_y - lo_y)
    lo_y, hi_y = lo_y - pad, hi_y + pad

    L, R, Tm, Bm = MARGIN["left"], WIDTH - MARGIN["right"], MARGIN["top"], HEIGHT - MARGIN["bottom"]
    sx = lambda v: L + (v - x0) / (x1 - x0) * (R - L)
    sy = lambda v: Bm - (v - lo_y) / (hi_y - lo_y) * (Bm - Tm)

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<line x1="{L}" y1="{Bm}" x2="{R}" y2="{Bm}" stroke="black"/>',
        f'<line x1="{L}" y1="{Tm}" x2="{L}" y2="{Bm}" stroke="black"/>',
    ]
    for tv in _ticks(x0, x1):
        px = sx(tv)
        out.append(f'<line x1="{px:.2f}" y1="{Bm}" x2="{px:.2f}" y2="{Bm + 5}" stroke="black"/>')
        out.append(f'<text x="{px:.2f}" y="{Bm + 18}" text-anchor="middle">{escape(_label(tv))}</text>')
    for tv in _ticks(lo_y, hi_y):
        py = sy(tv)
        out.append(f'<line x1="{L - 5}" y1="{py:.2f}" x2="{L}" y2="{py:.2f}" stroke="black"/>')
        out.append(f'<text x="{L - 8}" y="{py + 4:.2f}" text-anchor="end">{escape(_label(tv))}</text>')
    out.append(f'<text x="{(L + R) / 2:.2f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(x)}</text>')
    out.append(f'<text x="16" y="{(Tm + Bm) / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {(Tm + Bm) / 2:.2f})">{escape(y)}</text>')

    for i, (g, pts) in enumerate(series.items()):
        c = COLORS[i % len(COLORS)]
        if len(pts) > 1:
            path = " ".join(f"{sx(p[0]):.2f},{sy(p[1]):.2f}" for p in pts)
            out.append(f'<polyline points="{path}" fill="none" stroke="{c}" stroke-width="1.5"/>')
        for xv, m, se in pts:
            px = sx(xv)
            if se > 0:
                out.append(f'<line x1="{px:.2f}" y1="{sy(m - se):.2f}" x2="{px:.2f}" '
                           f'y2="{sy(m + se):.2f}" stroke="{c}"/>')
            out.append(f'<circle cx="{px:.2f}" cy="{sy(m):.2f}" r="3" fill="{c}"/>')
        ly = Tm + 16 * i + 8
        name = f"{group_by}={g}" if group_by else y
        out.append(f'<line x1="{R + 12}" y1="{ly}" x2="{R + 32}" y2="{ly}" stroke="{c}" stroke-width="2"/>')
        out.append(f'<text x="{R + 38}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot(csv_path, x: str, y: str, group_by: str | None = None, out_path=None) -> Path:
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        for col in (x, y) + ((group_by,) if group_by else ()):
            if col not in cols:
                raise PlotError(f"column {col!r} not found in {csv_path}; available: {cols}")
        rows = list(reader)
    svg = render_svg(aggregate(rows, x, y, group_by), x, y, group_by)
    out = Path(out_path) if out_path else Path(csv_path).with_suffix(".svg")
    atomic_write(out, svg)
    return out
