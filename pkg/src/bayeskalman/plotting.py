"""Minimal SVG line plots, always written next to a CSV holding the plotted numbers."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 420
MARGIN = dict(left=70, right=160, top=30, bottom=50)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf", "#7f7f7f")


@dataclass(frozen=True)
class Frame:
    """Affine map from data coordinates to SVG pixels."""

    x_lo: float
    x_hi: float
    y_lo: float
    y_hi: float

    def px(self, x):
        w = WIDTH - MARGIN["left"] - MARGIN["right"]
        return MARGIN["left"] + (x - self.x_lo) / (self.x_hi - self.x_lo) * w

    def py(self, y):
        h = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
        return MARGIN["top"] + (self.y_hi - y) / (self.y_hi - self.y_lo) * h


def _span(values):
    lo, hi = min(values), max(values)
    if hi == lo:
        pad = abs(lo) * 0.05 or 1.0
        return lo - pad, hi + pad
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _finite_points(xs, ys):
    return [(float(x), float(y)) for x, y in zip(xs, ys) if math.isfinite(x) and math.isfinite(y)]


def _fmt(v: float) -> str:
    return repr(float(v))


def write_series_csv(series: dict, path, x_label="x", y_label="y") -> Path:
    """Long-format CSV ``series,<x_label>,<y_label>`` with full-precision values."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series", x_label, y_label])
        for name, (xs, ys) in series.items():
            for x, y in zip(xs, ys):
                w.writerow([name, _fmt(x), _fmt(y)])
    return path


def emit_svg_line_plot(series: dict, x_label: str, y_label: str, path, title: str = "") -> Path:
    """Write ``path`` (SVG) and its sibling ``.csv``; ``series`` maps a name to ``(xs, ys)``.

    Non-finite points stay in the CSV but are left out of the drawing. A series
    with a single drawable point is shown as a marker.
    """
    if not series or not any(len(xs) for xs, _ in series.values()):
        raise ValueError("nothing to plot")
    path = Path(path).with_suffix(".svg")
    write_series_csv(series, path.with_suffix(".csv"), x_label, y_label)

    pts = {name: _finite_points(xs, ys) for name, (xs, ys) in series.items()}
    all_pts = [p for v in pts.values() for p in v] or [(0.0, 0.0)]
    frame = Frame(*_span([p[0] for p in all_pts]), *_span([p[1] for p in all_pts]))

    left, top = MARGIN["left"], MARGIN["top"]
    right, bottom = WIDTH - MARGIN["right"], HEIGHT - MARGIN["bottom"]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{left}" y="{top}" width="{right - left}" height="{bottom - top}" fill="none" stroke="black"/>',
    ]
    for k in range(5):
        xv = frame.x_lo + (frame.x_hi - frame.x_lo) * k / 4
        yv = frame.y_lo + (frame.y_hi - frame.y_lo) * k / 4
        out.append(f'<text x="{frame.px(xv):.2f}" y="{bottom + 16}" text-anchor="middle">{xv:.3g}</text>')
        out.append(f'<text x="{left - 6}" y="{frame.py(yv) + 4:.2f}" text-anchor="end">{yv:.3g}</text>')
    out.append(f'<text x="{(left + right) / 2}" y="{HEIGHT - 12}" text-anchor="middle">{escape(x_label)}</text>')
    out.append(f'<text x="16" y="{(top + bottom) / 2}" text-anchor="middle" '
               f'transform="rotate(-90 16 {(top + bottom) / 2})">{escape(y_label)}</text>')
    if title:
        out.append(f'<text x="{(left + right) / 2}" y="18" text-anchor="middle">{escape(title)}</text>')

    for i, (name, points) in enumerate(pts.items()):
        color = PALETTE[i % len(PALETTE)]
        label = escape(str(name), {'"': "&quot;"})
        if len(points) == 1:
            x, y = points[0]
            out.append(f'<circle data-series="{label}" cx="{frame.px(x)!r}" cy="{frame.py(y)!r}" r="3" fill="{color}"/>')
        elif points:
            coords = " ".join(f"{frame.px(x)!r},{frame.py(y)!r}" for x, y in points)
            out.append(f'<polyline data-series="{label}" fill="none" stroke="{color}" stroke-width="1.5" '
                       f'points="{coords}"/>')
        ly = top + 14 + 18 * i
        out.append(f'<line x1="{right + 10}" y1="{ly}" x2="{right + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text class="legend" x="{right + 36}" y="{ly + 4}">{escape(str(name))}</text>')
    out.append("</svg>")
    path.write_text("\n".join(out) + "\n")
    return path
