"""Minimal self-contained SVG line charts."""
from __future__ import annotations

import math
from html import escape

COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _span(values) -> tuple[float, float]:
    finite = [v for v in values if math.isfinite(v)]
    if not finite:
        return 0.0, 1.0
    lo, hi = min(finite), max(finite)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def line_chart(series: dict[str, tuple[list, list]], *, title: str = "", xlabel: str = "x",
               ylabel: str = "y", width: int = 560, height: int = 360) -> str:
    """One polyline per series; each series is scaled to its own y-range when
    several are drawn, so shapes stay comparable across units."""
    left, right, top, bottom = 60, 140, 40, 50
    pw, ph = width - left - right, height - top - bottom
    xs_all = [float(x) for xs, _ in series.values() for x in xs]
    x0, x1 = _span(xs_all)
    shared = len(series) == 1
    y0, y1 = _span([float(y) for _, ys in series.values() for y in ys])

    def px(x):
        return left + (float(x) - x0) / (x1 - x0) * pw

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(ylabel)}</text>',
    ]
    for i in range(5):
        xv = x0 + (x1 - x0) * i / 4
        parts.append(f'<text x="{px(xv):.1f}" y="{top + ph + 16}" text-anchor="middle">{xv:.3g}</text>')
        if shared:
            yv = y0 + (y1 - y0) * i / 4
            yy = top + ph - (yv - y0) / (y1 - y0) * ph
            parts.append(f'<text x="{left - 6}" y="{yy + 4:.1f}" text-anchor="end">{yv:.3g}</text>')
    for k, (name, (xs, ys)) in enumerate(series.items()):
        lo, hi = (y0, y1) if shared else _span([float(y) for y in ys])
        pts = [
            f"{px(x):.1f},{top + ph - (float(y) - lo) / (hi - lo) * ph:.1f}"
            for x, y in zip(xs, ys)
            if math.isfinite(float(y))
        ]
        color = COLORS[k % len(COLORS)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{" ".join(pts)}"/>')
        label = name if shared else f"{name} [{lo:.3g}, {hi:.3g}]"
        parts.append(f'<text x="{left + pw + 8}" y="{top + 16 * (k + 1)}" fill="{color}">{escape(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
