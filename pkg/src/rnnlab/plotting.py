"""Minimal SVG line charts for learning curves."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf")


def nice_ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    """Round-valued ticks covering ``[lo, hi]``."""
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / max(count, 1)
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 5, 10) if m * mag >= raw)
    first = math.ceil(lo / step - 1e-9) * step
    ticks = []
    t = first
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 12))
        t += step
    return ticks


def _fmt(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-3:
        return f"{v:.0e}"
    return f"{v:g}"


def line_chart(series: list[list[tuple[float, float]]], names: list[str], *, x_label: str = "",
               y_label: str = "", log_y: bool = False, title: str = "", width: int = 720,
               height: int = 440) -> str:
    """One polyline per series of ``(x, y)`` points, with axes, ticks and a legend.

    With ``log_y`` the y axis is base-10 logarithmic and every y must be positive.
    """
    if not series or len(series) != len(names):
        raise ValueError("need one name per non-empty series")
    if any(not s for s in series):
        raise ValueError("every series needs at least one point")
    if log_y and any(y <= 0 for s in series for _, y in s):
        raise ValueError("log scale needs positive values")
    ty = (lambda y: math.log10(y)) if log_y else (lambda y: y)
    xs = [x for s in series for x, _ in s]
    ys = [ty(y) for s in series for _, y in s]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    left, right, top, bottom = 70, 170, 40, 50
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    if title:
        out.append(f'<text x="{left + pw / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>')
    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    for t in nice_ticks(x0, x1):
        if x0 <= t <= x1:
            out.append(f'<line x1="{px(t):.2f}" y1="{top + ph}" x2="{px(t):.2f}" y2="{top + ph + 5}" stroke="black"/>')
            out.append(f'<text x="{px(t):.2f}" y="{top + ph + 18}" text-anchor="middle">{_fmt(t)}</text>')
    if log_y:
        yticks = [float(e) for e in range(math.ceil(y0), math.floor(y1) + 1)] or [y0, y1]
        label = lambda t: _fmt(10 ** t)
    else:
        yticks = [t for t in nice_ticks(y0, y1) if y0 <= t <= y1]
        label = _fmt
    for t in yticks:
        out.append(f'<line x1="{left - 5}" y1="{py(t):.2f}" x2="{left}" y2="{py(t):.2f}" stroke="black"/>')
        out.append(f'<line x1="{left}" y1="{py(t):.2f}" x2="{left + pw}" y2="{py(t):.2f}" stroke="#dddddd"/>')
        out.append(f'<text x="{left - 8}" y="{py(t) + 4:.2f}" text-anchor="end">{label(t)}</text>')
    if x_label:
        out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle">{escape(x_label)}</text>')
    if y_label:
        ylab = y_label + (" (log)" if log_y else "")
        out.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" '
                   f'transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(ylab)}</text>')
    for i, (pts, name) in enumerate(zip(series, names)):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{px(x):.2f},{py(ty(y)):.2f}" for x, y in pts)
        out.append(f'<polyline class="series" data-name="{escape(name, {chr(34): "&quot;"})}" fill="none" '
                   f'stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        ly = top + 14 + 18 * i
        out.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 38}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
