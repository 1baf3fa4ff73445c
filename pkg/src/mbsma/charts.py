"""Minimal SVG line charts (metric against landmark, one series per method)."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
           "#7f7f7f", "#bcbd22", "#17becf")
WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=64, right=170, top=40, bottom=52)


def nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    """Round tick positions covering ``[lo, hi]``."""
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    raw = (hi - lo) / max(n - 1, 1)
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    start = math.floor(lo / step) * step
    ticks = []
    k = 0
    while True:
        v = round(start + k * step, 12)
        ticks.append(v)
        if v >= hi - 1e-12:
            break
        k += 1
    return ticks


def _num(v: float) -> str:
    return f"{v:.2f}"


def _label(v: float) -> str:
    return f"{v:g}"


def line_chart(series: dict, x_label: str = "", y_label: str = "", title: str = "") -> str:
    """SVG document for ``{name: [(x, y), ...]}``; series drawn in sorted name order."""
    pts = [p for s in series.values() for p in s]
    xs = [p[0] for p in pts] or [0.0, 1.0]
    ys = [p[1] for p in pts] or [0.0, 1.0]
    xt, yt = nice_ticks(min(xs), max(xs)), nice_ticks(min(ys), max(ys))
    x0, x1, y0, y1 = xt[0], xt[-1], yt[0], yt[-1]
    L, R, T, B = MARGIN["left"], WIDTH - MARGIN["right"], MARGIN["top"], HEIGHT - MARGIN["bottom"]

    def px(x):
        return L + (x - x0) / (x1 - x0) * (R - L)

    def py(y):
        return B - (y - y0) / (y1 - y0) * (B - T)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{(L + R) / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>']
    for v in yt:
        out.append(f'<line x1="{L}" x2="{R}" y1="{_num(py(v))}" y2="{_num(py(v))}" stroke="#e5e5e5"/>')
        out.append(f'<text x="{L - 6}" y="{_num(py(v) + 4)}" text-anchor="end">{_label(v)}</text>')
    for v in xt:
        out.append(f'<line x1="{_num(px(v))}" x2="{_num(px(v))}" y1="{B}" y2="{B + 5}" stroke="black"/>')
        out.append(f'<text x="{_num(px(v))}" y="{B + 18}" text-anchor="middle">{_label(v)}</text>')
    out.append(f'<line x1="{L}" x2="{R}" y1="{B}" y2="{B}" stroke="black"/>')
    out.append(f'<line x1="{L}" x2="{L}" y1="{T}" y2="{B}" stroke="black"/>')
    out.append(f'<text x="{(L + R) / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(x_label)}</text>')
    out.append(f'<text x="16" y="{(T + B) / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {(T + B) / 2:.1f})">{escape(y_label)}</text>')
    for i, name in enumerate(sorted(series)):
        col = PALETTE[i % len(PALETTE)]
        data = sorted(series[name])
        path = " ".join(f"{_num(px(x))},{_num(py(y))}" for x, y in data)
        out.append(f'<polyline points="{path}" fill="none" stroke="{col}" stroke-width="2"/>')
        for x, y in data:
            out.append(f'<circle cx="{_num(px(x))}" cy="{_num(py(y))}" r="3" fill="{col}"/>')
        ly = T + 10 + 18 * i
        out.append(f'<line x1="{R + 14}" x2="{R + 34}" y1="{ly}" y2="{ly}" stroke="{col}" stroke-width="2"/>')
        out.append(f'<text x="{R + 40}" y="{ly + 4}">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
