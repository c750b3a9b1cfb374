"""Minimal standalone SVG line plots and bar charts.

Coordinates are written with a fixed number of decimals so identical
inputs give byte-identical files.
"""
from __future__ import annotations

from typing import Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=20, top=40, bottom=50)
COLORS = ("#1f4e9c", "#c0392b", "#2e8b57", "#8e44ad")


def _n(x: float) -> str:
    return f"{x:.2f}"


def _ticks(lo, hi, n=5):
    return np.linspace(lo, hi, n)


def _range(values):
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


class _Frame:
    def __init__(self, xlim, ylim):
        self.xlim, self.ylim = xlim, ylim
        self.x0, self.x1 = MARGIN["left"], WIDTH - MARGIN["right"]
        self.y0, self.y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]

    def px(self, x):
        return self.x0 + (x - self.xlim[0]) / (self.xlim[1] - self.xlim[0]) * (self.x1 - self.x0)

    def py(self, y):
        return self.y0 + (y - self.ylim[0]) / (self.ylim[1] - self.ylim[0]) * (self.y1 - self.y0)

    def axes(self, title, xlabel, ylabel):
        out = [
            f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
            f'<line x1="{self.x0}" y1="{self.y0}" x2="{self.x1}" y2="{self.y0}" stroke="black"/>',
            f'<line x1="{self.x0}" y1="{self.y0}" x2="{self.x0}" y2="{self.y1}" stroke="black"/>',
            f'<text x="{(self.x0 + self.x1) / 2}" y="{HEIGHT - 10}" text-anchor="middle" font-size="12">'
            f"{escape(xlabel)}</text>",
            f'<text x="16" y="{(self.y0 + self.y1) / 2}" text-anchor="middle" font-size="12" '
            f'transform="rotate(-90 16 {(self.y0 + self.y1) / 2})">{escape(ylabel)}</text>',
        ]
        for v in _ticks(*self.xlim):
            x = _n(self.px(v))
            out.append(f'<line x1="{x}" y1="{self.y0}" x2="{x}" y2="{self.y0 + 5}" stroke="black"/>')
            out.append(f'<text x="{x}" y="{self.y0 + 18}" text-anchor="middle" font-size="10">{v:.3g}</text>')
        for v in _ticks(*self.ylim):
            y = _n(self.py(v))
            out.append(f'<line x1="{self.x0 - 5}" y1="{y}" x2="{self.x0}" y2="{y}" stroke="black"/>')
            out.append(f'<text x="{self.x0 - 8}" y="{y}" text-anchor="end" dominant-baseline="middle" '
                       f'font-size="10">{v:.3g}</text>')
        return out


def _document(body):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">\n' + "\n".join(body) + "\n</svg>\n")


def line_plot(x, series: Sequence[tuple], title="", xlabel="", ylabel="") -> str:
    """``series`` holds (label, y values, dashed) tuples sharing the x values."""
    x = np.asarray(x, float)
    ys = [np.asarray(s[1], float) for s in series]
    frame = _Frame(_range(x), _range(np.concatenate(ys)))
    body = frame.axes(title, xlabel, ylabel)
    for i, ((label, _, dashed), y) in enumerate(zip(series, ys)):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{_n(frame.px(a))},{_n(frame.py(b))}" for a, b in zip(x, y))
        dash = ' stroke-dasharray="6,4"' if dashed else ""
        body.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>')
        ly = MARGIN["top"] + 14 * i
        body.append(f'<text x="{WIDTH - MARGIN["right"] - 4}" y="{ly}" text-anchor="end" font-size="11" '
                    f'fill="{color}">{escape(label)}</text>')
    return _document(body)


def bar_chart(values, title="", xlabel="", ylabel="", labels: Optional[Sequence[str]] = None) -> str:
    v = np.asarray(values, float)
    frame = _Frame((0.0, float(len(v))), (0.0, max(float(v.max(initial=0.0)), 1e-12) * 1.05))
    body = frame.axes(title, xlabel, ylabel)
    w = (frame.x1 - frame.x0) / max(len(v), 1)
    for i, h in enumerate(v):
        top = frame.py(h)
        body.append(f'<rect x="{_n(frame.x0 + i * w)}" y="{_n(top)}" width="{_n(max(w - 0.5, 0.1))}" '
                    f'height="{_n(frame.y0 - top)}" fill="{COLORS[0]}"/>')
    if labels is not None and len(labels) <= 40:
        for i, lab in enumerate(labels):
            body.append(f'<text x="{_n(frame.x0 + (i + 0.5) * w)}" y="{frame.y0 + 30}" text-anchor="middle" '
                        f'font-size="8">{escape(lab)}</text>')
    return _document(body)
