"""Minimal hand-written SVG output (scatter plots and the chart cover diagram)."""

from __future__ import annotations

import math
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


class _Canvas:
    def __init__(self, lo, hi, size=600, margin=30):
        self.lo = np.asarray(lo, float)
        span = np.asarray(hi, float) - self.lo
        self.s = (size - 2 * margin) / max(span.max(), 1e-300)
        self.size, self.margin = size, margin
        self.items: list[str] = []

    def xy(self, p):
        x = self.margin + (p[0] - self.lo[0]) * self.s
        y = self.size - self.margin - (p[1] - self.lo[1]) * self.s
        return x, y

    def add(self, item: str) -> None:
        self.items.append(item)

    def render(self, title: str = "") -> str:
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.size}" height="{self.size}" '
                f'viewBox="0 0 {self.size} {self.size}">\n')
        body = [f'<rect width="100%" height="100%" fill="white"/>']
        if title:
            body.append(f'<text x="{self.margin}" y="{self.margin * 0.6:.1f}" font-size="13" '
                        f'font-family="sans-serif">{escape(title)}</text>')
        return head + "\n".join(body + self.items) + "\n</svg>\n"


def scatter_svg(points, colors: Sequence[int] = (), title: str = "", labels=None, max_labels: int = 200) -> str:
    pts = np.asarray(points, float).reshape(-1, 2)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    cv = _Canvas(lo, hi)
    r = 1.2 if len(pts) > 2000 else 2.0
    for i, p in enumerate(pts):
        x, y = cv.xy(p)
        c = PALETTE[colors[i] % len(PALETTE)] if len(colors) else "#333333"
        cv.add(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r}" fill="{c}"/>')
    if labels is not None:
        for i in range(min(len(pts), max_labels)):
            x, y = cv.xy(pts[i])
            cv.add(f'<text x="{x + 2:.2f}" y="{y - 2:.2f}" font-size="6">{labels[i][0]},{labels[i][1]}</text>')
    return cv.render(title)


def labeling_svg(points, labels, labeled, fit=None, title: str = "") -> str:
    """Points coloured by label parity, with fitted level lines ``f_i = h * n`` when ``fit`` is given."""
    pts = np.asarray(points, float)
    colors = [int((labels[i, 0] % 2) + 2 * (labels[i, 1] % 2)) if labeled[i] else 3 for i in range(len(pts))]
    svg = scatter_svg(pts, colors, title)
    if fit is None:
        return svg
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    cv = _Canvas(lo, hi)
    g = np.stack(np.meshgrid(np.linspace(lo[0], hi[0], 60), np.linspace(lo[1], hi[1], 60), indexing="ij"), -1)
    vals = fit.evaluate(g.reshape(-1, 2)).reshape(60, 60, 2) / fit.h
    lines = []
    for comp in range(2):
        v = vals[..., comp]
        step = max(1, int((v.max() - v.min()) // 10))
        for level in np.arange(math.ceil(v.min()), math.floor(v.max()) + 1, step):
            if comp == 0:
                seg = [g[np.argmin(np.abs(v[:, j] - level)), j] for j in range(v.shape[1])]
            else:
                seg = [g[i, np.argmin(np.abs(v[i, :] - level))] for i in range(v.shape[0])]
            path = " ".join("{:.1f},{:.1f}".format(*cv.xy(p)) for p in seg)
            lines.append(f'<polyline points="{path}" fill="none" stroke="#999" stroke-width="0.5"/>')
    return svg.replace("\n</svg>", "\n" + "\n".join(lines) + "\n</svg>")


def cover_svg(center, r_min: float, r_max: float, rects, transitions: dict, holonomy_text: str = "") -> str:
    """Annulus with loop rectangles and integer transition labels on each overlap.

    ``rects`` are ``(center, half_widths)`` pairs in rescaled coordinates and
    ``transitions`` maps ``(i, j)`` to a 2x2 integer row tuple.
    """
    c = np.asarray(center, float)
    ext = r_max * 1.1
    cv = _Canvas(c - ext, c + ext)
    x0, y0 = cv.xy(c)
    cv.add(f'<circle cx="{x0:.2f}" cy="{y0:.2f}" r="{r_max * cv.s:.2f}" fill="#f3f3f3" stroke="#bbb"/>')
    cv.add(f'<circle cx="{x0:.2f}" cy="{y0:.2f}" r="{r_min * cv.s:.2f}" fill="white" stroke="#bbb"/>')
    cv.add(f'<circle cx="{x0:.2f}" cy="{y0:.2f}" r="2" fill="black"/>')
    for n, (rc, hw) in enumerate(rects):
        x, y = cv.xy((rc[0] - hw[0], rc[1] + hw[1]))
        col = PALETTE[n % len(PALETTE)]
        cv.add(f'<rect x="{x:.2f}" y="{y:.2f}" width="{2 * hw[0] * cv.s:.2f}" height="{2 * hw[1] * cv.s:.2f}" '
               f'fill="{col}" fill-opacity="0.15" stroke="{col}"/>')
        tx, ty = cv.xy(rc)
        cv.add(f'<text x="{tx:.2f}" y="{ty:.2f}" font-size="11" text-anchor="middle">{n}</text>')
    for (i, j), m in sorted(transitions.items()):
        if i >= j and (j, i) in transitions:
            continue
        a, b = np.asarray(rects[i][0]), np.asarray(rects[j][0])
        mx, my = cv.xy(0.5 * (a + b) + 0.15 * (0.5 * (a + b) - c))
        text = f"{i}{j}: [{m[0][0]} {m[0][1]}; {m[1][0]} {m[1][1]}]"
        cv.add(f'<text x="{mx:.2f}" y="{my:.2f}" font-size="9" text-anchor="middle">{escape(text)}</text>')
    return cv.render(holonomy_text)
