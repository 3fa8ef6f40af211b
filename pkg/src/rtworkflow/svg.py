"""Minimal SVG figures: rank histograms, z/contraction scatter, predictive-check panels.

Output is plain text with fixed number formatting, so the same inputs always
give byte-identical files.
"""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

GREY = "#c8c8c8"
RED = "#c0392b"
BLUE = "#2c6fbb"
BLACK = "#222222"


def _f(v: float) -> str:
    return f"{float(v):.2f}"


class Canvas:
    def __init__(self, width=480, height=320):
        self.w, self.h = width, height
        self.items = []

    def rect(self, x, y, w, h, fill, stroke="none", opacity=1.0):
        self.items.append(f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(max(w, 0))}" height="{_f(max(h, 0))}" '
                          f'fill="{fill}" stroke="{stroke}" fill-opacity="{opacity:.2f}"/>')

    def line(self, x1, y1, x2, y2, stroke=BLACK, width=1.0, dash=None):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.items.append(f'<line x1="{_f(x1)}" y1="{_f(y1)}" x2="{_f(x2)}" y2="{_f(y2)}" '
                          f'stroke="{stroke}" stroke-width="{width:.2f}"{d}/>')

    def circle(self, x, y, r, fill, opacity=0.6):
        self.items.append(f'<circle cx="{_f(x)}" cy="{_f(y)}" r="{_f(r)}" fill="{fill}" '
                          f'fill-opacity="{opacity:.2f}"/>')

    def polyline(self, xs, ys, stroke=BLACK, width=1.0):
        pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in zip(xs, ys))
        self.items.append(f'<polyline points="{pts}" fill="none" stroke="{stroke}" stroke-width="{width:.2f}"/>')

    def text(self, x, y, s, size=11, anchor="middle", rotate=None):
        rot = f' transform="rotate({rotate} {_f(x)} {_f(y)})"' if rotate is not None else ""
        self.items.append(f'<text x="{_f(x)}" y="{_f(y)}" font-size="{size}" font-family="sans-serif" '
                          f'text-anchor="{anchor}"{rot}>{escape(str(s))}</text>')

    def render(self) -> str:
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.w}" height="{self.h}" '
                f'viewBox="0 0 {self.w} {self.h}">')
        return "\n".join([head, f'<rect width="{self.w}" height="{self.h}" fill="white"/>', *self.items,
                          "</svg>"]) + "\n"


class Axes:
    """Linear data-to-pixel mapping inside a rectangle of a canvas."""

    def __init__(self, canvas, x0, y0, w, h, xlim, ylim):
        self.c, self.x0, self.y0, self.w, self.h = canvas, x0, y0, w, h
        self.xlim, self.ylim = xlim, ylim

    def px(self, x):
        a, b = self.xlim
        return self.x0 + (np.asarray(x, dtype=float) - a) / (b - a) * self.w

    def py(self, y):
        a, b = self.ylim
        return self.y0 + self.h - (np.asarray(y, dtype=float) - a) / (b - a) * self.h

    def frame(self, xlabel="", ylabel="", title=""):
        c = self.c
        c.line(self.x0, self.y0 + self.h, self.x0 + self.w, self.y0 + self.h)
        c.line(self.x0, self.y0, self.x0, self.y0 + self.h)
        for v in np.linspace(*self.xlim, 5):
            c.text(self.px(v), self.y0 + self.h + 14, _tick(v), size=9)
        for v in np.linspace(*self.ylim, 5):
            c.text(self.x0 - 4, self.py(v) + 3, _tick(v), size=9, anchor="end")
        if xlabel:
            c.text(self.x0 + self.w / 2, self.y0 + self.h + 30, xlabel)
        if ylabel:
            c.text(self.x0 - 38, self.y0 + self.h / 2, ylabel, rotate=-90)
        if title:
            c.text(self.x0 + self.w / 2, self.y0 - 8, title, size=12)


def _tick(v) -> str:
    v = float(v)
    if v != 0 and (abs(v) >= 1e4 or abs(v) < 1e-2):
        return f"{v:.1e}"
    return f"{v:.3g}"


def _limits(x, pad=0.05):
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    if x.size == 0:
        return 0.0, 1.0
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    span = hi - lo
    return lo - pad * span, hi + pad * span


def rank_histogram(counts, band, expected, title="") -> str:
    """Red bars over a grey uniformity band with the expected count marked."""
    counts = np.asarray(counts)
    c = Canvas()
    top = max(float(counts.max()), float(band[1])) * 1.1
    ax = Axes(c, 60, 30, 390, 240, (0, counts.size), (0, top))
    c.rect(ax.px(0), ax.py(band[1]), ax.w, ax.py(band[0]) - ax.py(band[1]), GREY)
    for k, n in enumerate(counts):
        c.rect(ax.px(k + 0.1), ax.py(n), ax.px(k + 0.9) - ax.px(k + 0.1), ax.py(0) - ax.py(n), RED, opacity=0.85)
    c.line(ax.px(0), ax.py(expected), ax.px(counts.size), ax.py(expected), BLACK, 1.0, dash="4,3")
    ax.frame("rank bin", "count", title)
    return c.render()


def sensitivity_scatter(contraction, z, z_threshold=3.0, s_threshold=0.5, title="") -> str:
    """Posterior z against contraction with the quadrant thresholds drawn in."""
    s = np.asarray(contraction, dtype=float)
    z = np.asarray(z, dtype=float)
    c = Canvas()
    zmax = max(4.0, float(np.nanmax(np.abs(z))) * 1.05 if z.size else 4.0)
    ax = Axes(c, 60, 30, 390, 240, (min(0.0, float(np.nanmin(s)) if s.size else 0.0), 1.0), (-zmax, zmax))
    for v in (z_threshold, -z_threshold):
        c.line(ax.px(ax.xlim[0]), ax.py(v), ax.px(1), ax.py(v), BLACK, 0.8, dash="4,3")
    c.line(ax.px(s_threshold), ax.py(-zmax), ax.px(s_threshold), ax.py(zmax), BLACK, 0.8, dash="4,3")
    for si, zi in zip(s, z):
        c.circle(ax.px(si), ax.py(zi), 2.5, BLUE)
    labels = (("poorly identified", 0.25, 0.0), ("ideal", 0.75, 0.0), ("prior/likelihood conflict", 0.25, 1.0),
              ("overfit", 0.75, 1.0))
    for text, fx, fy in labels:
        x = ax.xlim[0] + fx * (1.0 - ax.xlim[0])
        y = (zmax * 0.92) if fy else (-zmax * 0.92)
        c.text(ax.px(x), ax.py(y), text, size=9)
    ax.frame("posterior contraction", "posterior z-score", title)
    return c.render()


def statistic_histogram(ax, values, observed=None, bins=30):
    c = ax.c
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    counts, edges = np.histogram(v, bins=bins, range=ax.xlim)
    ax.ylim = (0, max(1, counts.max()) * 1.1)
    for k, n in enumerate(counts):
        c.rect(ax.px(edges[k]), ax.py(n), ax.px(edges[k + 1]) - ax.px(edges[k]), ax.py(0) - ax.py(n), GREY,
               stroke="white")
    if observed is not None and np.isfinite(observed):
        c.line(ax.px(observed), ax.py(0), ax.px(observed), ax.py(ax.ylim[1]), RED, 2.0)


def predictive_panels(check, titles) -> str:
    """Six panels: histogram quantile band, then one histogram per summary statistic."""
    c = Canvas(960, 560)
    band = check.band
    centers = np.arange(band.quantiles.shape[1]) * 50.0 + 25.0
    top = max(1.0, float(band.quantiles.max()) * 1.1)
    ax = Axes(c, 60, 40, 250, 190, (0, 2050), (0, top))
    shades = ("#e4e4e4", "#c8c8c8", "#a8a8a8", "#888888")
    for (lo, hi), shade in zip(((0.1, 0.9), (0.2, 0.8), (0.3, 0.7), (0.4, 0.6)), shades):
        ql, qh = band.level(lo), band.level(hi)
        for k in range(centers.size):
            c.rect(ax.px(centers[k] - 25), ax.py(qh[k]), ax.px(centers[k] + 25) - ax.px(centers[k] - 25),
                   ax.py(ql[k]) - ax.py(qh[k]), shade)
    c.polyline(ax.px(centers), ax.py(band.level(0.5)), BLACK, 1.0)
    if check.observed is not None:
        c.polyline(ax.px(centers), ax.py(check.observed.histogram), RED, 1.5)
    ax.frame("reading time (ms; >2000 at 2000)", "count", titles.get("histogram", "a) histogram"))
    slots = [(380, 40), (700, 40), (60, 330), (380, 330), (700, 330)]
    for (x0, y0), name in zip(slots, check.statistics):
        vals = check.statistics[name]
        obs = getattr(check.observed, name) if check.observed is not None else None
        lim = _limits(np.append(vals, obs) if obs is not None and np.isfinite(obs) else vals)
        ax = Axes(c, x0, y0, 230, 190, lim, (0, 1))
        statistic_histogram(ax, vals, obs)
        ax.frame(name, "count", titles.get(name, name))
    return c.render()
