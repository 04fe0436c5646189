"""Small deterministic SVG charts (line and scatter) written without a plotting library.

Numbers are formatted with fixed precision, so the same data always gives the
same bytes.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from ..errors import ArgumentError
from ..stats import pearson, spearman

WIDTH, HEIGHT = 640, 420
MARGIN = dict(left=64, right=150, top=40, bottom=52)
PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


def _f(v: float) -> str:
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step - 1e-9) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 12))
        t += step
    return ticks


def _tick_label(v: float) -> str:
    return f"{v:.3g}"


class _Canvas:
    def __init__(self, xlim: tuple[float, float], ylim: tuple[float, float], title: str, xlabel: str, ylabel: str):
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        self.pw = WIDTH - MARGIN["left"] - MARGIN["right"]
        self.ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2:.0f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        ]
        self._axes(xlabel, ylabel)

    def px(self, x: float) -> float:
        return MARGIN["left"] + (x - self.x0) / (self.x1 - self.x0) * self.pw

    def py(self, y: float) -> float:
        return MARGIN["top"] + (1 - (y - self.y0) / (self.y1 - self.y0)) * self.ph

    def _axes(self, xlabel: str, ylabel: str) -> None:
        left, top = MARGIN["left"], MARGIN["top"]
        bottom = top + self.ph
        self.parts.append(f'<rect x="{left}" y="{top}" width="{self.pw}" height="{self.ph}" fill="none" stroke="#333"/>')
        for t in _nice_ticks(self.x0, self.x1):
            x = _f(self.px(t))
            self.parts.append(f'<line x1="{x}" y1="{bottom}" x2="{x}" y2="{bottom + 5}" stroke="#333"/>')
            self.parts.append(f'<text x="{x}" y="{bottom + 18}" text-anchor="middle">{_tick_label(t)}</text>')
        for t in _nice_ticks(self.y0, self.y1):
            y = _f(self.py(t))
            self.parts.append(f'<line x1="{left - 5}" y1="{y}" x2="{left}" y2="{y}" stroke="#333"/>')
            self.parts.append(f'<text x="{left - 8}" y="{y}" text-anchor="end" dominant-baseline="middle">{_tick_label(t)}</text>')
        self.parts.append(f'<text x="{left + self.pw / 2:.0f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>')
        cy = top + self.ph / 2
        self.parts.append(f'<text x="16" y="{cy:.0f}" text-anchor="middle" transform="rotate(-90 16 {cy:.0f})">{escape(ylabel)}</text>')

    def polyline(self, xs: Sequence[float], ys: Sequence[float], color: str, width: float = 1.5, dash: str | None = None) -> None:
        pts = " ".join(f"{_f(self.px(x))},{_f(self.py(y))}" for x, y in zip(xs, ys))
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"{extra}/>')

    def circle(self, x: float, y: float, color: str, r: float = 3.0) -> None:
        self.parts.append(f'<circle cx="{_f(self.px(x))}" cy="{_f(self.py(y))}" r="{r}" fill="{color}" fill-opacity="0.75"/>')

    def legend(self, entries: Sequence[tuple[str, str]]) -> None:
        x = WIDTH - MARGIN["right"] + 12
        for i, (label, color) in enumerate(entries):
            y = MARGIN["top"] + 8 + 16 * i
            self.parts.append(f'<line x1="{x}" y1="{y}" x2="{x + 18}" y2="{y}" stroke="{color}" stroke-width="2"/>')
            self.parts.append(f'<text x="{x + 24}" y="{y}" dominant-baseline="middle">{escape(label)}</text>')

    def text(self, x: float, y: float, s: str) -> None:
        self.parts.append(f'<text x="{_f(x)}" y="{_f(y)}">{escape(s)}</text>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _limits(values: Sequence[float], pad: float = 0.05) -> tuple[float, float]:
    lo, hi = float(min(values)), float(max(values))
    span = hi - lo if hi > lo else max(abs(hi), 1.0)
    return lo - pad * span, hi + pad * span


def line_chart(
    series: Mapping[str, tuple[Sequence[float], Sequence[float]]],
    title: str,
    xlabel: str,
    ylabel: str,
    hline: float | None = None,
    ylim: tuple[float, float] | None = None,
) -> str:
    """One polyline per named series; an optional dashed horizontal reference line."""
    if not series or all(len(xs) == 0 for xs, _ in series.values()):
        raise ArgumentError("nothing to plot")
    xs_all = [x for xs, _ in series.values() for x in xs]
    ys_all = [y for _, ys in series.values() for y in ys] + ([hline] if hline is not None else [])
    c = _Canvas(_limits(xs_all, 0.02), ylim or _limits(ys_all), title, xlabel, ylabel)
    if hline is not None:
        c.polyline([c.x0, c.x1], [hline, hline], "#999", 1.0, "4 3")
    legend = []
    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        c.polyline(xs, ys, color)
        for x, y in zip(xs, ys):
            c.circle(x, y, color, 2.0)
        legend.append((name, color))
    c.legend(legend)
    return c.render()


def scatter_fit(
    x: Sequence[float],
    y: Sequence[float],
    title: str,
    xlabel: str,
    ylabel: str,
    groups: Sequence[str] | None = None,
) -> str:
    """Scatter with a least-squares line and Spearman/Pearson annotation."""
    xv = np.asarray(x, dtype=np.float64)
    yv = np.asarray(y, dtype=np.float64)
    if xv.size < 3 or xv.shape != yv.shape:
        raise ArgumentError("scatter needs at least 3 paired points")
    rho, p_rho = spearman(xv, yv)
    r, p_r = pearson(xv, yv)
    slope, intercept = np.polyfit(xv, yv, 1)
    c = _Canvas(_limits(xv), _limits(yv), title, xlabel, ylabel)
    labels = list(groups) if groups is not None else [""] * xv.size
    names = sorted(set(labels))
    colors = {g: PALETTE[i % len(PALETTE)] for i, g in enumerate(names)}
    for xi, yi, g in zip(xv, yv, labels):
        c.circle(xi, yi, colors[g])
    c.polyline([c.x0, c.x1], [slope * c.x0 + intercept, slope * c.x1 + intercept], "#222", 1.2)
    if groups is not None:
        c.legend([(g, colors[g]) for g in names])
    ax = WIDTH - MARGIN["right"] + 12
    ay = HEIGHT - MARGIN["bottom"] - 40
    c.text(ax, ay, f"rho = {rho:.3f} (p = {p_rho:.2g})")
    c.text(ax, ay + 16, f"r = {r:.3f} (p = {p_r:.2g})")
    return c.render()
