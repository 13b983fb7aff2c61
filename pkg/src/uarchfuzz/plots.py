"""Minimal deterministic SVG rendering for run artifacts.

No plotting dependency: the figures we need are polylines, a shaded
variance band, and a scatter, all of which serialize to a few hundred
bytes of SVG. Output is byte-stable for identical inputs so plot files
can be hashed in tests.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ConfigError

WIDTH = 800
HEIGHT = 480
MARGIN = 56

RAW_COLOR = "#9ecae1"
MEAN_COLOR = "#08519c"
BAND_COLOR = "#c6dbef"
SERIES_COLORS = ("#08519c", "#a63603", "#54278f", "#006d2c", "#99000d")


def _fmt(x: float) -> str:
    return format(float(x), ".2f")


class _Frame:
    """Maps data coordinates into the plot rectangle."""

    def __init__(self, xs: Sequence[float], ys: Sequence[float]) -> None:
        self.x_lo, self.x_hi = float(min(xs)), float(max(xs))
        self.y_lo, self.y_hi = float(min(ys)), float(max(ys))
        if self.x_hi == self.x_lo:
            self.x_hi = self.x_lo + 1.0
        if self.y_hi == self.y_lo:
            self.y_hi = self.y_lo + 1.0

    def x(self, v: float) -> float:
        frac = (float(v) - self.x_lo) / (self.x_hi - self.x_lo)
        return MARGIN + frac * (WIDTH - 2 * MARGIN)

    def y(self, v: float) -> float:
        frac = (float(v) - self.y_lo) / (self.y_hi - self.y_lo)
        return HEIGHT - MARGIN - frac * (HEIGHT - 2 * MARGIN)


def _points(frame: _Frame, xs: Sequence[float], ys: Sequence[float]) -> str:
    return " ".join(f"{_fmt(frame.x(x))},{_fmt(frame.y(y))}" for x, y in zip(xs, ys))


def _polyline(frame: _Frame, xs, ys, color: str, width: float) -> str:
    return (
        f'<polyline fill="none" stroke="{color}" stroke-width="{_fmt(width)}" '
        f'points="{_points(frame, xs, ys)}" />'
    )


def _band(frame: _Frame, xs, lo, hi, color: str, opacity: float = 0.6) -> str:
    forward = _points(frame, xs, hi)
    backward = _points(frame, list(reversed(xs)), list(reversed(lo)))
    return (
        f'<polygon fill="{color}" fill-opacity="{_fmt(opacity)}" '
        f'points="{forward} {backward}" />'
    )


def _header(title: str, xlabel: str, ylabel: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white" />',
        f'<text x="{WIDTH // 2}" y="24" text-anchor="middle" font-size="16" '
        f'font-family="sans-serif">{title}</text>',
        f'<text x="{WIDTH // 2}" y="{HEIGHT - 12}" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif">{xlabel}</text>',
        f'<text x="16" y="{HEIGHT // 2}" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif" transform="rotate(-90 16 {HEIGHT // 2})">{ylabel}</text>',
        f'<rect x="{MARGIN}" y="{MARGIN}" width="{WIDTH - 2 * MARGIN}" '
        f'height="{HEIGHT - 2 * MARGIN}" fill="none" stroke="#888" />',
    ]


def _axis_labels(frame: _Frame) -> list[str]:
    out = []
    for frac in (0.0, 0.5, 1.0):
        xv = frame.x_lo + frac * (frame.x_hi - frame.x_lo)
        yv = frame.y_lo + frac * (frame.y_hi - frame.y_lo)
        out.append(
            f'<text x="{_fmt(frame.x(xv))}" y="{HEIGHT - MARGIN + 16}" text-anchor="middle" '
            f'font-size="10" font-family="sans-serif">{_fmt(xv)}</text>'
        )
        out.append(
            f'<text x="{MARGIN - 6}" y="{_fmt(frame.y(yv) + 3)}" text-anchor="end" '
            f'font-size="10" font-family="sans-serif">{_fmt(yv)}</text>'
        )
    return out


def render_curve(
    raw: Sequence[float],
    mean: Sequence[float],
    variance: Sequence[float],
    title: str,
    xlabel: str = "episode",
    ylabel: str = "value",
) -> str:
    """Raw series as a light polyline, running mean dark, variance shaded."""
    if len(raw) == 0:
        raise ConfigError("cannot plot an empty series")
    xs = list(range(len(raw)))
    std = np.sqrt(np.asarray(variance, dtype=np.float64))
    lo = np.asarray(mean) - std
    hi = np.asarray(mean) + std
    frame = _Frame(xs, list(raw) + list(lo) + list(hi))
    parts = _header(title, xlabel, ylabel)
    parts.append(_band(frame, xs, lo, hi, BAND_COLOR))
    parts.append(_polyline(frame, xs, raw, RAW_COLOR, 1.0))
    parts.append(_polyline(frame, xs, mean, MEAN_COLOR, 2.0))
    parts.extend(_axis_labels(frame))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_scatter(
    points: Sequence[tuple[int, float, int]],
    title: str,
    xlabel: str = "episode",
    ylabel: str = "reward",
) -> str:
    """One circle per episode; leak bytes drive the fill lightness."""
    if len(points) == 0:
        raise ConfigError("cannot plot an empty series")
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    max_leak = max(p[2] for p in points)
    frame = _Frame(xs, ys)
    parts = _header(title, xlabel, ylabel)
    for idx, reward, leak in points:
        if max_leak > 0 and leak > 0:
            # Lighter (higher lightness) for higher leakage.
            light = 35 + int(round(45 * leak / max_leak))
            fill = f"hsl(16,85%,{light}%)"
        else:
            fill = "#39506b"
        parts.append(
            f'<circle cx="{_fmt(frame.x(idx))}" cy="{_fmt(frame.y(reward))}" r="3" '
            f'fill="{fill}" fill-opacity="0.8" />'
        )
    parts.extend(_axis_labels(frame))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_rate_series(
    series: Sequence[tuple[str, Sequence[float], Sequence[float], Sequence[float], Sequence[float]]],
    title: str,
    xlabel: str = "iterations N",
    ylabel: str = "bits/second",
) -> str:
    """Overlaid leak-rate sweeps: (label, N, rate, mean, variance) per series."""
    if len(series) == 0:
        raise ConfigError("cannot plot an empty series")
    all_x: list[float] = []
    all_y: list[float] = []
    prepared = []
    for label, ns, rates, mean, variance in series:
        std = np.sqrt(np.asarray(variance, dtype=np.float64))
        lo = np.asarray(mean) - std
        hi = np.asarray(mean) + std
        prepared.append((label, list(ns), list(rates), list(mean), lo, hi))
        all_x.extend(ns)
        all_y.extend(list(rates) + list(lo) + list(hi))
    frame = _Frame(all_x, all_y)
    parts = _header(title, xlabel, ylabel)
    for i, (label, ns, rates, mean, lo, hi) in enumerate(prepared):
        color = SERIES_COLORS[i % len(SERIES_COLORS)]
        parts.append(_band(frame, ns, lo, hi, color, opacity=0.2))
        parts.append(_polyline(frame, ns, rates, RAW_COLOR, 1.0))
        parts.append(_polyline(frame, ns, mean, color, 2.0))
        parts.append(
            f'<text x="{WIDTH - MARGIN - 4}" y="{MARGIN + 14 + 14 * i}" text-anchor="end" '
            f'font-size="11" font-family="sans-serif" fill="{color}">{label}</text>'
        )
    parts.extend(_axis_labels(frame))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
