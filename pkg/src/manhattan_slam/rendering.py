"""Deterministic SVG rendering of trajectories (diffable in tests)."""

from __future__ import annotations

import math

import numpy as np

_PALETTE = ["#9aa0a6", "#d93025", "#188038", "#1a73e8", "#f9ab00", "#9334e6"]


def _tick_step(span: float, target: int = 8) -> float:
    if span <= 0:
        return 1.0
    raw = span / target
    mag = 10 ** math.floor(math.log10(raw))
    for mult in (1, 2, 5, 10):
        if mult * mag >= raw:
            return mult * mag
    return 10 * mag


def svg_plot(
    series: list[tuple[str, np.ndarray]],
    size: tuple[int, int] = (720, 720),
    margin: int = 56,
) -> str:
    """Overlay polylines (meters) with axis ticks and a legend.

    ``series`` is a list of (name, (n, >=2) array) pairs drawn in order with a
    fixed palette. Output is a pure function of the inputs, so identical
    inputs give byte-identical SVG.
    """
    if not series:
        raise ValueError("nothing to plot")
    pts = np.vstack([np.asarray(xy, dtype=float)[:, :2] for _, xy in series])
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    pad = 0.05 * max(x1 - x0, y1 - y0, 1.0)
    x0, x1, y0, y1 = x0 - pad, x1 + pad, y0 - pad, y1 + pad

    w, h = size
    iw, ih = w - 2 * margin, h - 2 * margin
    scale = min(iw / (x1 - x0), ih / (y1 - y0))

    def to_px(x, y):
        return margin + (x - x0) * scale, h - margin - (y - y0) * scale

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<rect x="{margin}" y="{margin}" width="{iw}" height="{ih}" '
        'fill="none" stroke="#444444" stroke-width="1"/>',
    ]

    step = _tick_step(max(x1 - x0, y1 - y0))
    tx = math.ceil(x0 / step) * step
    while tx <= x1 + 1e-9:
        px, _ = to_px(tx, y0)
        py = h - margin
        out.append(
            f'<line x1="{px:.2f}" y1="{py}" x2="{px:.2f}" y2="{py + 5}" stroke="#444444"/>'
        )
        out.append(
            f'<text x="{px:.2f}" y="{py + 18}" font-size="11" text-anchor="middle" '
            f'fill="#444444">{tx:.0f}</text>'
        )
        tx += step
    ty = math.ceil(y0 / step) * step
    while ty <= y1 + 1e-9:
        _, py = to_px(x0, ty)
        out.append(
            f'<line x1="{margin - 5}" y1="{py:.2f}" x2="{margin}" y2="{py:.2f}" stroke="#444444"/>'
        )
        out.append(
            f'<text x="{margin - 8}" y="{py + 4:.2f}" font-size="11" text-anchor="end" '
            f'fill="#444444">{ty:.0f}</text>'
        )
        ty += step
    out.append(
        f'<text x="{w / 2:.0f}" y="{h - 8}" font-size="12" text-anchor="middle" '
        'fill="#444444">x [m]</text>'
    )
    out.append(
        f'<text x="14" y="{h / 2:.0f}" font-size="12" text-anchor="middle" fill="#444444" '
        f'transform="rotate(-90 14 {h / 2:.0f})">y [m]</text>'
    )

    for k, (name, xy) in enumerate(series):
        xy = np.asarray(xy, dtype=float)[:, :2]
        color = _PALETTE[k % len(_PALETTE)]
        coords = " ".join(
            f"{px:.2f},{py:.2f}" for px, py in (to_px(x, y) for x, y in xy)
        )
        out.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.4"/>'
        )
        ly = margin + 16 + 16 * k
        out.append(
            f'<line x1="{w - margin - 130}" y1="{ly}" x2="{w - margin - 104}" y2="{ly}" '
            f'stroke="{color}" stroke-width="3"/>'
        )
        out.append(
            f'<text x="{w - margin - 98}" y="{ly + 4}" font-size="12" fill="#222222">{name}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"
