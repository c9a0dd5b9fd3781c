"""Minimal native SVG line charts (no plotting library needed)."""
from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

W, H = 360, 260
PAD_L, PAD_R, PAD_T, PAD_B = 62, 14, 30, 44


def _ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    return [start + k * step for k in range(int((hi - start) / step + 1e-9) + 1)]


def _fmt(v):
    return f"{v:.3g}"


def panel_svg(x, y, title, xlabel, ylabel, logy=False, ox=0):
    """One chart as an SVG group; ``ox`` shifts it horizontally."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = np.isfinite(x) & np.isfinite(y) & ((y > 0) if logy else True)
    x, y = x[keep], y[keep]
    parts = [f'<g transform="translate({ox},0)">']
    parts.append(f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>')
    parts.append(f'<text x="{W / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>')
    x0, x1, y0, y1 = PAD_L, W - PAD_R, H - PAD_B, PAD_T
    parts.append(f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" height="{y0 - y1}" fill="none" stroke="black"/>')
    if len(x) == 0:
        parts.append(f'<text x="{W / 2}" y="{H / 2}" text-anchor="middle" font-size="11">no data</text></g>')
        return "\n".join(parts)
    yv = np.log10(y) if logy else y
    xlo, xhi = float(x.min()), float(x.max())
    ylo, yhi = float(yv.min()), float(yv.max())
    if xhi == xlo:
        xhi = xlo + 1.0
    if yhi == ylo:
        ylo, yhi = ylo - 0.5, yhi + 0.5
    sx = lambda v: x0 + (v - xlo) / (xhi - xlo) * (x1 - x0)
    sy = lambda v: y0 - (v - ylo) / (yhi - ylo) * (y0 - y1)
    for t in _ticks(xlo, xhi):
        parts.append(f'<line x1="{sx(t):.1f}" y1="{y0}" x2="{sx(t):.1f}" y2="{y0 + 4}" stroke="black"/>')
        parts.append(f'<text x="{sx(t):.1f}" y="{y0 + 16}" text-anchor="middle" font-size="10">{_fmt(t)}</text>')
    yt = range(math.floor(ylo), math.ceil(yhi) + 1) if logy else _ticks(ylo, yhi)
    for t in yt:
        if not ylo - 1e-9 <= t <= yhi + 1e-9:
            continue
        label = f"1e{int(t)}" if logy else _fmt(t)
        parts.append(f'<line x1="{x0 - 4}" y1="{sy(t):.1f}" x2="{x0}" y2="{sy(t):.1f}" stroke="black"/>')
        parts.append(f'<text x="{x0 - 6}" y="{sy(t) + 3:.1f}" text-anchor="end" font-size="10">{label}</text>')
    pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, yv))
    parts.append(f'<polyline points="{pts}" fill="none" stroke="#1f4e9c" stroke-width="1.5"/>')
    if len(x) <= 30:
        for a, b in zip(x, yv):
            parts.append(f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="2.2" fill="#1f4e9c"/>')
    parts.append(f'<text x="{(x0 + x1) / 2}" y="{H - 8}" text-anchor="middle" font-size="11">{escape(xlabel)}</text>')
    parts.append(
        f'<text x="14" y="{(y0 + y1) / 2}" text-anchor="middle" font-size="11" '
        f'transform="rotate(-90 14 {(y0 + y1) / 2})">{escape(ylabel)}</text>'
    )
    parts.append("</g>")
    return "\n".join(parts)


def figure_svg(panels) -> str:
    """Side-by-side panels; each is a dict of ``panel_svg`` keyword arguments."""
    body = [panel_svg(ox=k * W, **p) for k, p in enumerate(panels)]
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W * len(panels)}" height="{H}" '
        f'font-family="sans-serif">\n' + "\n".join(body) + "\n</svg>\n"
    )


def write_figure(path, panels) -> Path:
    path = Path(path)
    path.write_text(figure_svg(panels))
    return path
