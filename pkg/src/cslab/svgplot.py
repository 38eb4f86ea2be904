"""Minimal hand-written SVG charts (scatter panels and bar charts)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
_W, _H, _PAD = 320, 280, 36


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _scale(v: np.ndarray, lo: float, hi: float, a: float, b: float) -> np.ndarray:
    span = hi - lo if hi > lo else 1.0
    return a + (v - lo) / span * (b - a)


def _panel(x, y, groups, title, xlabel, ylabel, ox: float) -> list[str]:
    x, y = np.asarray(x, float), np.asarray(y, float)
    out = [f'<g transform="translate({ox},0)">',
           f'<rect x="{_PAD}" y="{_PAD}" width="{_W - 2 * _PAD}" height="{_H - 2 * _PAD}" fill="none" stroke="#444"/>',
           f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="12">{escape(title)}</text>',
           f'<text x="{_W / 2}" y="{_H - 8}" text-anchor="middle" font-size="10">{escape(xlabel)}</text>',
           f'<text x="10" y="{_H / 2}" font-size="10" transform="rotate(-90 10 {_H / 2})" '
           f'text-anchor="middle">{escape(ylabel)}</text>']
    if x.size:
        px = _scale(x, x.min(), x.max(), _PAD + 4, _W - _PAD - 4)
        py = _scale(y, y.min(), y.max(), _H - _PAD - 4, _PAD + 4)
        for xi, yi, g in zip(px, py, groups):
            out.append(f'<circle cx="{_fmt(xi)}" cy="{_fmt(yi)}" r="1.6" '
                       f'fill="{PALETTE[int(g) % len(PALETTE)]}" fill-opacity="0.6"/>')
    out.append("</g>")
    return out


def scatter_panels(path: str | Path, panels: Sequence[tuple], groups: Sequence[int]) -> None:
    """``panels`` holds (x, y, title, xlabel, ylabel) tuples, drawn side by side."""
    width = _W * max(len(panels), 1)
    body = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{_H}" font-family="sans-serif">']
    for k, (x, y, title, xl, yl) in enumerate(panels):
        body += _panel(x, y, groups, title, xl, yl, k * _W)
    body.append("</svg>")
    Path(path).write_text("\n".join(body) + "\n")


def bar_chart(path: str | Path, values: Sequence[float], labels: Sequence[str], title: str) -> None:
    values = np.asarray(values, float)
    n = len(values)
    width = max(_W, 60 * n + 2 * _PAD)
    top = values.max() if n and values.max() > 0 else 1.0
    bw = (width - 2 * _PAD) / max(n, 1)
    body = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{_H}" font-family="sans-serif">',
            f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="12">{escape(title)}</text>',
            f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{width - _PAD}" y2="{_H - _PAD}" stroke="#444"/>']
    for i, (v, lab) in enumerate(zip(values, labels)):
        h = (_H - 2 * _PAD) * (v / top if v > 0 else 0.0)
        x = _PAD + i * bw + bw * 0.15
        body.append(f'<rect x="{_fmt(x)}" y="{_fmt(_H - _PAD - h)}" width="{_fmt(bw * 0.7)}" '
                    f'height="{_fmt(h)}" fill="{PALETTE[0]}"/>')
        body.append(f'<text x="{_fmt(x + bw * 0.35)}" y="{_H - _PAD + 14}" text-anchor="middle" '
                    f'font-size="10">{escape(lab)}</text>')
        body.append(f'<text x="{_fmt(x + bw * 0.35)}" y="{_fmt(_H - _PAD - h - 4)}" text-anchor="middle" '
                    f'font-size="9">{v:.3g}</text>')
    body.append("</svg>")
    Path(path).write_text("\n".join(body) + "\n")
