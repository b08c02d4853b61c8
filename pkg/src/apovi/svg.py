"""Minimal deterministic SVG figures: line plots with shaded bands, and image panels."""

from __future__ import annotations

from pathlib import Path

import numpy as np

WIDTH, HEIGHT, PAD = 640, 400, 50
COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _f(v: float) -> str:
    return f"{v:.3f}"


def _limits(values: list) -> tuple[float, float]:
    vals = np.concatenate([np.asarray(v, float).ravel() for v in values]) if values else np.zeros(0)
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        return -1.0, 1.0
    lo, hi = float(vals.min()), float(vals.max())
    span = hi - lo if hi > lo else max(abs(lo), 1.0)
    return lo - 0.05 * span, hi + 0.05 * span


def emit_svg_plot(series, bands, points, path, title: str = "") -> str:
    """Write a line plot and return the SVG text.

    ``series``: list of ``(x, y)``, drawn dashed.  ``bands``: list of
    ``(x, lower, upper)``, drawn shaded.  ``points``: list of ``(x, y)``
    scatter sets.  Axis limits enclose every coordinate supplied.
    """
    for x, y in list(series) + list(points):
        if np.shape(x) != np.shape(y):
            raise ValueError("x and y lengths differ")
    for x, lo, hi in bands:
        if not (np.shape(x) == np.shape(lo) == np.shape(hi)):
            raise ValueError("band arrays differ in length")
    xs = [s[0] for s in series] + [b[0] for b in bands] + [p[0] for p in points]
    ys = [s[1] for s in series] + [b[1] for b in bands] + [b[2] for b in bands] + [p[1] for p in points]
    x0, x1 = _limits(xs)
    y0, y1 = _limits(ys)

    def sx(v):
        return PAD + (np.asarray(v, float) - x0) / (x1 - x0) * (WIDTH - 2 * PAD)

    def sy(v):
        return HEIGHT - PAD - (np.asarray(v, float) - y0) / (y1 - y0) * (HEIGHT - 2 * PAD)

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" data-xlim="{_f(x0)} {_f(x1)}" data-ylim="{_f(y0)} {_f(y1)}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{PAD}" y="{PAD}" width="{WIDTH - 2 * PAD}" height="{HEIGHT - 2 * PAD}" '
        'fill="none" stroke="black" stroke-width="1"/>',
    ]
    if title:
        lines.append(f'<text x="{WIDTH // 2}" y="{PAD // 2}" text-anchor="middle" font-size="14">{title}</text>')
    for k in range(5):
        xv = x0 + (x1 - x0) * k / 4
        yv = y0 + (y1 - y0) * k / 4
        lines.append(f'<text x="{_f(sx(xv))}" y="{HEIGHT - PAD + 16}" text-anchor="middle" font-size="10">{xv:.2f}</text>')
        lines.append(f'<text x="{PAD - 6}" y="{_f(sy(yv))}" text-anchor="end" font-size="10">{yv:.2f}</text>')
    for i, (x, lo, hi) in enumerate(bands):
        order = np.argsort(np.asarray(x, float), kind="stable")
        xa, la, ha = (np.asarray(a, float)[order] for a in (x, lo, hi))
        pts = [f"{_f(a)},{_f(b)}" for a, b in zip(sx(xa), sy(ha))]
        pts += [f"{_f(a)},{_f(b)}" for a, b in zip(sx(xa[::-1]), sy(la[::-1]))]
        colour = COLOURS[i % len(COLOURS)]
        lines.append(f'<polygon class="band" points="{" ".join(pts)}" fill="{colour}" fill-opacity="0.25" stroke="none"/>')
    for i, (x, y) in enumerate(series):
        order = np.argsort(np.asarray(x, float), kind="stable")
        pts = " ".join(f"{_f(a)},{_f(b)}" for a, b in zip(sx(np.asarray(x, float)[order]), sy(np.asarray(y, float)[order])))
        colour = COLOURS[i % len(COLOURS)]
        lines.append(f'<polyline class="mean" points="{pts}" fill="none" stroke="{colour}" '
                     'stroke-width="2" stroke-dasharray="6,4"/>')
    for x, y in points:
        for a, b in zip(sx(x), sy(y)):
            lines.append(f'<circle class="point" cx="{_f(a)}" cy="{_f(b)}" r="3" fill="black"/>')
    lines.append("</svg>")
    text = "\n".join(lines) + "\n"
    Path(path).write_text(text, encoding="utf-8")
    return text


def emit_svg_images(panels, path, cell: int = 8) -> str:
    """Write grey-scale image panels side by side.

    ``panels`` is a list of ``(title, image)``; values are clipped to [0, 1].
    NaN pixels (e.g. masked-out context) render in blue.
    """
    panels = list(panels)
    if not panels:
        raise ValueError("no panels to draw")
    h = max(np.shape(img)[0] for _, img in panels)
    gap, top = 10, 20
    total_w = sum(np.shape(img)[1] * cell + gap for _, img in panels) + gap
    total_h = h * cell + top + gap
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{total_h}" '
        f'viewBox="0 0 {total_w} {total_h}">',
        f'<rect x="0" y="0" width="{total_w}" height="{total_h}" fill="white"/>',
    ]
    x_off = gap
    for title, img in panels:
        img = np.asarray(img, float)
        lines.append(f'<text x="{x_off}" y="{top - 6}" font-size="10">{title}</text>')
        for i in range(img.shape[0]):
            for j in range(img.shape[1]):
                v = img[i, j]
                if np.isnan(v):
                    fill = "#4060c0"
                else:
                    g = int(round(255 * (1.0 - min(max(v, 0.0), 1.0))))
                    fill = f"#{g:02x}{g:02x}{g:02x}"
                lines.append(f'<rect x="{x_off + j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" fill="{fill}"/>')
        x_off += img.shape[1] * cell + gap
    lines.append("</svg>")
    text = "\n".join(lines) + "\n"
    Path(path).write_text(text, encoding="utf-8")
    return text
