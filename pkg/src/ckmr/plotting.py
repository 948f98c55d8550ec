"""Tiny dependency-free SVG renderings of curves and PIP heat tables."""

from __future__ import annotations

from html import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _scale(v, lo, hi, a, b):
    if hi <= lo:
        return np.full_like(np.asarray(v, dtype=float), 0.5 * (a + b))
    return a + (np.asarray(v, dtype=float) - lo) / (hi - lo) * (b - a)


def _path(xs, ys):
    return "M" + " L".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))


def write_curve_svg(path, curves, names, labels=None, width=220, height=170, ncol=4):
    """Panels of curves with 95% bands; curves sharing an index are overlaid."""
    overlay = labels is not None
    panels = [curves] if overlay else [[c] for c in curves]
    nrow = -(-len(panels) // ncol)
    W, H = ncol * width, nrow * height
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="10">']
    for p, group in enumerate(panels):
        x0, y0 = (p % ncol) * width, (p // ncol) * height
        left, right, top, bottom = x0 + 30, x0 + width - 8, y0 + 18, y0 + height - 22
        lo = min(float(c.lower.min()) for c in group)
        hi = max(float(c.upper.max()) for c in group)
        gx = group[0].grid
        xs = _scale(gx, gx.min(), gx.max(), left, right)
        out.append(f'<rect x="{left}" y="{top}" width="{right - left}" height="{bottom - top}" fill="none" stroke="#999"/>')
        for i, c in enumerate(group):
            col = PALETTE[i % len(PALETTE)]
            yl = _scale(c.lower, lo, hi, bottom, top)
            yu = _scale(c.upper, lo, hi, bottom, top)
            band = _path(np.r_[xs, xs[::-1]], np.r_[yu, yl[::-1]]) + " Z"
            out.append(f'<path d="{band}" fill="{col}" fill-opacity="0.18" stroke="none"/>')
            out.append(f'<path d="{_path(xs, _scale(c.mean, lo, hi, bottom, top))}" fill="none" stroke="{col}"/>')
        title = names[group[0].index]
        out.append(f'<text x="{left}" y="{y0 + 12}">{escape(str(title))}</text>')
        if overlay:
            for i, lab in enumerate(labels):
                out.append(f'<text x="{right - 70}" y="{top + 12 + 11 * i}" fill="{PALETTE[i % len(PALETTE)]}">'
                           f'{escape(lab)}</text>')
    out.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(out) + "\n")


def write_pip_svg(path, main, joint, names, cell=28):
    """Heat table: main PIPs on the diagonal, joint interaction PIPs off it."""
    M = len(names)
    pad = 90
    W = H = pad + M * cell + 10
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="9">']
    for j in range(M):
        out.append(f'<text x="{pad - 4}" y="{pad + j * cell + cell * 0.6:.1f}" text-anchor="end">{escape(names[j])}</text>')
        out.append(f'<text x="{pad + j * cell + 3}" y="{pad - 4}" transform="rotate(-45 {pad + j * cell + 3},{pad - 4})">'
                   f'{escape(names[j])}</text>')
        for k in range(M):
            v = float(main[j] if j == k else joint[j, k])
            shade = int(255 * (1.0 - v))
            out.append(f'<rect x="{pad + k * cell}" y="{pad + j * cell}" width="{cell}" height="{cell}" '
                       f'fill="rgb({shade},{shade},255)" stroke="#fff"/>')
            out.append(f'<text x="{pad + k * cell + cell / 2}" y="{pad + j * cell + cell * 0.6:.1f}" '
                       f'text-anchor="middle">{v:.2f}</text>')
    out.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(out) + "\n")
