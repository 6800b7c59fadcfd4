"""Hand-rolled standalone SVG charts (diagnostic quality, no dependencies).

Three chart kinds cover the artifact's reporting needs: line charts for
conserved quantities and loss curves, 2D trajectory projections, and field
heatmaps.  Every plot writer also emits the underlying CSV next to the SVG.
"""
from __future__ import annotations

import csv

import numpy as np

__all__ = ["line_chart", "trajectory_plot", "heatmap", "write_csv"]

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
           "#e377c2", "#7f7f7f"]

W, H = 640, 420
MARGIN = dict(left=62, right=18, top=34, bottom=46)


def write_csv(path, rows):
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)


def _ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    raw = np.linspace(lo, hi, n)
    return raw


def _fmt(v):
    return f"{v:.3g}"


def _axes_svg(xlo, xhi, ylo, yhi, title, xlabel, ylabel):
    px0, px1 = MARGIN["left"], W - MARGIN["right"]
    py0, py1 = H - MARGIN["bottom"], MARGIN["top"]

    def sx(x):
        return px0 + (x - xlo) / (xhi - xlo) * (px1 - px0)

    def sy(y):
        return py0 - (y - ylo) / (yhi - ylo) * (py0 - py1)

    parts = [
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14" '
        f'font-family="sans-serif">{title}</text>',
        f'<line x1="{px0}" y1="{py0}" x2="{px1}" y2="{py0}" stroke="black"/>',
        f'<line x1="{px0}" y1="{py0}" x2="{px0}" y2="{py1}" stroke="black"/>',
        f'<text x="{(px0 + px1) / 2}" y="{H - 8}" text-anchor="middle" '
        f'font-size="12" font-family="sans-serif">{xlabel}</text>',
        f'<text x="14" y="{(py0 + py1) / 2}" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif" transform="rotate(-90 14 {(py0 + py1) / 2})">'
        f"{ylabel}</text>",
    ]
    for tx in _ticks(xlo, xhi):
        parts.append(
            f'<line x1="{sx(tx):.1f}" y1="{py0}" x2="{sx(tx):.1f}" y2="{py0 + 4}" stroke="black"/>'
            f'<text x="{sx(tx):.1f}" y="{py0 + 17}" text-anchor="middle" font-size="10" '
            f'font-family="sans-serif">{_fmt(tx)}</text>'
        )
    for ty in _ticks(ylo, yhi):
        parts.append(
            f'<line x1="{px0 - 4}" y1="{sy(ty):.1f}" x2="{px0}" y2="{sy(ty):.1f}" stroke="black"/>'
            f'<text x="{px0 - 7}" y="{sy(ty):.1f}" text-anchor="end" font-size="10" '
            f'font-family="sans-serif" dominant-baseline="middle">{_fmt(ty)}</text>'
        )
    return parts, sx, sy


def line_chart(path, series, title="", xlabel="t", ylabel="value"):
    """series: mapping name -> (x array, y array).  Emits SVG + CSV."""
    xs = np.concatenate([np.asarray(x) for x, _ in series.values()])
    ys = np.concatenate([np.asarray(y) for _, y in series.values()])
    pad = 0.05 * (ys.max() - ys.min() + 1e-12)
    parts, sx, sy = _axes_svg(
        xs.min(), xs.max(), ys.min() - pad, ys.max() + pad, title, xlabel, ylabel
    )
    for i, (name, (x, y)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{sx(a):.1f},{sy(b):.1f}" for a, b in zip(np.asarray(x), np.asarray(y)))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(
            f'<text x="{W - MARGIN["right"] - 6}" y="{MARGIN["top"] + 14 + 14 * i}" '
            f'text-anchor="end" font-size="11" font-family="sans-serif" fill="{color}">{name}</text>'
        )
    _write_svg(path, parts)
    rows = [("series", "x", "y")]
    for name, (x, y) in series.items():
        rows += [(name, repr(float(a)), repr(float(b))) for a, b in zip(x, y)]
    write_csv(str(path) + ".csv", rows)


def trajectory_plot(path, coords, title="trajectory"):
    """2D projection (first two axes) of [L, K, D] particle coordinates."""
    coords = np.asarray(coords)
    xy = coords[..., :2]
    lo = xy.reshape(-1, 2).min(axis=0)
    hi = xy.reshape(-1, 2).max(axis=0)
    pad = 0.05 * max(float((hi - lo).max()), 1e-9)
    parts, sx, sy = _axes_svg(
        lo[0] - pad, hi[0] + pad, lo[1] - pad, hi[1] + pad, title, "x", "y"
    )
    k = coords.shape[1]
    for p in range(k):
        color = PALETTE[p % len(PALETTE)]
        pts = " ".join(f"{sx(a):.1f},{sy(b):.1f}" for a, b in xy[:, p])
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.2"/>')
        parts.append(
            f'<circle cx="{sx(xy[0, p, 0]):.1f}" cy="{sy(xy[0, p, 1]):.1f}" r="4" fill="{color}"/>'
        )
    _write_svg(path, parts)
    rows = [("frame", "particle", "x", "y")]
    for l in range(coords.shape[0]):
        for p in range(k):
            rows.append((str(l), str(p), repr(float(xy[l, p, 0])), repr(float(xy[l, p, 1]))))
    write_csv(str(path) + ".csv", rows)


def _colormap(v):
    """0..1 -> hex, a compact blue-green-yellow ramp."""
    anchors = np.array(
        [[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]],
        dtype=np.float64,
    )
    x = np.clip(v, 0.0, 1.0) * (len(anchors) - 1)
    i = int(np.clip(np.floor(x), 0, len(anchors) - 2))
    frac = x - i
    rgb = anchors[i] * (1 - frac) + anchors[i + 1] * frac
    return "#{:02x}{:02x}{:02x}".format(*(int(round(c)) for c in rgb))


def heatmap(path, grid, title="field"):
    """[H, W] scalar field as colored cells."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError(f"contract violation: heatmap needs [H, W], got {grid.shape}")
    h, w = grid.shape
    lo, hi = float(grid.min()), float(grid.max())
    span = max(hi - lo, 1e-12)
    px0, px1 = MARGIN["left"], W - MARGIN["right"]
    py0, py1 = H - MARGIN["bottom"], MARGIN["top"]
    cw = (px1 - px0) / w
    ch = (py0 - py1) / h
    parts = [
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14" '
        f'font-family="sans-serif">{title} [{_fmt(lo)}, {_fmt(hi)}]</text>',
    ]
    for i in range(h):
        for j in range(w):
            color = _colormap((grid[i, j] - lo) / span)
            x = px0 + j * cw
            y = py1 + i * ch
            parts.append(
                f'<rect x="{x:.1f}" y="{y:.1f}" width="{cw + 0.5:.1f}" '
                f'height="{ch + 0.5:.1f}" fill="{color}"/>'
            )
    _write_svg(path, parts)
    rows = [("row", "col", "value")]
    for i in range(h):
        for j in range(w):
            rows.append((str(i), str(j), repr(float(grid[i, j]))))
    write_csv(str(path) + ".csv", rows)


def _write_svg(path, parts):
    body = "\n".join(parts)
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}">\n{body}\n</svg>\n'
    )
    with open(path, "w") as fh:
        fh.write(svg)
