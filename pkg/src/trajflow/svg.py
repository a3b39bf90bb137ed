"""Minimal fixed-viewport SVG scatter plots of 2-D point sets."""
from __future__ import annotations

from pathlib import Path

import numpy as np

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#7f7f7f")
DATA_COLOR = "#b0b0b0"


def scatter_svg(data, samples, labels=None, extent: float = 4.0, size: int = 480,
                radius: float = 1.6) -> str:
    """Data points in gray under samples colored by label, on [-extent, extent]^2."""
    scale = size / (2 * extent)

    def circles(points, colors):
        out = []
        for (x, y), color in zip(np.asarray(points, dtype=float), colors):
            if abs(x) > extent or abs(y) > extent:
                continue
            cx, cy = (x + extent) * scale, (extent - y) * scale
            out.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{radius}" fill="{color}"/>')
        return out

    data = np.zeros((0, 2)) if data is None else np.asarray(data)
    samples = np.asarray(samples)
    if labels is None:
        sample_colors = [PALETTE[0]] * len(samples)
    else:
        sample_colors = [PALETTE[int(c) % len(PALETTE)] for c in labels]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>',
             '<g opacity="0.5">', *circles(data, [DATA_COLOR] * len(data)), "</g>",
             '<g opacity="0.8">', *circles(samples, sample_colors), "</g>",
             "</svg>"]
    return "\n".join(parts) + "\n"


def write_scatter_svg(path, data, samples, labels=None, **kw) -> None:
    Path(path).write_text(scatter_svg(data, samples, labels, **kw), encoding="utf-8")
