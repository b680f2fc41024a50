"""Grid and heatmap images.

Values are coloured with a blue (low) to red (high) colormap; each map node
is a solid cell by default. PNGs are written without timestamps so repeated
runs produce identical bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib import colormaps
from PIL import Image, ImageDraw

DEFAULT_CMAP = "jet"
DEFAULT_CELL = 12


def colorize(values: np.ndarray, cmap: str = DEFAULT_CMAP, vmin: float | None = None,
             vmax: float | None = None) -> np.ndarray:
    """uint8 RGB array for a 2-D value grid."""
    v = np.asarray(values, dtype=float)
    lo = float(np.nanmin(v)) if vmin is None else vmin
    hi = float(np.nanmax(v)) if vmax is None else vmax
    scaled = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    rgba = colormaps[cmap](np.clip(scaled, 0.0, 1.0))
    return (rgba[..., :3] * 255).round().astype(np.uint8)


def grid_image(values: np.ndarray, cell: int = DEFAULT_CELL, topology: str = "rectangular",
               cmap: str = DEFAULT_CMAP, interpolate: bool = False, vmin=None, vmax=None) -> Image.Image:
    """Image with one `cell`-pixel square per grid node.

    Hexagonal grids shift odd rows right by half a cell. With `interpolate`
    the node colours are bicubically smoothed instead of drawn as blocks.
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    rows, cols = values.shape
    rgb = colorize(values, cmap, vmin, vmax)
    small = Image.fromarray(rgb, "RGB")
    if interpolate:
        return small.resize((cols * cell, rows * cell), Image.BICUBIC)
    if topology != "hexagonal":
        return small.resize((cols * cell, rows * cell), Image.NEAREST)
    half = cell // 2
    img = Image.new("RGB", (cols * cell + half, rows * cell), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    for r in range(rows):
        off = half if r % 2 else 0
        for c in range(cols):
            x0, y0 = c * cell + off, r * cell
            draw.rectangle([x0, y0, x0 + cell - 1, y0 + cell - 1], fill=tuple(int(t) for t in rgb[r, c]))
    return img


def label_image(labels: np.ndarray, cell: int = DEFAULT_CELL, topology: str = "rectangular") -> Image.Image:
    """Categorical grid (e.g. trend-cluster ids) in a qualitative palette."""
    labels = np.atleast_2d(np.asarray(labels, dtype=int))
    n = int(labels.max()) + 1 if labels.size else 1
    palette = colormaps["tab20"](np.arange(n) % 20)[:, :3]
    rgb = (palette[labels] * 255).round().astype(np.uint8)
    img = Image.fromarray(rgb, "RGB")
    if topology != "hexagonal":
        return img.resize((labels.shape[1] * cell, labels.shape[0] * cell), Image.NEAREST)
    return grid_image(labels.astype(float), cell, topology, "tab20", vmin=0, vmax=19)


def heatmap_image(matrix: np.ndarray, cluster_sizes: Sequence[int] = (), cell: int = 6,
                  cmap: str = "jet_r") -> Image.Image:
    """Square distance heatmap with black lines at cluster borders.

    Low distance (high correlation) is drawn red by default.
    """
    img = grid_image(matrix, cell, cmap=cmap, vmin=0.0, vmax=2.0)
    if cluster_sizes:
        draw = ImageDraw.Draw(img)
        size = img.size[0]
        edge = 0
        for s in list(cluster_sizes)[:-1]:
            edge += s
            p = edge * cell
            draw.line([(p, 0), (p, size)], fill=(0, 0, 0))
            draw.line([(0, p), (size, p)], fill=(0, 0, 0))
    return img


def save_png(img: Image.Image, path: str | Path) -> None:
    img.save(path, format="PNG", optimize=False)
