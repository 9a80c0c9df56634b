"""Ground-truth density map generation from head points.

Each head contributes a discretized 2-D Gaussian, truncated to a square
window of half-width ceil(3*sigma) grid cells and renormalized so its
in-grid mass is exactly 1. Total mass therefore equals the head count at
every scale. Kernel values are sampled at cell centers.

Sigma is expressed in source-image pixels; at downsampling factor ``scale``
the kernel std becomes sigma/scale output-grid cells. An optional
size-adaptive mode derives sigma per head from the approximate box:
0.3 * max(width, height), clamped to [2, 15] image pixels.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .annotations import HeadAnnotation

VALID_SCALES = (1, 4, 8, 16, 32)

# Pyramid level -> downsampling factor of the prediction at that level.
LEVEL_SCALES = {6: 32, 5: 16, 4: 8, 3: 4}

ADAPTIVE_SIGMA_FACTOR = 0.3
ADAPTIVE_SIGMA_MIN = 2.0
ADAPTIVE_SIGMA_MAX = 15.0

DENSITY_MAGIC = b"DMAP"


@dataclass(frozen=True)
class DensityMap:
    values: np.ndarray  # (rows, cols) float64, nonnegative
    scale: int

    @property
    def total(self) -> float:
        return float(self.values.sum())


def adaptive_sigma(head: HeadAnnotation) -> float:
    s = ADAPTIVE_SIGMA_FACTOR * max(head.width, head.height)
    return min(max(s, ADAPTIVE_SIGMA_MIN), ADAPTIVE_SIGMA_MAX)


def _grid_shape(image_dims: tuple[int, int], scale: int) -> tuple[int, int]:
    w, h = image_dims
    return math.ceil(h / scale), math.ceil(w / scale)


def _splat_head(grid: np.ndarray, cx: float, cy: float, sigma_cells: float) -> None:
    """Add one unit-mass truncated Gaussian centered at (cx, cy) grid coords."""
    rows, cols = grid.shape
    radius = math.ceil(3.0 * sigma_cells)
    col0 = max(int(math.floor(cx)) - radius, 0)
    col1 = min(int(math.floor(cx)) + radius + 1, cols)
    row0 = max(int(math.floor(cy)) - radius, 0)
    row1 = min(int(math.floor(cy)) + radius + 1, rows)
    if col0 >= col1 or row0 >= row1:
        # Head clamped to the border can still land outside a coarse grid
        # by under a cell; deposit its mass in the nearest cell.
        r = min(max(int(cy), 0), rows - 1)
        c = min(max(int(cx), 0), cols - 1)
        grid[r, c] += 1.0
        return
    ys = np.arange(row0, row1, dtype=np.float64) + 0.5
    xs = np.arange(col0, col1, dtype=np.float64) + 0.5
    dy2 = (ys - cy) ** 2
    dx2 = (xs - cx) ** 2
    kernel = np.exp(-(dy2[:, None] + dx2[None, :]) / (2.0 * sigma_cells**2))
    mass = kernel.sum()
    if mass <= 0.0:
        r = min(max(int(cy), 0), rows - 1)
        c = min(max(int(cx), 0), cols - 1)
        grid[r, c] += 1.0
        return
    grid[row0:row1, col0:col1] += kernel / mass


def generate_density_map(
    heads: Sequence[HeadAnnotation],
    image_dims: tuple[int, int],
    sigma: float = 4.0,
    scale: int = 1,
    adaptive: bool = False,
) -> DensityMap:
    """Density map over a ceil(H/scale) x ceil(W/scale) grid.

    ``image_dims`` is (width, height). Total mass equals len(heads) by
    per-head renormalization.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if scale not in VALID_SCALES:
        raise ValueError(f"scale must be one of {VALID_SCALES}, got {scale}")
    rows, cols = _grid_shape(image_dims, scale)
    grid = np.zeros((rows, cols), dtype=np.float64)
    for head in heads:
        s = adaptive_sigma(head) if adaptive else sigma
        _splat_head(grid, head.x / scale, head.y / scale, s / scale)
    return DensityMap(values=grid, scale=scale)


def pyramid_targets(
    heads: Sequence[HeadAnnotation],
    image_dims: tuple[int, int],
    sigma: float = 4.0,
    adaptive: bool = False,
    levels: Iterable[int] = (3, 4, 5, 6),
) -> dict[int, DensityMap]:
    """Per-level targets generated directly at each scale (mass-conserving)."""
    return {
        level: generate_density_map(
            heads, image_dims, sigma=sigma, scale=LEVEL_SCALES[level], adaptive=adaptive
        )
        for level in levels
    }


def write_density_binary(dm: DensityMap, path) -> None:
    """Flat little-endian float32 grid behind a 16-byte header (magic, rows, cols)."""
    rows, cols = dm.values.shape
    with open(path, "wb") as f:
        f.write(DENSITY_MAGIC)
        f.write(struct.pack("<III", 1, rows, cols))
        f.write(dm.values.astype("<f4").tobytes())


def read_density_binary(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16 or header[:4] != DENSITY_MAGIC:
            raise ValueError(f"{path}: not a density-map file")
        _, rows, cols = struct.unpack("<III", header[4:])
        data = np.frombuffer(f.read(rows * cols * 4), dtype="<f4")
    if data.size != rows * cols:
        raise ValueError(f"{path}: truncated density-map file")
    return data.reshape(rows, cols).astype(np.float64)


def render_colorized(dm: DensityMap, path) -> None:
    """Write a colormapped PNG of the density map for visual inspection."""
    from PIL import Image

    v = dm.values
    vmax = v.max()
    norm = v / vmax if vmax > 0 else v
    # Simple black-red-yellow ramp; avoids a matplotlib dependency here.
    r = np.clip(norm * 2.0, 0, 1)
    g = np.clip(norm * 2.0 - 1.0, 0, 1)
    b = np.zeros_like(norm)
    rgb = (np.stack([r, g, b], axis=-1) * 255).astype(np.uint8)
    Image.fromarray(rgb).save(path)
