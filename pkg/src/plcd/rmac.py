"""Multi-scale rigid-grid region generation and per-region max pooling.

At scale ``l`` the grid places ``l x l`` square regions whose top-left
corners sit on a uniform lattice. Region widths come from a configurable
table (defaults reproduce the 12/9/7/5 progression on a 12-cell map, scaled
proportionally for other sides); scales without a table entry fall back to
``round(2 * side / (l + 1))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_WIDTH_TABLE: dict[int, int] = {1: 12, 2: 9, 3: 7, 4: 5}
REFERENCE_SIDE = 12


@dataclass(frozen=True)
class Region:
    """Rectangular window on a feature map, in cell units."""

    scale: int
    x0: int
    y0: int
    width: int
    height: int


def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def region_width(side: int, scale: int, width_table: dict[int, int] | None = None,
                 reference_side: int = REFERENCE_SIDE) -> int:
    table = DEFAULT_WIDTH_TABLE if width_table is None else width_table
    if scale in table:
        base = table[scale]
        width = base if side == reference_side else _round_half_up(base * side / reference_side)
    else:
        width = _round_half_up(2 * side / (scale + 1))
    if not 1 <= width <= side:
        raise ValueError(
            f"width rule gives {width} for scale {scale} on side {side}; "
            f"must be within [1, {side}]"
        )
    return width


def _offsets(side: int, width: int, scale: int) -> list[int]:
    if scale == 1:
        return [_round_half_up((side - width) / 2)]
    return [_round_half_up(i * (side - width) / (scale - 1)) for i in range(scale)]


def region_grid(map_shape: int | tuple[int, int], scales: Iterable[int],
                width_table: dict[int, int] | None = None,
                reference_side: int = REFERENCE_SIDE) -> list[Region]:
    """Regions for all scales, ordered by ascending scale then row-major centers.

    ``map_shape`` is either a square side or (height, width); rectangular maps
    apply the width rule per axis.
    """
    if isinstance(map_shape, tuple):
        height, width = map_shape
    else:
        height = width = int(map_shape)
    scales = sorted(set(int(l) for l in scales))
    if not scales:
        raise ValueError("scales must be non-empty")
    if min(scales) < 1:
        raise ValueError(f"scales must be >= 1 (got {min(scales)})")
    regions: list[Region] = []
    for scale in scales:
        w = region_width(width, scale, width_table, reference_side)
        h = region_width(height, scale, width_table, reference_side)
        for y0 in _offsets(height, h, scale):
            for x0 in _offsets(width, w, scale):
                regions.append(Region(scale=scale, x0=x0, y0=y0, width=w, height=h))
    return regions


def region_max_pool(featmap: np.ndarray, region: Region) -> np.ndarray:
    """Per-channel maximum over the region window."""
    _, height, width = featmap.shape
    if region.x0 < 0 or region.y0 < 0 or region.x0 + region.width > width \
            or region.y0 + region.height > height:
        raise ValueError(f"region {region} out of bounds for map {featmap.shape}")
    window = featmap[:, region.y0 : region.y0 + region.height,
                     region.x0 : region.x0 + region.width]
    return window.max(axis=(1, 2))


def global_max_pool(featmap: np.ndarray) -> np.ndarray:
    return featmap.max(axis=(1, 2))


def extract_patch_features(featmap: np.ndarray, grid: Sequence[Region],
                           project: Callable[[np.ndarray], np.ndarray] | None = None,
                           ) -> list[np.ndarray]:
    """Pooled vector per region, in grid order; optionally projected."""
    pooled = [region_max_pool(featmap, region) for region in grid]
    if project is None:
        return pooled
    return [project(v) for v in pooled]


def region_cells(region: Region, map_shape: tuple[int, int, int]) -> np.ndarray:
    """Flat spatial indices (row-major over height x width) the region covers."""
    _, height, width = map_shape
    if region.x0 < 0 or region.y0 < 0 or region.x0 + region.width > width \
            or region.y0 + region.height > height:
        raise ValueError(f"region {region} out of bounds for map shape {map_shape}")
    rows = np.arange(region.y0, region.y0 + region.height)
    cols = np.arange(region.x0, region.x0 + region.width)
    return (rows[:, None] * width + cols[None, :]).ravel()


def grid_to_csv(grid: Sequence[Region]) -> str:
    """Debug dump, one ``scale,x0,y0,w,h`` line per region."""
    lines = ["scale,x0,y0,w,h"]
    lines += [f"{r.scale},{r.x0},{r.y0},{r.width},{r.height}" for r in grid]
    return "\n".join(lines) + "\n"
