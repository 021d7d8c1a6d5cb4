"""Shared BEV grid geometry used by the scenario, feature, and fusion layers."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    """A regular H x W cell grid anchored in global coordinates.

    Cell (r, c) covers [origin_x + c*cell, origin_x + (c+1)*cell) x
    [origin_y + r*cell, ...); its center is offset by half a cell.
    """

    h: int
    w: int
    cell_size: float
    origin_x: float = 0.0
    origin_y: float = 0.0

    def __post_init__(self):
        if self.h < 1 or self.w < 1:
            raise ValueError("grid must have at least one cell per axis")
        if self.cell_size <= 0.0:
            raise ValueError("cell_size must be positive")

    @classmethod
    def for_area(cls, area_side: float, cell_size: float = 1.0) -> "GridSpec":
        n = int(round(area_side / cell_size))
        return cls(n, n, cell_size)

    @cached_property
    def centers(self) -> np.ndarray:
        """(H, W, 2) array of cell-center global coordinates (x, y)."""
        xs = self.origin_x + (np.arange(self.w) + 0.5) * self.cell_size
        ys = self.origin_y + (np.arange(self.h) + 0.5) * self.cell_size
        gx, gy = np.meshgrid(xs, ys)
        out = np.stack([gx, gy], axis=-1)
        out.setflags(write=False)
        return out

    def center_of(self, r: int, c: int) -> tuple[float, float]:
        return (self.origin_x + (c + 0.5) * self.cell_size,
                self.origin_y + (r + 0.5) * self.cell_size)

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        """Cell index containing a point (may be out of range; see contains)."""
        c = int(np.floor((x - self.origin_x) / self.cell_size))
        r = int(np.floor((y - self.origin_y) / self.cell_size))
        return r, c

    def contains(self, r: int, c: int) -> bool:
        return 0 <= r < self.h and 0 <= c < self.w

    @property
    def shape(self) -> tuple[int, int]:
        return (self.h, self.w)
