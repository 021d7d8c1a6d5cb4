"""BEV feature maps in a shared global frame: toy encoder, resampling, pose embedding."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import GridSpec

BEVF_MAGIC = b"BEVF"


@dataclass(frozen=True)
class BevFeatureMap:
    """Dense H x W x D feature grid anchored by a GridSpec."""

    grid: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[:2] != (self.grid.h, self.grid.w) or v.shape[2] < 1:
            raise ValueError(f"values shape {v.shape} inconsistent with grid "
                             f"{(self.grid.h, self.grid.w)}")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def d(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class SparseFeatureMap:
    """Sparse (row, col, vector) entries plus the dense parent shape."""

    entries: tuple[tuple[int, int, np.ndarray], ...]
    shape: tuple[int, int, int]

    def __post_init__(self):
        h, w, d = self.shape
        seen = set()
        for r, c, vec in self.entries:
            if not (0 <= r < h and 0 <= c < w):
                raise ValueError(f"entry ({r}, {c}) outside {h}x{w}")
            if (r, c) in seen:
                raise ValueError(f"duplicate entry at ({r}, {c})")
            if len(vec) != d:
                raise ValueError("entry vector width mismatch")
            seen.add((r, c))


def sparsify(fmap: BevFeatureMap, bits: np.ndarray) -> SparseFeatureMap:
    """Keep exactly the cells where bits == 1, row-major order."""
    if bits.shape != fmap.grid.shape:
        raise ValueError("bits shape mismatch")
    entries = tuple((int(r), int(c), fmap.values[r, c].copy())
                    for r, c in zip(*np.nonzero(bits)))
    return SparseFeatureMap(entries, (fmap.grid.h, fmap.grid.w, fmap.d))


def densify(sparse: SparseFeatureMap) -> np.ndarray:
    out = np.zeros(sparse.shape, dtype=np.float64)
    for r, c, vec in sparse.entries:
        out[r, c] = vec
    return out


def positional_channels(grid: GridSpec, n_channels: int) -> np.ndarray:
    """Fixed sinusoidal cell features: sin/cos over x then y, doubling frequency.

    Channel j is sin(2 pi f u + phase) with u the normalized x (j mod 4 < 2) or
    y coordinate, phase pi/2 for the cos variants, f = 2**(j // 4).
    """
    out = np.empty((grid.h, grid.w, n_channels), dtype=np.float64)
    ux = (np.arange(grid.w) + 0.5) / grid.w
    uy = (np.arange(grid.h) + 0.5) / grid.h
    for j in range(n_channels):
        freq = 2.0 ** (j // 4)
        phase = 0.0 if j % 2 == 0 else math.pi / 2.0
        if j % 4 < 2:
            row = np.sin(2.0 * math.pi * freq * ux + phase)
            out[:, :, j] = np.broadcast_to(row, (grid.h, grid.w))
        else:
            col = np.sin(2.0 * math.pi * freq * uy + phase)
            out[:, :, j] = np.broadcast_to(col[:, None], (grid.h, grid.w))
    return out


def encode(observation: np.ndarray, d_channels: int, grid: GridSpec,
           agent_pos: tuple[float, float], sensor_range: float) -> BevFeatureMap:
    """Toy BEV encoder.

    Channel 0 carries the cell evidence, channel 1 the distance-to-agent decay
    exp(-d / sensor_range), and the remaining channels fixed sinusoidal
    positional features; fully deterministic.
    """
    if d_channels < 2:
        raise ValueError("need at least 2 channels")
    obs = np.asarray(observation, dtype=np.float64)
    if obs.shape != grid.shape:
        raise ValueError(f"observation shape {obs.shape} != grid {grid.shape}")
    values = np.empty((grid.h, grid.w, d_channels), dtype=np.float64)
    values[:, :, 0] = obs
    centers = grid.centers
    dist = np.hypot(centers[:, :, 0] - agent_pos[0], centers[:, :, 1] - agent_pos[1])
    values[:, :, 1] = np.exp(-dist / sensor_range)
    if d_channels > 2:
        values[:, :, 2:] = positional_channels(grid, d_channels - 2)
    return BevFeatureMap(grid, values)


def to_global_frame(fmap: BevFeatureMap, pose: tuple[float, float, float],
                    target_grid: GridSpec | None = None) -> BevFeatureMap:
    """Resample an agent-local map onto the shared global grid (nearest neighbor).

    The pose maps local to global coordinates; target cells outside the source
    footprint are zero.
    """
    if target_grid is None:
        target_grid = GridSpec(fmap.grid.h, fmap.grid.w, fmap.grid.cell_size)
    px, py, heading = pose
    c, s = math.cos(heading), math.sin(heading)
    centers = target_grid.centers
    gx = centers[:, :, 0] - px
    gy = centers[:, :, 1] - py
    lx = gx * c + gy * s
    ly = -gx * s + gy * c
    src = fmap.grid
    cols = np.floor((lx - src.origin_x) / src.cell_size).astype(np.int64)
    rows = np.floor((ly - src.origin_y) / src.cell_size).astype(np.int64)
    valid = (rows >= 0) & (rows < src.h) & (cols >= 0) & (cols < src.w)
    out = np.zeros((target_grid.h, target_grid.w, fmap.d), dtype=np.float64)
    rr, cc = np.nonzero(valid)
    out[rr, cc] = fmap.values[rows[rr, cc], cols[rr, cc]]
    return BevFeatureMap(target_grid, out)


def pose_embedding(poses: list[tuple[float, float, float]], grid: GridSpec,
                   area_side: float) -> np.ndarray:
    """(H, W, N-1) smooth proximity field, one channel per collaborator."""
    if not poses:
        raise ValueError("need at least one collaborator pose")
    centers = grid.centers
    out = np.empty((grid.h, grid.w, len(poses)), dtype=np.float64)
    for k, (x, y, _) in enumerate(poses):
        dist = np.hypot(centers[:, :, 0] - x, centers[:, :, 1] - y)
        out[:, :, k] = np.exp(-dist / area_side)
    return out


def save_bevf(fmap: BevFeatureMap, path: str | Path) -> None:
    """Flat binary export: 16-byte header (magic, u32 H, W, D LE) + f32 data,
    row-major, channel-minor."""
    header = BEVF_MAGIC + struct.pack("<III", fmap.grid.h, fmap.grid.w, fmap.d)
    Path(path).write_bytes(header + fmap.values.astype("<f4").tobytes(order="C"))


def load_bevf(path: str | Path, cell_size: float = 1.0,
              origin: tuple[float, float] = (0.0, 0.0)) -> BevFeatureMap:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != BEVF_MAGIC:
        raise ValueError("not a BEVF file")
    h, w, d = struct.unpack("<III", raw[4:16])
    expected = 16 + h * w * d * 4
    if len(raw) != expected:
        raise ValueError(f"BEVF payload length {len(raw)} != expected {expected}")
    values = np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w, d).astype(np.float64)
    return BevFeatureMap(GridSpec(h, w, cell_size, origin[0], origin[1]), values)
