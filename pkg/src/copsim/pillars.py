"""BEV pillar grids: per-cell point statistics, occupancy, patch tiling, file IO.

A pillar grid is an H x W x C tensor over a square-cell top-down grid. Rows
index y, columns index x. Cell features are a fixed handcrafted statistic
vector, so pillarization is deterministic and needs no learned encoder.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud

COUNT_CAP = 31      # count channel saturates here
Z_NORM = 4.0        # z channels are divided by this (meters)
BASE_CHANNELS = 8


@dataclass(frozen=True)
class GridSpec:
    x_min: float
    y_min: float
    cell: float = 0.4
    h: int = 200
    w: int = 200
    c: int = 8

    def __post_init__(self):
        if self.cell <= 0:
            raise ValueError("grid.cell: must be > 0")
        if self.h < 1 or self.w < 1:
            raise ValueError("grid.h/grid.w: must be >= 1")
        if self.c < 1:
            raise ValueError("grid.c: must be >= 1")

    @classmethod
    def centered(cls, extent: float, cell: float = 0.4, c: int = 8) -> "GridSpec":
        """Square grid of side `extent` meters centered on the frame origin."""
        n = int(round(extent / cell))
        return cls(-extent / 2.0, -extent / 2.0, cell, n, n, c)

    @property
    def x_max(self) -> float:
        return self.x_min + self.w * self.cell

    @property
    def y_max(self) -> float:
        return self.y_min + self.h * self.cell

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.h, self.w, self.c)


@dataclass(frozen=True)
class PillarGrid:
    spec: GridSpec
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if data.shape != self.spec.shape:
            raise ValueError(f"grid data shape {data.shape} != spec shape {self.spec.shape}")
        if not np.isfinite(data).all():
            raise ValueError("grid values must be finite")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class OccupancyMask:
    spec: GridSpec
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(np.asarray(self.data, dtype=np.uint8))
        if data.shape != (self.spec.h, self.spec.w):
            raise ValueError(f"mask shape {data.shape} != ({self.spec.h}, {self.spec.w})")
        if data.size and data.max() > 1:
            raise ValueError("mask values must be 0 or 1")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)


def pillarize(cloud: PointCloud, spec: GridSpec) -> PillarGrid:
    """Bin points into cells and summarize each non-empty cell.

    Channels: [min(count, 31)/31, mean x offset from the cell center / cell,
    mean y offset / cell, mean z / 4, max z / 4, min z / 4, mean intensity,
    1.0], zero-padded when spec.c > 8. Points outside the extent are dropped;
    empty cells are exactly zero. Point order never affects the result: points
    are reduced in a canonical per-cell order.
    """
    if spec.c < BASE_CHANNELS:
        raise ValueError(f"pillarize needs at least {BASE_CHANNELS} channels, got c={spec.c}")
    data = np.zeros(spec.shape)
    if cloud.n == 0:
        return PillarGrid(spec, data)

    pts = cloud.points
    col = np.floor((pts[:, 0] - spec.x_min) / spec.cell).astype(np.int64)
    row = np.floor((pts[:, 1] - spec.y_min) / spec.cell).astype(np.int64)
    ok = (col >= 0) & (col < spec.w) & (row >= 0) & (row < spec.h)
    if not ok.any():
        return PillarGrid(spec, data)
    pts = pts[ok]
    cell_id = row[ok] * spec.w + col[ok]

    order = np.lexsort((pts[:, 3], pts[:, 2], pts[:, 1], pts[:, 0], cell_id))
    pts = pts[order]
    cell_id = cell_id[order]
    uniq, start, count = np.unique(cell_id, return_index=True, return_counts=True)

    sum_x = np.add.reduceat(pts[:, 0], start)
    sum_y = np.add.reduceat(pts[:, 1], start)
    sum_z = np.add.reduceat(pts[:, 2], start)
    sum_i = np.add.reduceat(pts[:, 3], start)
    z_max = np.maximum.reduceat(pts[:, 2], start)
    z_min = np.minimum.reduceat(pts[:, 2], start)

    r = uniq // spec.w
    c = uniq % spec.w
    center_x = spec.x_min + (c + 0.5) * spec.cell
    center_y = spec.y_min + (r + 0.5) * spec.cell

    feats = np.zeros((len(uniq), spec.c))
    feats[:, 0] = np.minimum(count, COUNT_CAP) / COUNT_CAP
    feats[:, 1] = (sum_x / count - center_x) / spec.cell
    feats[:, 2] = (sum_y / count - center_y) / spec.cell
    feats[:, 3] = (sum_z / count) / Z_NORM
    feats[:, 4] = z_max / Z_NORM
    feats[:, 5] = z_min / Z_NORM
    feats[:, 6] = sum_i / count
    feats[:, 7] = 1.0
    data[r, c] = feats
    return PillarGrid(spec, data)


def occupancy_of(grid: PillarGrid) -> OccupancyMask:
    """1 where the absolute channel sum is positive."""
    return OccupancyMask(grid.spec, (np.abs(grid.data).sum(axis=2) > 0).astype(np.uint8))


@dataclass(frozen=True)
class PatchLayout:
    """Non-overlapping p x p tiling of a grid, flattened row-major per tile."""

    p: int
    n_patches: int
    patch_len: int

    @classmethod
    def for_spec(cls, spec: GridSpec, p: int = 4) -> "PatchLayout":
        if p < 1:
            raise ValueError("patch.p: must be >= 1")
        if spec.h % p or spec.w % p:
            raise ValueError(f"grid {spec.h}x{spec.w} is not divisible by patch edge p={p}")
        return cls(p, (spec.h // p) * (spec.w // p), p * p * spec.c)


def _check_layout(spec: GridSpec, layout: PatchLayout) -> None:
    if spec.h % layout.p or spec.w % layout.p:
        raise ValueError(f"grid {spec.h}x{spec.w} is not divisible by patch edge p={layout.p}")
    if layout.n_patches != (spec.h // layout.p) * (spec.w // layout.p):
        raise ValueError("layout patch count does not match the grid")
    if layout.patch_len != layout.p * layout.p * spec.c:
        raise ValueError("layout patch length does not match the grid channels")


def patchify(grid: PillarGrid, layout: PatchLayout) -> np.ndarray:
    """(P, p*p*C) matrix; tiles in row-major order, row-major within a tile."""
    spec = grid.spec
    _check_layout(spec, layout)
    p = layout.p
    hp, wp = spec.h // p, spec.w // p
    return (
        grid.data.reshape(hp, p, wp, p, spec.c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(layout.n_patches, layout.patch_len)
        .copy()
    )


def unpatchify(matrix: np.ndarray, layout: PatchLayout, spec: GridSpec) -> PillarGrid:
    """Exact inverse of patchify."""
    _check_layout(spec, layout)
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (layout.n_patches, layout.patch_len):
        raise ValueError(
            f"matrix shape {matrix.shape} != ({layout.n_patches}, {layout.patch_len})"
        )
    p = layout.p
    hp, wp = spec.h // p, spec.w // p
    data = (
        matrix.reshape(hp, wp, p, p, spec.c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(spec.h, spec.w, spec.c)
        .copy()
    )
    return PillarGrid(spec, data)


def map_to_tiles(field: np.ndarray, p: int) -> np.ndarray:
    """Tile an (H, W) map into (P, p*p) rows, same ordering as patchify."""
    h, w = field.shape
    if h % p or w % p:
        raise ValueError(f"map {h}x{w} is not divisible by patch edge p={p}")
    return (
        field.reshape(h // p, p, w // p, p).transpose(0, 2, 1, 3).reshape(-1, p * p).copy()
    )


def tiles_to_map(tiles: np.ndarray, p: int, h: int, w: int) -> np.ndarray:
    """Inverse of map_to_tiles."""
    tiles = np.asarray(tiles, dtype=np.float64)
    return tiles.reshape(h // p, w // p, p, p).transpose(0, 2, 1, 3).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# File format: b"CGRD", version u8=1, u32 H, u32 W, u32 C, eight f64 spec
# fields (x_min, y_min, cell, five reserved zeros), then H*W*C little-endian
# f32 values in row-major order.

GRID_MAGIC = b"CGRD"
GRID_VERSION = 1


def write_grid(path: str, grid: PillarGrid) -> None:
    spec = grid.spec
    with open(path, "wb") as f:
        f.write(GRID_MAGIC)
        f.write(struct.pack("<BIII", GRID_VERSION, spec.h, spec.w, spec.c))
        f.write(struct.pack("<8d", spec.x_min, spec.y_min, spec.cell, 0.0, 0.0, 0.0, 0.0, 0.0))
        f.write(np.ascontiguousarray(grid.data, dtype="<f4").tobytes())


def read_grid(path: str) -> PillarGrid:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != GRID_MAGIC:
        raise ValueError(f"{path}: bad magic, expected {GRID_MAGIC!r}")
    version, h, w, c = struct.unpack_from("<BIII", blob, 4)
    if version != GRID_VERSION:
        raise ValueError(f"{path}: unsupported grid format version {version}")
    x_min, y_min, cell = struct.unpack_from("<3d", blob, 17)
    offset = 17 + 8 * 8
    expected = offset + 4 * h * w * c
    if len(blob) != expected:
        raise ValueError(f"{path}: truncated grid file ({len(blob)} bytes, expected {expected})")
    spec = GridSpec(x_min, y_min, cell, h, w, c)
    data = np.frombuffer(blob, dtype="<f4", count=h * w * c, offset=offset)
    return PillarGrid(spec, data.reshape(h, w, c).astype(np.float64))
