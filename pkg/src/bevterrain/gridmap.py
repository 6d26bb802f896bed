"""Vehicle-centric, gravity-aligned grid maps at two ranges.

The map stack works on two square ranges: the micro range covers +-50 m at
0.2 m resolution (500 cells per side) and the short range covers +-100 m at
0.8 m resolution (250 cells per side). One short cell covers a 4x4 block of
micro cells. Row index i grows with vehicle-forward x, column index j with
vehicle-left y; cell (i, j) covers [i*r - E/2, (i+1)*r - E/2) on each axis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional

import numpy as np

ELEVATION_LIMIT_M = 25.0


@dataclass(frozen=True)
class RangeSpec:
    """Side length and cell size of one square map range."""

    id: str
    extent_m: float
    resolution_m: float

    def __post_init__(self):
        if self.extent_m <= 0 or self.resolution_m <= 0:
            raise ValueError("extent and resolution must be positive")
        n = self.extent_m / self.resolution_m
        if abs(n - round(n)) > 1e-9:
            raise ValueError(
                f"extent {self.extent_m} is not an integer multiple of "
                f"resolution {self.resolution_m}"
            )
        if self.id == "micro" and (self.extent_m, self.resolution_m) != (100.0, 0.2):
            raise ValueError("micro range is fixed at (100.0 m, 0.2 m)")
        if self.id == "short" and (self.extent_m, self.resolution_m) != (200.0, 0.8):
            raise ValueError("short range is fixed at (200.0 m, 0.8 m)")

    @property
    def cells(self) -> int:
        return int(round(self.extent_m / self.resolution_m))


MICRO = RangeSpec("micro", 100.0, 0.2)
SHORT = RangeSpec("short", 200.0, 0.8)


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    r = math.fmod(yaw + math.pi, 2.0 * math.pi)
    if r <= 0.0:
        r += 2.0 * math.pi
    return r - math.pi


@dataclass(frozen=True)
class Pose2p5:
    """Planar pose with height: x, y, z in meters, yaw in radians."""

    x: float
    y: float
    z: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


class RegionLabel(IntEnum):
    """Evaluation partition: observed past/current, observed future, never."""

    ObsPC = 0
    ObsF = 1
    Unobs = 2


RANGED_LAYERS_01 = ("risk", "confidence")


@dataclass
class GridMap:
    """A stack of named 2D layers sharing one range spec and origin.

    Every layer carries a parallel boolean validity mask; missing cells are
    an explicit bit, never a sentinel value. Maps are treated as immutable
    after construction (layers may be added while building, not mutated).
    """

    spec: RangeSpec
    origin: Pose2p5
    timestamp: float = 0.0
    data: dict = field(default_factory=dict)
    valid: dict = field(default_factory=dict)

    def add_layer(self, name: str, values: np.ndarray, valid: Optional[np.ndarray] = None) -> None:
        n = self.spec.cells
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (n, n):
            raise ValueError(f"layer {name!r}: shape {values.shape} != ({n}, {n})")
        if valid is None:
            valid = np.ones((n, n), dtype=bool)
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != (n, n):
            raise ValueError(f"layer {name!r}: mask shape {valid.shape} != ({n}, {n})")
        if not np.all(np.isfinite(values[valid])):
            raise ValueError(f"layer {name!r}: non-finite values marked valid")
        if name in RANGED_LAYERS_01:
            v = values[valid]
            if v.size and (v.min() < 0.0 or v.max() > 1.0):
                raise ValueError(f"layer {name!r}: values outside [0, 1]")
        self.data[name] = values
        self.valid[name] = valid

    def layer(self, name: str):
        return self.data[name], self.valid[name]

    def has_layer(self, name: str) -> bool:
        return name in self.data

    @property
    def layer_names(self):
        return list(self.data.keys())

    def copy(self) -> "GridMap":
        g = GridMap(self.spec, self.origin, self.timestamp)
        for name in self.data:
            g.data[name] = self.data[name].copy()
            g.valid[name] = self.valid[name].copy()
        return g


def world_to_cell(p, origin: Pose2p5, spec: RangeSpec) -> Optional[tuple]:
    """Map a world xy point to a cell index, or None when out of range."""
    c, s = math.cos(origin.yaw), math.sin(origin.yaw)
    dx = p[0] - origin.x
    dy = p[1] - origin.y
    # rotate by -yaw into the vehicle frame
    xl = c * dx + s * dy
    yl = -s * dx + c * dy
    half = spec.extent_m / 2.0
    i = math.floor((xl + half) / spec.resolution_m)
    j = math.floor((yl + half) / spec.resolution_m)
    n = spec.cells
    if 0 <= i < n and 0 <= j < n:
        return (i, j)
    return None


def world_to_cell_array(points: np.ndarray, origin: Pose2p5, spec: RangeSpec):
    """Vectorized world_to_cell: (N, 2) points -> ((N, 2) int cells, (N,) in-bounds)."""
    points = np.asarray(points, dtype=np.float64)
    c, s = math.cos(origin.yaw), math.sin(origin.yaw)
    dx = points[:, 0] - origin.x
    dy = points[:, 1] - origin.y
    xl = c * dx + s * dy
    yl = -s * dx + c * dy
    half = spec.extent_m / 2.0
    ij = np.empty((points.shape[0], 2), dtype=np.int64)
    ij[:, 0] = np.floor((xl + half) / spec.resolution_m)
    ij[:, 1] = np.floor((yl + half) / spec.resolution_m)
    n = spec.cells
    inb = (ij[:, 0] >= 0) & (ij[:, 0] < n) & (ij[:, 1] >= 0) & (ij[:, 1] < n)
    return ij, inb


def cell_to_world(i, j, origin: Pose2p5, spec: RangeSpec) -> np.ndarray:
    """World xy of the center of cell (i, j). Accepts scalars or arrays."""
    half = spec.extent_m / 2.0
    xl = (np.asarray(i) + 0.5) * spec.resolution_m - half
    yl = (np.asarray(j) + 0.5) * spec.resolution_m - half
    c, s = math.cos(origin.yaw), math.sin(origin.yaw)
    x = origin.x + c * xl - s * yl
    y = origin.y + s * xl + c * yl
    return np.stack([x, y], axis=-1)


def cell_centers(spec: RangeSpec, origin: Pose2p5) -> np.ndarray:
    """(cells, cells, 2) array of world xy cell centers."""
    n = spec.cells
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return cell_to_world(ii, jj, origin, spec)


def crop_window(n: int) -> slice:
    """Index window of the central half-extent crop of an n-cell axis.

    For the 250-cell short grid this is rows/cols [62, 187): the +-50 m
    window sits at [-50.4 m, +49.6 m). The 0.4 m asymmetry is unavoidable
    with an even grid and is used consistently by the losses and predictor.
    """
    c = n // 2
    off = (n - c) // 2
    return slice(off, off + c)


def center_crop(layer: np.ndarray) -> np.ndarray:
    """Central half-extent crop of a short-range layer (250x250 -> 125x125)."""
    layer = np.asarray(layer)
    n = layer.shape[0]
    if layer.shape[1] != n:
        raise ValueError(f"expected a square layer, got {layer.shape}")
    w = crop_window(n)
    return layer[w, w]


def downsample_micro_to_short(values: np.ndarray, valid: Optional[np.ndarray] = None):
    """Masked 4x4 block mean of a micro layer (500x500 -> 125x125).

    An output cell is the mean of the valid cells of its block and is
    missing only when all 16 inputs are missing. Returns (values, valid).
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    if values.shape[1] != n or n % 4:
        raise ValueError(f"expected a square layer with side divisible by 4, got {values.shape}")
    if valid is None:
        valid = np.ones_like(values, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != values.shape:
        raise ValueError("validity mask shape mismatch")
    m = n // 4
    vals = np.where(valid, values, 0.0).reshape(m, 4, m, 4)
    cnt = valid.reshape(m, 4, m, 4).sum(axis=(1, 3))
    out_valid = cnt > 0
    sums = vals.sum(axis=(1, 3))
    out = np.zeros((m, m))
    np.divide(sums, cnt, out=out, where=out_valid)
    return out, out_valid


def rescale_elevation(e):
    """Clamp elevation to +-25 m and scale to +-1."""
    return np.clip(e, -ELEVATION_LIMIT_M, ELEVATION_LIMIT_M) / ELEVATION_LIMIT_M


def unrescale_elevation(v):
    """Inverse of rescale_elevation on the normalized range."""
    return np.asarray(v) * ELEVATION_LIMIT_M
