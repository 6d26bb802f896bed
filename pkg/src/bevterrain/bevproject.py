"""Camera lift-splat projection, pillar featurization, and multi-modal BEV
feature stacking onto the short-range grid."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .gridmap import Pose2p5, RangeSpec, SHORT, rescale_elevation
from .voxelmap import MAX_POINTS_PER_PILLAR


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))  # camera -> vehicle
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    max_range: float = 120.0
    ray_step: float = 0.05

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")


def default_camera_rig(width: int = 128, height: int = 96, hfov_deg: float = 90.0, mount_height: float = 1.8, pitch: float = 0.15):
    """Four-camera surround rig (front, left, back, right)."""
    from .synthworld import camera_mount

    fx = width / (2.0 * math.tan(math.radians(hfov_deg) / 2.0))
    rigs = []
    for yaw in (0.0, math.pi / 2.0, math.pi, -math.pi / 2.0):
        rot, t = camera_mount(yaw, pitch, (0.0, 0.0, mount_height))
        rigs.append(
            CameraModel(
                fx=fx, fy=fx, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                width=width, height=height, rotation=rot, translation=t,
            )
        )
    return rigs


@dataclass(frozen=True)
class DepthBinning:
    start: float = 1.0
    step: float = 0.8
    count: int = 137
    limit: float = 110.0

    def __post_init__(self):
        last = self.start + self.step * (self.count - 1)
        if not (last < self.limit <= last + self.step):
            raise ValueError(f"bin layout {self.start}+{self.step}*{self.count} misses limit {self.limit}")

    @property
    def centers(self) -> np.ndarray:
        return self.start + self.step * np.arange(self.count)

    def bin_of(self, depth) -> np.ndarray:
        """Index of the bin containing each depth; -1 when out of range."""
        d = np.asarray(depth, dtype=np.float64)
        idx = np.floor((d - self.start) / self.step).astype(np.int64)
        idx[(d < self.start) | (idx >= self.count)] = -1
        return idx


def fixed_featurizer(n_in: int, n_out: int, seed: int):
    """Deterministic random linear featurizer weights (plus zero bias)."""
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, math.sqrt(2.0 / n_in), size=(n_in, n_out)), np.zeros(n_out)


@dataclass
class PixelFeatureSpec:
    """Per-pixel feature definition: linear embed + ReLU of the geometric
    image channels, evaluated every `downsample` pixels."""

    weight: np.ndarray  # (3, C_img)
    bias: np.ndarray
    downsample: int = 8

    @classmethod
    def from_seed(cls, n_out: int = 8, seed: int = 7, downsample: int = 8):
        w, b = fixed_featurizer(3, n_out, seed)
        return cls(weight=w, bias=b, downsample=downsample)

    @property
    def channels(self) -> int:
        return self.weight.shape[1]

    def embed(self, pixel_channels: np.ndarray) -> np.ndarray:
        return np.maximum(pixel_channels @ self.weight + self.bias, 0.0)


@dataclass
class FeaturePointCloud:
    points: np.ndarray  # (N, 3) vehicle frame
    features: np.ndarray  # (N, C)
    weights: np.ndarray  # (N,)


@dataclass
class BevFeatureGrid:
    """Multi-channel feature grid on the short-range spec: camera channels,
    pillar channels, then rescaled raw elevation and its validity."""

    features: np.ndarray  # (cells, cells, C) float32
    channel_names: list
    spec: RangeSpec
    origin: Pose2p5
    timestamp: float = 0.0

    @property
    def channels(self) -> int:
        return self.features.shape[2]


def lift(image, camera: CameraModel, binning: DepthBinning, depth_mode: str, feature_spec: PixelFeatureSpec) -> FeaturePointCloud:
    """Lift per-pixel features along camera rays into the vehicle frame.

    depth_mode "oracle" places each pixel's unit weight in the bin holding
    its true depth; "uniform" spreads 1/count over every bin.
    """
    if (image.height, image.width) != (camera.height, camera.width):
        raise ValueError(
            f"image {image.height}x{image.width} does not match camera {camera.height}x{camera.width}"
        )
    if depth_mode not in ("oracle", "uniform"):
        raise ValueError(f"unknown depth mode {depth_mode!r}")
    f = feature_spec.downsample
    vs = np.arange(f // 2, image.height, f)
    us = np.arange(f // 2, image.width, f)
    uu, vv = np.meshgrid(us, vs, indexing="xy")
    uu = uu.reshape(-1)
    vv = vv.reshape(-1)
    feats = feature_spec.embed(image.channels[vv, uu])  # (P, C)
    depth = image.depth[vv, uu]
    hit = image.hit[vv, uu]

    centers = binning.centers
    if depth_mode == "oracle":
        bins = binning.bin_of(depth)
        keep = hit & (bins >= 0)
        uu, vv, feats = uu[keep], vv[keep], feats[keep]
        d = centers[bins[keep]]
        weights = np.ones(d.shape[0])
    else:
        p = uu.shape[0]
        uu = np.repeat(uu, binning.count)
        vv = np.repeat(vv, binning.count)
        feats = np.repeat(feats, binning.count, axis=0)
        d = np.tile(centers, p)
        weights = np.full(uu.shape[0], 1.0 / binning.count)

    xc = (uu - camera.cx) / camera.fx * d
    yc = (vv - camera.cy) / camera.fy * d
    cam_points = np.column_stack([xc, yc, d])
    points = cam_points @ np.asarray(camera.rotation).T + np.asarray(camera.translation)
    return FeaturePointCloud(points=points, features=feats, weights=weights)


def splat(cloud: FeaturePointCloud, spec: RangeSpec = SHORT):
    """Sum weighted features into their grid cells (vehicle-frame points).

    Returns (channels, weight_grid); out-of-range points are dropped and the
    weight grid allows exact mass-conservation checks.
    """
    n = spec.cells
    half = spec.extent_m / 2.0
    ij = np.floor((cloud.points[:, :2] + half) / spec.resolution_m).astype(np.int64)
    inb = (ij[:, 0] >= 0) & (ij[:, 0] < n) & (ij[:, 1] >= 0) & (ij[:, 1] < n)
    c = cloud.features.shape[1]
    channels = np.zeros((n * n, c))
    wgrid = np.zeros(n * n)
    flat = ij[inb, 0] * n + ij[inb, 1]
    w = cloud.weights[inb]
    np.add.at(channels, flat, cloud.features[inb] * w[:, None])
    np.add.at(wgrid, flat, w)
    return channels.reshape(n, n, c), wgrid.reshape(n, n)


PILLAR_POINT_FEATURES = 9


def pillar_point_vectors(pillar, spec: RangeSpec) -> np.ndarray:
    """Per-point 9-vector: xyz, offsets to the pillar point mean, xy offsets
    to the pillar center, and normalized occupancy."""
    pts = pillar.points
    mean = pts.mean(axis=0)
    half = spec.extent_m / 2.0
    px = (pillar.i + 0.5) * spec.resolution_m - half
    py = (pillar.j + 0.5) * spec.resolution_m - half
    count_norm = min(pillar.count, MAX_POINTS_PER_PILLAR) / MAX_POINTS_PER_PILLAR
    out = np.empty((pts.shape[0], PILLAR_POINT_FEATURES))
    out[:, 0:3] = pts
    out[:, 3:6] = pts - mean
    out[:, 6] = pts[:, 0] - px
    out[:, 7] = pts[:, 1] - py
    out[:, 8] = count_norm
    return out


def pillar_features(pillars, weight: np.ndarray, bias: np.ndarray, spec: RangeSpec = SHORT) -> np.ndarray:
    """Shared linear map + ReLU per point, max-pooled per pillar, scattered
    onto the grid. Empty cells stay zero."""
    n = spec.cells
    c = weight.shape[1]
    grid = np.zeros((n, n, c))
    if not pillars:
        return grid
    vectors = np.concatenate([pillar_point_vectors(p, spec) for p in pillars], axis=0)
    rows = np.repeat(np.arange(len(pillars)), [p.points.shape[0] for p in pillars])
    enc = np.maximum(vectors @ weight + bias, 0.0)
    pooled = np.zeros((len(pillars), c))
    np.maximum.at(pooled, rows, enc)
    ii = np.array([p.i for p in pillars])
    jj = np.array([p.j for p in pillars])
    grid[ii, jj] = pooled
    return grid


def fuse(
    camera_channels: Optional[np.ndarray],
    pillar_channels: Optional[np.ndarray],
    raw_elevation_values: np.ndarray,
    raw_elevation_valid: np.ndarray,
    spec: RangeSpec,
    origin: Pose2p5,
    timestamp: float = 0.0,
) -> BevFeatureGrid:
    """Concatenate camera, pillar, and raw-elevation channels.

    The raw-elevation channel is rescaled to +-1 with missing cells set to
    zero; a companion validity channel marks where it is real.
    """
    n = spec.cells
    blocks = []
    names = []
    for prefix, block in (("cam", camera_channels), ("pil", pillar_channels)):
        if block is None:
            continue
        if block.shape[:2] != (n, n):
            raise ValueError(f"{prefix} channels shaped {block.shape} do not match spec {n}")
        blocks.append(block)
        names.extend(f"{prefix}_{k}" for k in range(block.shape[2]))
    if raw_elevation_values.shape != (n, n):
        raise ValueError("raw elevation layer does not match spec")
    raw = np.where(raw_elevation_valid, rescale_elevation(raw_elevation_values), 0.0)
    blocks.append(np.stack([raw, raw_elevation_valid.astype(np.float64)], axis=-1))
    names.extend(["raw_elevation", "raw_elevation_valid"])
    features = np.concatenate(blocks, axis=-1).astype(np.float32)
    return BevFeatureGrid(features=features, channel_names=names, spec=spec, origin=origin, timestamp=timestamp)
