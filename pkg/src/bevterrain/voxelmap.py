"""Temporal aggregation of LiDAR scans into a vehicle-local voxel map.

The storage frame is world-axis-aligned (translation recentered on the
vehicle, never rotated); yaw enters only when a grid-aligned layer is read
out. Voxels keep incremental point statistics so integration commutes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .gridmap import GridMap, Pose2p5, RangeSpec, world_to_cell_array
from .synthworld import SimScan, combine_risk, scan_points_world

VOXEL_SIZE_M = 0.4
MAP_EXTENT_M = 100.0  # +-100 m xy window around the vehicle
OBSTACLE_HEIGHT_M = 0.5  # column span above ground that counts as an obstacle


@dataclass
class VoxelStats:
    count: int = 0
    sum_x: float = 0.0
    sum_y: float = 0.0
    sum_z: float = 0.0
    min_z: float = math.inf
    max_z: float = -math.inf

    @property
    def centroid(self):
        return (self.sum_x / self.count, self.sum_y / self.count, self.sum_z / self.count)


@dataclass
class VoxelMap:
    voxel_size: float = VOXEL_SIZE_M
    extent: float = MAP_EXTENT_M
    origin: Pose2p5 = Pose2p5(0.0, 0.0)
    voxels: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.voxels)

    def voxel_center(self, key):
        return (np.asarray(key, dtype=np.float64) + 0.5) * self.voxel_size


@dataclass(frozen=True)
class AccumulationPolicy:
    mode: str = "voxel_map"  # "voxel_map" | "last_n_scans"
    n: int = 1
    min_travel_m: float = 2.0
    downsample_voxel_m: float = VOXEL_SIZE_M

    def __post_init__(self):
        if self.mode not in ("voxel_map", "last_n_scans"):
            raise ValueError(f"unknown accumulation mode {self.mode!r}")
        if self.mode == "last_n_scans" and self.n < 1:
            raise ValueError("last_n_scans needs n >= 1")


def integrate_points(vmap: VoxelMap, points_world: np.ndarray, vehicle_pose: Pose2p5) -> VoxelMap:
    """Bin world-frame points into the map and recenter on the vehicle."""
    points_world = np.asarray(points_world, dtype=np.float64).reshape(-1, 3)
    if points_world.size:
        keys = np.floor(points_world / vmap.voxel_size).astype(np.int64)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        m = uniq.shape[0]
        sums = np.zeros((m, 3))
        np.add.at(sums, inv, points_world)
        counts = np.bincount(inv, minlength=m)
        mins = np.full(m, np.inf)
        maxs = np.full(m, -np.inf)
        np.minimum.at(mins, inv, points_world[:, 2])
        np.maximum.at(maxs, inv, points_world[:, 2])
        for r in range(m):
            key = (int(uniq[r, 0]), int(uniq[r, 1]), int(uniq[r, 2]))
            st = vmap.voxels.get(key)
            if st is None:
                st = VoxelStats()
                vmap.voxels[key] = st
            st.count += int(counts[r])
            st.sum_x += sums[r, 0]
            st.sum_y += sums[r, 1]
            st.sum_z += sums[r, 2]
            st.min_z = min(st.min_z, mins[r])
            st.max_z = max(st.max_z, maxs[r])

    vmap.origin = vehicle_pose
    if vmap.voxels:
        keys = np.array(list(vmap.voxels.keys()), dtype=np.int64)
        centers = (keys[:, :2] + 0.5) * vmap.voxel_size
        keep = (np.abs(centers[:, 0] - vehicle_pose.x) <= vmap.extent) & (
            np.abs(centers[:, 1] - vehicle_pose.y) <= vmap.extent
        )
        for key in keys[~keep]:
            del vmap.voxels[(int(key[0]), int(key[1]), int(key[2]))]
    return vmap


def integrate_scan(vmap: VoxelMap, scan: SimScan, vehicle_pose: Pose2p5) -> VoxelMap:
    return integrate_points(vmap, scan_points_world(scan), vehicle_pose)


def voxel_filter(points: np.ndarray, size: float) -> np.ndarray:
    """One centroid point per occupied voxel."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not points.size:
        return points
    keys = np.floor(points / size).astype(np.int64)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    sums = np.zeros((uniq.shape[0], 3))
    np.add.at(sums, inv, points)
    counts = np.bincount(inv, minlength=uniq.shape[0])
    return sums / counts[:, None]


def select_spaced_scans(scans, policy: AccumulationPolicy):
    """Most recent scan plus older ones spaced more than min_travel_m apart,
    newest first, up to policy.n scans."""
    if not scans:
        raise ValueError("no scans to accumulate")
    xy = np.array([[s.sensor_pose.x, s.sensor_pose.y] for s in scans])
    travel = np.zeros(len(scans))
    if len(scans) > 1:
        travel[1:] = np.cumsum(np.linalg.norm(np.diff(xy, axis=0), axis=1))
    picked = [len(scans) - 1]
    for i in range(len(scans) - 2, -1, -1):
        if len(picked) >= policy.n:
            break
        if travel[picked[-1]] - travel[i] > policy.min_travel_m:
            picked.append(i)
    return [scans[i] for i in picked]


def accumulate_scans(scans, policy: AccumulationPolicy) -> np.ndarray:
    """Merge the selected scans in the world frame and voxel-filter them."""
    picked = select_spaced_scans(scans, policy)
    merged = np.concatenate([scan_points_world(s) for s in picked], axis=0)
    return voxel_filter(merged, policy.downsample_voxel_m)


def map_from_scans(scans, policy: AccumulationPolicy, vehicle_pose=None) -> VoxelMap:
    """Build a voxel map per the accumulation policy.

    voxel_map mode integrates every scan in order (full temporal
    aggregation); last_n_scans integrates only the filtered accumulation.
    """
    if not scans:
        raise ValueError("no scans to accumulate")
    if vehicle_pose is None:
        sp = scans[-1].sensor_pose
        vehicle_pose = Pose2p5(sp.x, sp.y, sp.z, sp.yaw)
    vmap = VoxelMap()
    if policy.mode == "voxel_map":
        for scan in scans:
            sp = scan.sensor_pose
            integrate_scan(vmap, scan, Pose2p5(sp.x, sp.y, sp.z, sp.yaw))
        integrate_points(vmap, np.zeros((0, 3)), vehicle_pose)
    else:
        integrate_points(vmap, accumulate_scans(scans, policy), vehicle_pose)
    return vmap


# sample offsets covering a voxel footprint (corners, edge midpoints, center),
# shrunk so exactly-aligned voxel edges do not bleed into neighbouring cells
_FOOT = np.array([(dx, dy) for dx in (-1.0, 0.0, 1.0) for dy in (-1.0, 0.0, 1.0)])


def _column_aggregates(vmap: VoxelMap, spec: RangeSpec, origin: Pose2p5):
    """Per-cell (min over min_z, max over max_z, min over max_z, point count)
    of all voxels whose xy footprint intersects the cell."""
    n = spec.cells
    ground = np.full((n, n), np.inf)
    top = np.full((n, n), -np.inf)
    low_top = np.full((n, n), np.inf)
    count = np.zeros((n, n))
    if vmap.voxels:
        keys = np.array(list(vmap.voxels.keys()), dtype=np.int64)
        stats = list(vmap.voxels.values())
        min_z = np.array([s.min_z for s in stats])
        max_z = np.array([s.max_z for s in stats])
        cnt = np.array([s.count for s in stats], dtype=np.float64)
        centers = (keys[:, :2] + 0.5) * vmap.voxel_size
        half = vmap.voxel_size / 2.0 - 1e-6
        k = keys.shape[0]
        pts = (centers[:, None, :] + _FOOT[None, :, :] * half).reshape(-1, 2)
        ij, inb = world_to_cell_array(pts, origin, spec)
        flat = np.where(inb, ij[:, 0] * n + ij[:, 1], -1).reshape(k, len(_FOOT))
        flat.sort(axis=1)
        fresh = np.ones_like(flat, dtype=bool)
        fresh[:, 1:] = flat[:, 1:] != flat[:, :-1]
        fresh &= flat >= 0
        rows, _ = np.nonzero(fresh)
        f = flat[fresh]
        np.minimum.at(ground.reshape(-1), f, min_z[rows])
        np.maximum.at(top.reshape(-1), f, max_z[rows])
        np.minimum.at(low_top.reshape(-1), f, max_z[rows])
        np.add.at(count.reshape(-1), f, cnt[rows])
    return ground, top, low_top, count


def raw_elevation(vmap: VoxelMap, spec: RangeSpec, origin: Pose2p5):
    """Height of the lowest occupied voxel per cell; (values, valid)."""
    ground, _, _, _ = _column_aggregates(vmap, spec, origin)
    valid = np.isfinite(ground)
    return np.where(valid, ground, 0.0), valid


@dataclass
class Pillar:
    i: int
    j: int
    points: np.ndarray  # (m, 3) voxel centroids in the vehicle frame
    count: int  # occupancy before truncation


MAX_POINTS_PER_PILLAR = 16
MAX_PILLARS_TEST = 64000
MAX_PILLARS_TRAIN = 32000


def revoxelize_pillars(
    vmap: VoxelMap,
    origin: Pose2p5,
    spec: RangeSpec,
    max_points_per_pillar: int = MAX_POINTS_PER_PILLAR,
    max_pillars: int = MAX_PILLARS_TEST,
):
    """Group voxel centroids into grid-aligned pillars.

    Keeps the lowest points by z per pillar (ties broken by (x, y, z)) and
    the densest pillars overall.
    """
    if not vmap.voxels:
        raise ValueError("empty voxel map")
    cents = np.array([s.centroid for s in vmap.voxels.values()])
    ij, inb = world_to_cell_array(cents[:, :2], origin, spec)
    cents = cents[inb]
    ij = ij[inb]
    # rotate centroids into the vehicle frame for the feature encoder
    c, s = math.cos(origin.yaw), math.sin(origin.yaw)
    dx = cents[:, 0] - origin.x
    dy = cents[:, 1] - origin.y
    local = np.column_stack([c * dx + s * dy, -s * dx + c * dy, cents[:, 2]])

    n = spec.cells
    flat = ij[:, 0] * n + ij[:, 1]
    order = np.lexsort((local[:, 1], local[:, 0], local[:, 2], flat))
    flat = flat[order]
    local = local[order]
    starts = np.flatnonzero(np.r_[True, flat[1:] != flat[:-1]])
    ends = np.r_[starts[1:], flat.size]
    pillars = []
    for a, b in zip(starts, ends):
        pts = local[a : min(b, a + max_points_per_pillar)]
        pillars.append(Pillar(int(flat[a] // n), int(flat[a] % n), pts, int(b - a)))
    pillars.sort(key=lambda p: (-p.count, p.i, p.j))
    return pillars[:max_pillars]


def confidence_layer(vmap: VoxelMap, spec: RangeSpec, origin: Pose2p5, vehicle_track) -> np.ndarray:
    """Point density and track proximity folded into [0, 1] per cell."""
    _, _, _, count = _column_aggregates(vmap, spec, origin)
    track = np.asarray(
        [[p.x, p.y] if isinstance(p, Pose2p5) else p[:2] for p in vehicle_track], dtype=np.float64
    )
    n = spec.cells
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    half = spec.extent_m / 2.0
    xl = (ii + 0.5) * spec.resolution_m - half
    yl = (jj + 0.5) * spec.resolution_m - half
    c, s = math.cos(origin.yaw), math.sin(origin.yaw)
    cx = origin.x + c * xl - s * yl
    cy = origin.y + s * xl + c * yl
    d, _ = cKDTree(track).query(np.column_stack([cx.reshape(-1), cy.reshape(-1)]))
    d = d.reshape(n, n)
    conf = (1.0 - np.exp(-count / 5.0)) * np.exp(-np.maximum(0.0, d - 30.0) / 40.0)
    return np.clip(conf, 0.0, 1.0)


def _masked_slope(values: np.ndarray, valid: np.ndarray, resolution: float) -> np.ndarray:
    """Gradient magnitude from central (or one-sided) differences on valid cells."""
    grads = []
    for axis in range(2):
        v = np.moveaxis(values, axis, 0)
        ok = np.moveaxis(valid, axis, 0)
        g = np.zeros_like(v)
        fwd_ok = np.zeros_like(ok)
        bwd_ok = np.zeros_like(ok)
        fwd_ok[:-1] = ok[1:] & ok[:-1]
        bwd_ok[1:] = ok[:-1] & ok[1:]
        fwd = np.zeros_like(v)
        bwd = np.zeros_like(v)
        fwd[:-1] = v[1:] - v[:-1]
        bwd[1:] = v[1:] - v[:-1]
        both = fwd_ok & bwd_ok
        g[both] = (fwd[both] + bwd[both]) / (2.0 * resolution)
        only_f = fwd_ok & ~bwd_ok
        g[only_f] = fwd[only_f] / resolution
        only_b = bwd_ok & ~fwd_ok
        g[only_b] = bwd[only_b] / resolution
        grads.append(np.moveaxis(g, 0, axis))
    return np.hypot(grads[0], grads[1])


def heuristic_risk_layer(vmap: VoxelMap, spec: RangeSpec, origin: Pose2p5):
    """Observed-cell risk from voxel statistics: slope of the lowest-voxel
    surface, column occupancy above ground, and ground-voxel roughness.
    Same weights as the oracle heuristic; (values, valid)."""
    ground, top, low_top, _ = _column_aggregates(vmap, spec, origin)
    valid = np.isfinite(ground)
    ground = np.where(valid, ground, 0.0)
    slope = _masked_slope(ground, valid, spec.resolution_m)
    occ = (np.where(valid, top, 0.0) - ground > OBSTACLE_HEIGHT_M) & valid
    rough = np.where(valid, low_top, 0.0) - ground
    risk = combine_risk(slope, occ.astype(np.float64), np.clip(rough, 0.0, None))
    return np.where(valid, risk, 0.0), valid


def frame_maps(vmap: VoxelMap, spec: RangeSpec, origin: Pose2p5, vehicle_track, timestamp: float) -> GridMap:
    """One observed-data map (elevation, risk, confidence) for one frame."""
    g = GridMap(spec, origin, timestamp)
    ele, ele_valid = raw_elevation(vmap, spec, origin)
    risk, risk_valid = heuristic_risk_layer(vmap, spec, origin)
    g.add_layer("elevation", ele, ele_valid)
    g.add_layer("risk", risk, risk_valid)
    g.add_layer("confidence", confidence_layer(vmap, spec, origin, vehicle_track))
    return g
