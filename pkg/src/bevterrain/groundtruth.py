"""Pseudo ground truth: hindsight fusion of per-frame observed maps,
ICP-refined DEM inpainting, and the region partition used for evaluation.

Fusion rules per cell: elevation is the mean of all observations,
confidence the maximum, and risk the value from the latest frame whose
cell confidence clears the observed threshold.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import bevproject, voxelmap
from .gridmap import GridMap, MICRO, Pose2p5, RangeSpec, RegionLabel, SHORT, cell_centers, world_to_cell_array
from .losses import OBSERVED_CONFIDENCE_THRESHOLD
from .synthworld import LidarModel, Trajectory, World, simulate_image, simulate_scan

DEFAULT_WINDOW_S = 60.0
FITNESS_THRESHOLD = 0.6
ICP_CORRESPONDENCE_M = 1.0
MIN_OBSERVED_CELLS = 100


class SampleRejected(RuntimeError):
    """DEM registration fitness below the acceptance threshold."""

    def __init__(self, fitness: float):
        super().__init__(f"registration fitness {fitness:.3f} below threshold")
        self.fitness = fitness


@dataclass
class HindsightFrame:
    timestamp: float
    pose: Pose2p5
    maps: dict  # range id -> GridMap with elevation/risk/confidence layers


@dataclass
class HindsightArchive:
    frames: list = field(default_factory=list)
    window_s: float = DEFAULT_WINDOW_S

    def add(self, frame: HindsightFrame) -> None:
        if self.frames and frame.timestamp <= self.frames[-1].timestamp:
            raise ValueError("frames must be time-ordered")
        self.frames.append(frame)

    def in_window(self, query_time: float):
        return [f for f in self.frames if abs(f.timestamp - query_time) <= self.window_s]


def fuse_hindsight(
    archive: HindsightArchive,
    query_pose: Pose2p5,
    spec: RangeSpec,
    query_time: Optional[float] = None,
) -> GridMap:
    """Reproject every in-window frame into the query frame and fuse."""
    frames = archive.frames if query_time is None else archive.in_window(query_time)
    frames = [f for f in frames if spec.id in f.maps]
    if not frames:
        raise ValueError("no frames to fuse")
    n = spec.cells
    ele_sum = np.zeros(n * n)
    ele_cnt = np.zeros(n * n, dtype=np.int64)
    conf = np.full(n * n, -np.inf)
    conf_seen = np.zeros(n * n, dtype=bool)
    risk = np.zeros(n * n)
    risk_seen = np.zeros(n * n, dtype=bool)

    for frame in frames:
        fmap = frame.maps[spec.id]
        centers = cell_centers(fmap.spec, fmap.origin).reshape(-1, 2)
        ij, inb = world_to_cell_array(centers, query_pose, spec)
        flat = ij[:, 0] * n + ij[:, 1]

        ele, ele_valid = fmap.layer("elevation")
        m = inb & ele_valid.reshape(-1)
        np.add.at(ele_sum, flat[m], ele.reshape(-1)[m])
        np.add.at(ele_cnt, flat[m], 1)

        cvals, cvalid = fmap.layer("confidence")
        m = inb & cvalid.reshape(-1)
        np.maximum.at(conf, flat[m], cvals.reshape(-1)[m])
        conf_seen[flat[m]] = True

        if fmap.has_layer("risk"):
            rvals, rvalid = fmap.layer("risk")
            m = inb & rvalid.reshape(-1) & cvalid.reshape(-1) & (
                cvals.reshape(-1) > OBSERVED_CONFIDENCE_THRESHOLD
            )
            # frames are time-ordered, so later writes win per cell
            risk[flat[m]] = rvals.reshape(-1)[m]
            risk_seen[flat[m]] = True

    out = GridMap(spec, query_pose, frames[-1].timestamp)
    ele_valid = ele_cnt > 0
    values = np.zeros(n * n)
    np.divide(ele_sum, ele_cnt, out=values, where=ele_valid)
    out.add_layer("elevation", values.reshape(n, n), ele_valid.reshape(n, n))
    out.add_layer(
        "confidence",
        np.where(conf_seen, conf, 0.0).reshape(n, n),
        conf_seen.reshape(n, n),
    )
    out.add_layer("risk", risk.reshape(n, n), risk_seen.reshape(n, n))
    return out


@dataclass
class DemTile:
    """Regular world-frame elevation raster; values[i, j] sits at
    (origin_x + i * pitch, origin_y + j * pitch)."""

    origin_x: float
    origin_y: float
    pitch: float
    values: np.ndarray

    def bilinear(self, x, y):
        """Bilinear sample; NaN outside the raster."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        gi = (x - self.origin_x) / self.pitch
        gj = (y - self.origin_y) / self.pitch
        ni, nj = self.values.shape
        ok = (gi >= 0) & (gi <= ni - 1) & (gj >= 0) & (gj <= nj - 1)
        gi = np.clip(gi, 0, ni - 1)
        gj = np.clip(gj, 0, nj - 1)
        i0 = np.minimum(np.floor(gi).astype(np.int64), ni - 2)
        j0 = np.minimum(np.floor(gj).astype(np.int64), nj - 2)
        fi = gi - i0
        fj = gj - j0
        v = (
            self.values[i0, j0] * (1 - fi) * (1 - fj)
            + self.values[i0 + 1, j0] * fi * (1 - fj)
            + self.values[i0, j0 + 1] * (1 - fi) * fj
            + self.values[i0 + 1, j0 + 1] * fi * fj
        )
        return np.where(ok, v, np.nan)

    def gradient(self, x, y):
        """Gradient of the bilinear interpolant; NaN outside the raster."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        gi = (x - self.origin_x) / self.pitch
        gj = (y - self.origin_y) / self.pitch
        ni, nj = self.values.shape
        ok = (gi >= 0) & (gi <= ni - 1) & (gj >= 0) & (gj <= nj - 1)
        gi = np.clip(gi, 0, ni - 1)
        gj = np.clip(gj, 0, nj - 1)
        i0 = np.minimum(np.floor(gi).astype(np.int64), ni - 2)
        j0 = np.minimum(np.floor(gj).astype(np.int64), nj - 2)
        fi = gi - i0
        fj = gj - j0
        v00 = self.values[i0, j0]
        v10 = self.values[i0 + 1, j0]
        v01 = self.values[i0, j0 + 1]
        v11 = self.values[i0 + 1, j0 + 1]
        gx = ((v10 - v00) * (1 - fj) + (v11 - v01) * fj) / self.pitch
        gy = ((v01 - v00) * (1 - fi) + (v11 - v10) * fi) / self.pitch
        return np.where(ok, gx, np.nan), np.where(ok, gy, np.nan)

    def sample_points(self, pitch: float, x_lo, x_hi, y_lo, y_hi, with_normals: bool = False):
        """3D surface samples of the bilinear interpolant over a window,
        optionally with unit surface normals."""
        xs = np.arange(x_lo, x_hi + pitch / 2, pitch)
        ys = np.arange(y_lo, y_hi + pitch / 2, pitch)
        xx, yy = np.meshgrid(xs, ys, indexing="ij")
        zz = self.bilinear(xx.reshape(-1), yy.reshape(-1)).reshape(xx.shape)
        ok = np.isfinite(zz)
        pts = np.column_stack([xx[ok], yy[ok], zz[ok]])
        if not with_normals:
            return pts
        zz0 = np.where(ok, zz, 0.0)
        gx, gy = np.gradient(zz0, pitch, pitch)
        normals = np.stack([-gx[ok], -gy[ok], np.ones(int(ok.sum()))], axis=-1)
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        return pts, normals


def make_dem(world: World, pitch: float = 1.0, margin: float = 0.0) -> DemTile:
    """Decimated true heightfield over the world bounds."""
    xmin, xmax, ymin, ymax = world.bounds
    xs = np.arange(xmin - margin, xmax + margin + pitch / 2, pitch)
    ys = np.arange(ymin - margin, ymax + margin + pitch / 2, pitch)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    return DemTile(xs[0], ys[0], pitch, world.height(xx, yy))


@dataclass
class RigidTransform2p5:
    """Yaw about the map origin plus an xyz translation."""

    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0
    yaw: float = 0.0
    fitness: Optional[float] = None
    degenerate: bool = False

    def apply(self, points: np.ndarray, pivot) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        px, py = pivot[0], pivot[1]
        out = points.copy()
        dx = points[:, 0] - px
        dy = points[:, 1] - py
        out[:, 0] = px + c * dx - s * dy + self.tx
        out[:, 1] = py + s * dx + c * dy + self.ty
        out[:, 2] = points[:, 2] + self.tz
        return out

    def magnitude(self):
        return math.sqrt(self.tx**2 + self.ty**2 + self.tz**2), abs(self.yaw)


def compose(second: RigidTransform2p5, first: RigidTransform2p5, pivot) -> RigidTransform2p5:
    """Transform equivalent to applying `first`, then `second` (same pivot)."""
    c, s = math.cos(second.yaw), math.sin(second.yaw)
    tx = c * first.tx - s * first.ty + second.tx
    ty = s * first.tx + c * first.ty + second.ty
    return RigidTransform2p5(tx, ty, first.tz + second.tz, first.yaw + second.yaw)


def observed_points(grid: GridMap):
    """3D world points of confidently observed elevation cells."""
    ele, ele_valid = grid.layer("elevation")
    conf, conf_valid = grid.layer("confidence")
    mask = ele_valid & conf_valid & (conf > OBSERVED_CONFIDENCE_THRESHOLD)
    centers = cell_centers(grid.spec, grid.origin)
    pts = np.column_stack([centers[mask], ele[mask]])
    return pts, mask


def _gradient_covariance(grid: GridMap) -> np.ndarray:
    ele, ele_valid = grid.layer("elevation")
    conf, _ = grid.layer("confidence")
    mask = ele_valid & (conf > OBSERVED_CONFIDENCE_THRESHOLD)
    r = grid.spec.resolution_m
    gx = np.zeros_like(ele)
    gy = np.zeros_like(ele)
    okx = np.zeros_like(mask)
    oky = np.zeros_like(mask)
    okx[1:-1] = mask[2:] & mask[:-2]
    gx[1:-1] = (ele[2:] - ele[:-2]) / (2 * r)
    oky[:, 1:-1] = mask[:, 2:] & mask[:, :-2]
    gy[:, 1:-1] = (ele[:, 2:] - ele[:, :-2]) / (2 * r)
    ok = okx & oky & mask
    if ok.sum() < 3:
        return np.zeros((2, 2))
    g = np.column_stack([gx[ok], gy[ok]])
    return g.T @ g / ok.sum()


def register_dem(
    dem: DemTile,
    fused: GridMap,
    initial: Optional[RigidTransform2p5] = None,
    max_iterations: int = 50,
    correspondence_m: float = ICP_CORRESPONDENCE_M,
    max_points: int = 8000,
) -> RigidTransform2p5:
    """ICP (x, y, z, yaw) from observed cells onto the DEM surface.

    Correspondences are nearest DEM surface samples; each iteration solves
    the 4-DoF point-to-plane least squares (Gauss-Newton step on the
    normal-projected residuals). The correspondence radius anneals from a
    wide capture range down to the final radius; fitness is the in-radius
    fraction after alignment. On gradient-degenerate (flat) terrain the xy
    and yaw components stay at the initial guess, only z is recovered, and
    the result is flagged.
    """
    if initial is None:
        initial = RigidTransform2p5()
    pts, mask = observed_points(fused)
    if pts.shape[0] < MIN_OBSERVED_CELLS:
        raise ValueError(f"only {pts.shape[0]} observed cells, need {MIN_OBSERVED_CELLS}")
    if pts.shape[0] > max_points:
        pts = pts[:: pts.shape[0] // max_points + 1]
    pivot = (fused.origin.x, fused.origin.y)

    margin = 10.0
    target, normals = dem.sample_points(
        dem.pitch / 4.0,
        pts[:, 0].min() - margin,
        pts[:, 0].max() + margin,
        pts[:, 1].min() - margin,
        pts[:, 1].max() + margin,
        with_normals=True,
    )
    tree = cKDTree(target)

    cov = _gradient_covariance(fused)
    eigvals = np.linalg.eigvalsh(cov)
    degenerate = eigvals[0] < 1e-4

    tf = replace(initial, fitness=None, degenerate=degenerate)
    if degenerate:
        moved = tf.apply(pts, pivot)
        dz = dem.bilinear(moved[:, 0], moved[:, 1]) - moved[:, 2]
        dz = dz[np.isfinite(dz)]
        if dz.size:
            tf.tz += float(np.mean(dz))
    else:
        for it in range(max_iterations):
            radius = max(correspondence_m, 6.0 * 0.75**it)
            moved = tf.apply(pts, pivot)
            dist, idx = tree.query(moved, distance_upper_bound=radius)
            ok = np.isfinite(dist)
            if ok.sum() < 10:
                break
            p = moved[ok]
            q = target[idx[ok]]
            n = normals[idx[ok]]
            res = np.einsum("ij,ij->i", n, q - p)
            # columns: dtx, dty, dtz, dyaw (rotation about the pivot)
            arm_x = -(p[:, 1] - pivot[1])
            arm_y = p[:, 0] - pivot[0]
            jac = np.column_stack([n[:, 0], n[:, 1], n[:, 2], n[:, 0] * arm_x + n[:, 1] * arm_y])
            delta, *_ = np.linalg.lstsq(jac, res, rcond=None)
            step = RigidTransform2p5(tx=delta[0], ty=delta[1], tz=delta[2], yaw=delta[3])
            tf = replace(compose(step, tf, pivot), degenerate=degenerate)
            if np.abs(delta).sum() < 1e-4:
                break
        # final refinement against the exact interpolated surface removes
        # the target-sampling quantization of the NN stage
        for _ in range(10):
            moved = tf.apply(pts, pivot)
            z = dem.bilinear(moved[:, 0], moved[:, 1])
            gx, gy = dem.gradient(moved[:, 0], moved[:, 1])
            ok = np.isfinite(z) & (np.abs(z - moved[:, 2]) <= correspondence_m)
            if ok.sum() < 10:
                break
            p = moved[ok]
            n = np.stack([-gx[ok], -gy[ok], np.ones(int(ok.sum()))], axis=-1)
            n /= np.linalg.norm(n, axis=1, keepdims=True)
            res = n[:, 2] * (z[ok] - p[:, 2])
            arm_x = -(p[:, 1] - pivot[1])
            arm_y = p[:, 0] - pivot[0]
            jac = np.column_stack([n[:, 0], n[:, 1], n[:, 2], n[:, 0] * arm_x + n[:, 1] * arm_y])
            delta, *_ = np.linalg.lstsq(jac, res, rcond=None)
            tf = replace(
                compose(RigidTransform2p5(tx=delta[0], ty=delta[1], tz=delta[2], yaw=delta[3]), tf, pivot),
                degenerate=degenerate,
            )
            if np.abs(delta).sum() < 1e-6:
                break

    moved = tf.apply(pts, pivot)
    dist, _ = tree.query(moved, distance_upper_bound=correspondence_m)
    tf.fitness = float(np.isfinite(dist).mean())
    return tf


def fuse_dem(
    fused: GridMap,
    dem: DemTile,
    transform: RigidTransform2p5,
    fitness_threshold: float = FITNESS_THRESHOLD,
) -> GridMap:
    """Fill missing elevation cells from the aligned DEM; observed cells are
    never touched. Raises SampleRejected below the fitness threshold."""
    if transform.fitness is None:
        raise ValueError("transform has no fitness; run register_dem first")
    if transform.fitness < fitness_threshold:
        raise SampleRejected(transform.fitness)
    out = fused.copy()
    ele, ele_valid = out.layer("elevation")
    missing = ~ele_valid
    if np.any(missing):
        centers = cell_centers(out.spec, out.origin)[missing]
        pts = np.column_stack([centers, np.zeros(centers.shape[0])])
        aligned = transform.apply(pts, (out.origin.x, out.origin.y))
        z = dem.bilinear(aligned[:, 0], aligned[:, 1]) - transform.tz
        ok = np.isfinite(z)
        rows = np.where(missing.reshape(-1))[0][ok]
        ele.reshape(-1)[rows] = z[ok]
        ele_valid.reshape(-1)[rows] = True
    return out


def partition_regions(current_conf: np.ndarray, fused_conf: np.ndarray, fused_conf_valid=None) -> np.ndarray:
    """Three-way region labels; the labels tile the whole map."""
    current_conf = np.asarray(current_conf, dtype=np.float64)
    fused = np.asarray(fused_conf, dtype=np.float64)
    if fused_conf_valid is not None:
        fused = np.where(fused_conf_valid, fused, 0.0)
    region = np.full(current_conf.shape, int(RegionLabel.Unobs), dtype=np.int8)
    obs_f = fused > OBSERVED_CONFIDENCE_THRESHOLD
    region[obs_f] = int(RegionLabel.ObsF)
    obs_pc = current_conf > OBSERVED_CONFIDENCE_THRESHOLD
    region[obs_pc] = int(RegionLabel.ObsPC)
    return region


@dataclass
class Sample:
    index: int
    timestamp: float
    pose: Pose2p5
    features: bevproject.BevFeatureGrid
    gt_micro: GridMap
    gt_short: GridMap
    baseline_micro: GridMap  # current-frame observed maps (partial coverage)
    baseline_short: GridMap
    fitness: float
    split: str = "train"


@dataclass
class DatasetConfig:
    stride: int = 1
    window_s: float = DEFAULT_WINDOW_S
    dem_pitch: float = 1.0
    fitness_threshold: float = FITNESS_THRESHOLD
    policy: voxelmap.AccumulationPolicy = field(default_factory=voxelmap.AccumulationPolicy)
    lidar: LidarModel = field(default_factory=LidarModel)
    cam_width: int = 64
    cam_height: int = 48
    cam_pitch: float = 0.15
    cam_downsample: int = 8
    c_img: int = 8
    c_pts: int = 16
    featurizer_seed: int = 7
    depth_mode: str = "oracle"
    max_pillars: int = voxelmap.MAX_PILLARS_TEST
    gnss_offset_xy: float = 0.0  # injected georeference error (uniform +-)
    gnss_offset_z: float = 0.0
    gnss_offset_yaw: float = 0.0
    seed: int = 0
    train_frac: float = 0.8
    short_spec: RangeSpec = SHORT
    micro_spec: RangeSpec = MICRO


def build_features(
    world: World,
    pose: Pose2p5,
    vmap: voxelmap.VoxelMap,
    config: DatasetConfig,
    cameras=None,
    pixel_spec=None,
    pillar_w=None,
    pillar_b=None,
    timestamp: float = 0.0,
) -> bevproject.BevFeatureGrid:
    """Camera lift-splat + pillar encoding + raw elevation for one frame."""
    if cameras is None:
        cameras = bevproject.default_camera_rig(config.cam_width, config.cam_height, pitch=config.cam_pitch)
    if pixel_spec is None:
        pixel_spec = bevproject.PixelFeatureSpec.from_seed(
            config.c_img, config.featurizer_seed, config.cam_downsample
        )
    if pillar_w is None:
        pillar_w, pillar_b = bevproject.fixed_featurizer(
            bevproject.PILLAR_POINT_FEATURES, config.c_pts, config.featurizer_seed + 1
        )
    spec = config.short_spec
    binning = bevproject.DepthBinning()
    n = spec.cells
    cam_channels = np.zeros((n, n, pixel_spec.channels))
    for cam in cameras:
        image = simulate_image(world, pose, cam, timestamp)
        cloud = bevproject.lift(image, cam, binning, config.depth_mode, pixel_spec)
        ch, _ = bevproject.splat(cloud, spec)
        cam_channels += ch
    pillars = voxelmap.revoxelize_pillars(vmap, pose, spec, max_pillars=config.max_pillars)
    pil_channels = bevproject.pillar_features(pillars, pillar_w, pillar_b, spec)
    raw, raw_valid = voxelmap.raw_elevation(vmap, spec, pose)
    return bevproject.fuse(cam_channels, pil_channels, raw, raw_valid, spec, pose, timestamp)


def inject_georeference_error(grid: GridMap, offset: RigidTransform2p5) -> GridMap:
    """Misplace a map's georeference by a rigid offset (simulated GNSS error).

    The cell contents stay vehicle-local; only the origin pose and the
    elevation datum move.
    """
    out = grid.copy()
    out.origin = Pose2p5(
        grid.origin.x + offset.tx,
        grid.origin.y + offset.ty,
        grid.origin.z,
        grid.origin.yaw + offset.yaw,
    )
    if offset.tz and out.has_layer("elevation"):
        out.data["elevation"] = out.data["elevation"] + offset.tz
    return out


def _restore_georeference(grid: GridMap, true_pose: Pose2p5, tz: float) -> GridMap:
    out = grid.copy()
    out.origin = true_pose
    if tz:
        out.data["elevation"] = out.data["elevation"] - tz
    return out


def build_dataset(world: World, trajectory: Trajectory, config: DatasetConfig = DatasetConfig()):
    """Run the full label pipeline over a trajectory.

    Per sampled pose: simulate sensing, aggregate the voxel map, build the
    fused BEV features, fuse the hindsight archive across the time window,
    register and inpaint the DEM (one registration per sample, on the short
    map), and partition regions. Rejected samples are skipped and logged in
    the returned index rows.
    """
    rng = np.random.default_rng(config.seed)
    cameras = bevproject.default_camera_rig(config.cam_width, config.cam_height, pitch=config.cam_pitch)
    pixel_spec = bevproject.PixelFeatureSpec.from_seed(config.c_img, config.featurizer_seed, config.cam_downsample)
    pillar_w, pillar_b = bevproject.fixed_featurizer(
        bevproject.PILLAR_POINT_FEATURES, config.c_pts, config.featurizer_seed + 1
    )
    dem = make_dem(world, config.dem_pitch)
    specs = {"short": config.short_spec, "micro": config.micro_spec}

    # roll the voxel map along the trajectory, archiving per-frame maps
    archive = HindsightArchive(window_s=config.window_s)
    vmap = voxelmap.VoxelMap()
    scans = []
    vmap_snapshots = {}
    sample_ids = list(range(0, len(trajectory), config.stride))
    track = []
    for k, (t, pose) in enumerate(zip(trajectory.times, trajectory.poses)):
        track.append((pose.x, pose.y))
        scan = simulate_scan(world, pose, config.lidar, float(t))
        if config.policy.mode == "voxel_map":
            voxelmap.integrate_scan(vmap, scan, pose)
            frame_vmap = vmap
        else:
            scans.append(scan)
            frame_vmap = voxelmap.map_from_scans(scans, config.policy, pose)
        frame = HindsightFrame(
            timestamp=float(t),
            pose=pose,
            maps={
                rid: voxelmap.frame_maps(frame_vmap, spec, pose, np.array(track), float(t))
                for rid, spec in specs.items()
            },
        )
        archive.add(frame)
        if k in sample_ids:
            if frame_vmap is vmap:
                vmap_snapshots[k] = {key: voxelmap.VoxelStats(**vars(st)) for key, st in vmap.voxels.items()}
            else:
                vmap_snapshots[k] = frame_vmap.voxels

    samples = []
    index_rows = []
    for k in sample_ids:
        t = float(trajectory.times[k])
        pose = trajectory.poses[k]
        snap = voxelmap.VoxelMap(origin=pose, voxels=vmap_snapshots[k])
        features = build_features(
            world, pose, snap, config, cameras, pixel_spec, pillar_w, pillar_b, timestamp=t
        )
        offset = RigidTransform2p5(
            tx=rng.uniform(-config.gnss_offset_xy, config.gnss_offset_xy) if config.gnss_offset_xy else 0.0,
            ty=rng.uniform(-config.gnss_offset_xy, config.gnss_offset_xy) if config.gnss_offset_xy else 0.0,
            tz=rng.uniform(-config.gnss_offset_z, config.gnss_offset_z) if config.gnss_offset_z else 0.0,
            yaw=rng.uniform(-config.gnss_offset_yaw, config.gnss_offset_yaw) if config.gnss_offset_yaw else 0.0,
        )
        fused = {rid: fuse_hindsight(archive, pose, spec, query_time=t) for rid, spec in specs.items()}
        gt = {}
        rejected = False
        try:
            shifted_short = inject_georeference_error(fused["short"], offset)
            tf = register_dem(dem, shifted_short)
            fitness = tf.fitness
            gt["short"] = _restore_georeference(
                fuse_dem(shifted_short, dem, tf, config.fitness_threshold), pose, offset.tz
            )
            shifted_micro = inject_georeference_error(fused["micro"], offset)
            tf_micro = replace(tf, fitness=tf.fitness)
            gt["micro"] = _restore_georeference(
                fuse_dem(shifted_micro, dem, tf_micro, config.fitness_threshold), pose, offset.tz
            )
        except SampleRejected as exc:
            fitness = exc.fitness
            rejected = True
        if not rejected:
            for rid in specs:
                current_conf = archive.frames[k].maps[rid].data["confidence"]
                fused_conf, fused_conf_valid = gt[rid].layer("confidence")
                gt[rid].add_layer(
                    "region",
                    partition_regions(current_conf, fused_conf, fused_conf_valid).astype(np.float64),
                )
        index_rows.append(
            {"index": k, "timestamp": t, "pose": pose, "fitness": fitness, "rejected": rejected}
        )
        if rejected:
            continue
        samples.append(
            Sample(
                index=k,
                timestamp=t,
                pose=pose,
                features=features,
                gt_micro=gt["micro"],
                gt_short=gt["short"],
                baseline_micro=archive.frames[k].maps["micro"],
                baseline_short=archive.frames[k].maps["short"],
                fitness=fitness,
            )
        )

    n_train = int(round(config.train_frac * len(samples)))
    for i, s in enumerate(samples):
        s.split = "train" if i < n_train else "val"
    return samples, index_rows
