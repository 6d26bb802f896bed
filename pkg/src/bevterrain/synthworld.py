"""Deterministic synthetic world and sensor simulation.

The world is an analytic heightfield (base slope plus Gaussian hills and
valleys) with solid obstacles (vertical tree cylinders and rock boxes).
Because the surface is analytic, it doubles as the oracle for elevation and
risk in the tests. All outputs are pure functions of (config, seed).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .gridmap import GridMap, Pose2p5, RangeSpec, cell_centers

# risk heuristic constants, shared with the voxel-map risk layer
RISK_W_SLOPE = 0.5
RISK_W_OBSTACLE = 1.0
RISK_W_ROUGH = 0.3
RISK_SLOPE_MAX = math.tan(math.radians(30.0))
RISK_ROUGH_MAX = 0.3


@dataclass(frozen=True)
class Hill:
    amp: float
    cx: float
    cy: float
    sigma: float


@dataclass(frozen=True)
class Cylinder:
    """Tree stand-in: vertical solid cylinder rooted on the terrain."""

    cx: float
    cy: float
    radius: float
    height: float
    base_z: float


@dataclass(frozen=True)
class Box:
    """Rock stand-in: axis-aligned solid box rooted on the terrain."""

    cx: float
    cy: float
    size_x: float
    size_y: float
    height: float
    base_z: float


@dataclass
class World:
    bounds: tuple  # (xmin, xmax, ymin, ymax)
    base_slope: tuple = (0.0, 0.0)
    hills: list = field(default_factory=list)
    cylinders: list = field(default_factory=list)
    boxes: list = field(default_factory=list)
    seed: int = 0

    def height(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        z = self.base_slope[0] * x + self.base_slope[1] * y
        for h in self.hills:
            z = z + h.amp * np.exp(-((x - h.cx) ** 2 + (y - h.cy) ** 2) / (2.0 * h.sigma**2))
        return z

    def height_gradient(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        gx = np.full(np.broadcast(x, y).shape, self.base_slope[0])
        gy = np.full(np.broadcast(x, y).shape, self.base_slope[1])
        for h in self.hills:
            g = h.amp * np.exp(-((x - h.cx) ** 2 + (y - h.cy) ** 2) / (2.0 * h.sigma**2))
            gx = gx - g * (x - h.cx) / h.sigma**2
            gy = gy - g * (y - h.cy) / h.sigma**2
        return gx, gy

    def height_bounds(self):
        """Conservative global (z_lo, z_hi) over the world bounds."""
        xmin, xmax, ymin, ymax = self.bounds
        corners = [
            self.base_slope[0] * x + self.base_slope[1] * y
            for x in (xmin, xmax)
            for y in (ymin, ymax)
        ]
        pos = sum(max(h.amp, 0.0) for h in self.hills)
        neg = sum(min(h.amp, 0.0) for h in self.hills)
        return min(corners) + neg, max(corners) + pos

    def max_gradient_bound(self):
        g = math.hypot(*self.base_slope)
        g += sum(abs(h.amp) * math.exp(-0.5) / h.sigma for h in self.hills)
        return g

    def obstacle_mask(self, x, y):
        """True where (x, y) lies inside an obstacle footprint."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        inside = np.zeros(np.broadcast(x, y).shape, dtype=bool)
        for c in self.cylinders:
            inside |= (x - c.cx) ** 2 + (y - c.cy) ** 2 <= c.radius**2
        for b in self.boxes:
            inside |= (np.abs(x - b.cx) <= b.size_x / 2.0) & (np.abs(y - b.cy) <= b.size_y / 2.0)
        return inside

    def in_bounds(self, x, y):
        xmin, xmax, ymin, ymax = self.bounds
        x = np.asarray(x)
        y = np.asarray(y)
        return (x >= xmin) & (x <= xmax) & (y >= ymin) & (y <= ymax)


@dataclass
class WorldConfig:
    bounds: tuple = (-150.0, 150.0, -150.0, 150.0)
    seed: int = 0
    base_slope_x: float = 0.0
    base_slope_y: float = 0.0
    n_hills: int = 6
    hill_amp_min: float = -4.0
    hill_amp_max: float = 6.0
    hill_sigma_min: float = 12.0
    hill_sigma_max: float = 35.0
    n_trees: int = 12
    tree_radius_min: float = 0.3
    tree_radius_max: float = 0.8
    tree_height_min: float = 3.0
    tree_height_max: float = 8.0
    n_rocks: int = 6
    rock_size_min: float = 0.6
    rock_size_max: float = 2.0
    rock_height_min: float = 0.3
    rock_height_max: float = 1.2
    # obstacles are kept out of this corridor so trajectories stay drivable
    clear_corridor: Optional[tuple] = None  # (x0, y0, x1, y1, half_width)


def _corridor_distance(x, y, corridor):
    x0, y0, x1, y1, _ = corridor
    dx, dy = x1 - x0, y1 - y0
    L2 = dx * dx + dy * dy
    if L2 == 0.0:
        return math.hypot(x - x0, y - y0)
    t = max(0.0, min(1.0, ((x - x0) * dx + (y - y0) * dy) / L2))
    return math.hypot(x - (x0 + t * dx), y - (y0 + t * dy))


def generate_world(config: WorldConfig) -> World:
    """Build a world from the config; identical seeds give identical worlds."""
    xmin, xmax, ymin, ymax = config.bounds
    if xmax <= xmin or ymax <= ymin:
        raise ValueError(f"invalid bounds {config.bounds}")
    rng = np.random.default_rng(config.seed)
    world = World(bounds=tuple(config.bounds), base_slope=(config.base_slope_x, config.base_slope_y), seed=config.seed)
    for _ in range(config.n_hills):
        world.hills.append(
            Hill(
                amp=rng.uniform(config.hill_amp_min, config.hill_amp_max),
                cx=rng.uniform(xmin, xmax),
                cy=rng.uniform(ymin, ymax),
                sigma=rng.uniform(config.hill_sigma_min, config.hill_sigma_max),
            )
        )

    def place(margin):
        for _ in range(64):
            x = rng.uniform(xmin + margin, xmax - margin)
            y = rng.uniform(ymin + margin, ymax - margin)
            if config.clear_corridor is None:
                return x, y
            if _corridor_distance(x, y, config.clear_corridor) > config.clear_corridor[4] + margin:
                return x, y
        return x, y

    for _ in range(config.n_trees):
        r = rng.uniform(config.tree_radius_min, config.tree_radius_max)
        h = rng.uniform(config.tree_height_min, config.tree_height_max)
        x, y = place(r)
        world.cylinders.append(Cylinder(x, y, r, h, base_z=float(world.height(x, y))))
    for _ in range(config.n_rocks):
        sx = rng.uniform(config.rock_size_min, config.rock_size_max)
        sy = rng.uniform(config.rock_size_min, config.rock_size_max)
        h = rng.uniform(config.rock_height_min, config.rock_height_max)
        x, y = place(max(sx, sy) / 2.0)
        world.boxes.append(Box(x, y, sx, sy, h, base_z=float(world.height(x, y))))
    return world


@dataclass
class Trajectory:
    times: np.ndarray  # strictly increasing seconds
    poses: list  # Pose2p5 per timestamp, z on the terrain surface

    def __len__(self):
        return len(self.poses)

    def travel(self) -> np.ndarray:
        """Cumulative driven distance at each pose."""
        xy = np.array([[p.x, p.y] for p in self.poses])
        d = np.zeros(len(self.poses))
        if len(self.poses) > 1:
            d[1:] = np.cumsum(np.linalg.norm(np.diff(xy, axis=0), axis=1))
        return d


def generate_trajectory(
    world: World,
    start_xy,
    end_xy,
    speed: float = 6.0,
    dt: float = 1.0,
    v_max: float = 12.0,
    sway_amp: float = 0.0,
) -> Trajectory:
    """Constant-speed drive from start to end with an optional lateral sway."""
    start = np.asarray(start_xy, dtype=np.float64)
    end = np.asarray(end_xy, dtype=np.float64)
    length = float(np.linalg.norm(end - start))
    if length == 0.0:
        raise ValueError("degenerate trajectory: start == end")
    # the sway adds lateral velocity; cap the total speed at v_max
    sway_factor = math.sqrt(1.0 + (sway_amp * 2.0 * math.pi / length) ** 2)
    speed = min(speed, v_max / sway_factor)
    u = (end - start) / length
    n = np.array([-u[1], u[0]])
    steps = max(2, int(math.floor(length / (speed * dt))) + 1)
    times = np.arange(steps) * dt
    poses = []
    for t in times:
        s = min(t * speed, length)
        off = sway_amp * math.sin(2.0 * math.pi * s / length) if sway_amp else 0.0
        p = start + u * s + n * off
        doff = sway_amp * math.cos(2.0 * math.pi * s / length) * 2.0 * math.pi / length if sway_amp else 0.0
        heading = math.atan2(u[1] + n[1] * doff, u[0] + n[0] * doff)
        poses.append(Pose2p5(float(p[0]), float(p[1]), float(world.height(p[0], p[1])), heading))
    return Trajectory(times=times, poses=poses)


@dataclass(frozen=True)
class LidarModel:
    rings: int = 32
    elevation_min_deg: float = -25.0
    elevation_max_deg: float = 15.0
    azimuth_steps: int = 360
    max_range: float = 120.0
    step: float = 0.05
    mount_height: float = 2.0
    rate_hz: float = 10.0


@dataclass
class SimScan:
    points: np.ndarray  # (N, 3) xyz in the sensor frame
    ranges: np.ndarray  # (N,)
    sensor_pose: Pose2p5
    timestamp: float


@dataclass
class SimImage:
    """Ideal pinhole render: per-pixel depth plus geometric feature channels
    (surface normal z, obstacle flag, height above local ground)."""

    depth: np.ndarray  # (H, W), z-depth in the camera frame, 0 where no hit
    channels: np.ndarray  # (H, W, 3)
    hit: np.ndarray  # (H, W) bool
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    timestamp: float = 0.0

    CHANNEL_NAMES = ("normal_z", "obstacle", "height_above_ground")


HIT_NONE, HIT_TERRAIN, HIT_OBSTACLE = 0, 1, 2


def _obstacle_intervals(world: World, origins, dirs, max_range):
    """Earliest solid-obstacle entry per ray via interval intersection.

    Returns (t_obs, obs_kind, obs_index); t_obs = inf where no obstacle hit.
    """
    n = origins.shape[0]
    t_obs = np.full(n, np.inf)
    idx = np.full(n, -1, dtype=np.int32)
    eps = 1e-12

    def z_interval(zb, zt):
        dz = dirs[:, 2]
        oz = origins[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (zb - oz) / dz
            tb = (zt - oz) / dz
        lo = np.minimum(ta, tb)
        hi = np.maximum(ta, tb)
        flat = np.abs(dz) < eps
        inside = (oz >= zb) & (oz <= zt)
        lo = np.where(flat, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(flat, np.where(inside, np.inf, -np.inf), hi)
        return lo, hi

    for k, c in enumerate(world.cylinders):
        ox = origins[:, 0] - c.cx
        oy = origins[:, 1] - c.cy
        dx = dirs[:, 0]
        dy = dirs[:, 1]
        a = dx * dx + dy * dy
        b = 2.0 * (ox * dx + oy * dy)
        q = ox * ox + oy * oy - c.radius**2
        disc = b * b - 4.0 * a * q
        ok = disc >= 0.0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-b - sq) / (2.0 * a)
            t2 = (-b + sq) / (2.0 * a)
        vertical = a < eps
        inside_xy = q <= 0.0
        lo = np.where(vertical, np.where(inside_xy, -np.inf, np.inf), np.where(ok, t1, np.inf))
        hi = np.where(vertical, np.where(inside_xy, np.inf, -np.inf), np.where(ok, t2, -np.inf))
        zlo, zhi = z_interval(c.base_z, c.base_z + c.height)
        entry = np.maximum.reduce([lo, zlo, np.zeros(n)])
        exit_ = np.minimum.reduce([hi, zhi, np.full(n, max_range)])
        hit = entry <= exit_
        better = hit & (entry < t_obs)
        t_obs = np.where(better, entry, t_obs)
        idx = np.where(better, k, idx)

    n_cyl = len(world.cylinders)
    for k, bx in enumerate(world.boxes):
        lo = np.zeros(n)
        hi = np.full(n, max_range)
        for axis, (center, half) in enumerate(
            [(bx.cx, bx.size_x / 2.0), (bx.cy, bx.size_y / 2.0)]
        ):
            o = origins[:, axis]
            d = dirs[:, axis]
            with np.errstate(divide="ignore", invalid="ignore"):
                ta = (center - half - o) / d
                tb = (center + half - o) / d
            alo = np.minimum(ta, tb)
            ahi = np.maximum(ta, tb)
            flat = np.abs(d) < eps
            inside = np.abs(o - center) <= half
            alo = np.where(flat, np.where(inside, -np.inf, np.inf), alo)
            ahi = np.where(flat, np.where(inside, np.inf, -np.inf), ahi)
            lo = np.maximum(lo, alo)
            hi = np.minimum(hi, ahi)
        zlo, zhi = z_interval(bx.base_z, bx.base_z + bx.height)
        lo = np.maximum(lo, zlo)
        hi = np.minimum(hi, zhi)
        hit = lo <= hi
        better = hit & (lo < t_obs)
        t_obs = np.where(better, lo, t_obs)
        idx = np.where(better, n_cyl + k, idx)
    return t_obs, idx


def raycast(world: World, origins, dirs, max_range: float, step: float = 0.05):
    """First surface hit along each unit-direction ray.

    Terrain is found by a guarded coarse march refined with bisection to well
    under `step`; obstacles are intersected analytically. Returns
    (t, kind, obstacle_index) with t = inf and kind = HIT_NONE for misses.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = origins.shape[0]
    t_obs, obs_idx = _obstacle_intervals(world, origins, dirs, max_range)

    z_lo, z_hi = world.height_bounds()
    lipschitz = 1.0 + world.max_gradient_bound()
    coarse = max(step * 8.0, step)
    guard = 0.5 * lipschitz * coarse + 1e-9
    fine_k = max(int(round(coarse / step)), 1)

    t_stop = np.minimum(np.full(n, max_range), t_obs)
    dz = dirs[:, 2]
    oz = origins[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        up_limit = np.where(dz > 0, (z_hi - oz) / dz, np.inf)
        down_limit = np.where(dz < 0, (z_lo - oz) / dz + coarse, np.inf)
    t_stop = np.minimum(t_stop, np.maximum(up_limit, 0.0))
    t_stop = np.minimum(t_stop, np.maximum(down_limit, 0.0))

    t_ter = np.full(n, np.inf)
    active = np.where(t_stop > 0.0)[0]
    if active.size:
        f_prev = origins[active, 2] - world.height(origins[active, 0], origins[active, 1])
        hit0 = f_prev <= 0.0
        t_ter[active[hit0]] = 0.0
        keep = ~hit0
        active = active[keep]
        f_prev = f_prev[keep]
        t_cur = np.zeros(active.size)
        while active.size:
            t_new = t_cur + coarse
            pos = origins[active] + dirs[active] * t_new[:, None]
            f_new = pos[:, 2] - world.height(pos[:, 0], pos[:, 1])
            flag = np.minimum(f_prev, f_new) <= guard
            if np.any(flag):
                rows = np.where(flag)[0]
                sub = active[rows]
                taus = t_cur[rows, None] + np.arange(1, fine_k + 1) * step
                p = origins[sub, None, :] + dirs[sub, None, :] * taus[:, :, None]
                fsub = p[:, :, 2] - world.height(p[:, :, 0], p[:, :, 1])
                below = fsub <= 0.0
                has = below.any(axis=1)
                first = np.where(has, below.argmax(axis=1), 0)
                if np.any(has):
                    hrows = np.where(has)[0]
                    lo = np.where(first[hrows] == 0, t_cur[rows[hrows]], taus[hrows, first[hrows] - 1])
                    hi = taus[hrows, first[hrows]]
                    ray = sub[hrows]
                    for _ in range(8):
                        mid = 0.5 * (lo + hi)
                        pm = origins[ray] + dirs[ray] * mid[:, None]
                        fm = pm[:, 2] - world.height(pm[:, 0], pm[:, 1])
                        above = fm > 0.0
                        lo = np.where(above, mid, lo)
                        hi = np.where(above, hi, mid)
                    t_ter[ray] = 0.5 * (lo + hi)
            done = ~np.isinf(t_ter[active]) | (t_new >= t_stop[active])
            keep = ~done
            active = active[keep]
            f_prev = f_new[keep]
            t_cur = t_new[keep]

    t = np.minimum(t_ter, t_obs)
    kind = np.full(n, HIT_NONE, dtype=np.int8)
    kind[t_obs < t_ter] = HIT_OBSTACLE
    kind[t_ter <= t_obs] = HIT_TERRAIN
    kind[~np.isfinite(t)] = HIT_NONE
    obs_idx = np.where(kind == HIT_OBSTACLE, obs_idx, -1)
    return t, kind, obs_idx


def _sensor_frame(pose: Pose2p5, mount_height: float):
    origin = np.array([pose.x, pose.y, pose.z + mount_height])
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return origin, rot


def simulate_scan(world: World, pose: Pose2p5, lidar: LidarModel = LidarModel(), timestamp: float = 0.0) -> SimScan:
    """Spin one scan: rings x azimuths rays, first hit per ray, no-hit rays omitted."""
    origin, rot = _sensor_frame(pose, lidar.mount_height)
    if origin[2] <= world.height(origin[0], origin[1]):
        raise ValueError("sensor pose below terrain")
    elev = np.radians(np.linspace(lidar.elevation_min_deg, lidar.elevation_max_deg, lidar.rings))
    azim = np.arange(lidar.azimuth_steps) * (2.0 * math.pi / lidar.azimuth_steps)
    ee, aa = np.meshgrid(elev, azim, indexing="ij")
    dirs_sensor = np.stack(
        [np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)], axis=-1
    ).reshape(-1, 3)
    dirs_world = dirs_sensor @ rot.T
    origins = np.broadcast_to(origin, dirs_world.shape)
    t, kind, _ = raycast(world, origins, dirs_world, lidar.max_range, lidar.step)
    hit = kind != HIT_NONE
    sensor_pose = Pose2p5(pose.x, pose.y, pose.z + lidar.mount_height, pose.yaw)
    return SimScan(
        points=dirs_sensor[hit] * t[hit, None],
        ranges=t[hit],
        sensor_pose=sensor_pose,
        timestamp=timestamp,
    )


def scan_points_world(scan: SimScan) -> np.ndarray:
    """Scan points transformed from the sensor frame into the world frame."""
    p = scan.sensor_pose
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return scan.points @ rot.T + np.array([p.x, p.y, p.z])


def camera_mount(yaw: float, pitch: float, position) -> tuple:
    """Camera-to-vehicle rotation and translation for a yaw/pitch mount.

    Camera frame: z optical axis, x right, y down. Positive pitch tips the
    axis toward the ground.
    """
    base = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    return rz @ ry @ base, np.asarray(position, dtype=np.float64)


def simulate_image(world: World, pose: Pose2p5, camera, timestamp: float = 0.0) -> SimImage:
    """Render one ideal pinhole frame from a CameraModel-style mount."""
    w, h = camera.width, camera.height
    u = np.arange(w, dtype=np.float64)
    v = np.arange(h, dtype=np.float64)
    uu, vv = np.meshgrid(u, v, indexing="xy")
    dir_cam = np.stack(
        [(uu - camera.cx) / camera.fx, (vv - camera.cy) / camera.fy, np.ones_like(uu)], axis=-1
    ).reshape(-1, 3)
    norms = np.linalg.norm(dir_cam, axis=1)
    unit_cam = dir_cam / norms[:, None]

    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    rot_v = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    rot = rot_v @ camera.rotation
    origin = np.array([pose.x, pose.y, pose.z]) + rot_v @ camera.translation
    dirs = unit_cam @ rot.T
    origins = np.broadcast_to(origin, dirs.shape)
    t, kind, obs_idx = raycast(world, origins, dirs, camera.max_range, camera.ray_step)

    hit = kind != HIT_NONE
    pts = origins + dirs * np.where(hit, t, 0.0)[:, None]
    depth = np.where(hit, t / norms, 0.0)

    normal_z = np.zeros(dirs.shape[0])
    ter = kind == HIT_TERRAIN
    if np.any(ter):
        gx, gy = world.height_gradient(pts[ter, 0], pts[ter, 1])
        normal_z[ter] = 1.0 / np.sqrt(1.0 + gx**2 + gy**2)
    obs = kind == HIT_OBSTACLE
    if np.any(obs):
        solids = list(world.cylinders) + list(world.boxes)
        top_z = np.array([o.base_z + o.height for o in solids])
        tops = np.abs(pts[obs, 2] - top_z[obs_idx[obs]]) < 1e-6
        normal_z[obs] = np.where(tops, 1.0, 0.0)
    above = np.where(hit, pts[:, 2] - world.height(pts[:, 0], pts[:, 1]), 0.0)
    channels = np.stack([normal_z, obs.astype(np.float64), above], axis=-1)
    return SimImage(
        depth=depth.reshape(h, w),
        channels=channels.reshape(h, w, 3),
        hit=hit.reshape(h, w),
        fx=camera.fx,
        fy=camera.fy,
        cx=camera.cx,
        cy=camera.cy,
        width=w,
        height=h,
        timestamp=timestamp,
    )


def _plane_residual_op(offsets):
    x = np.column_stack([np.ones(len(offsets)), offsets[:, 0], offsets[:, 1]])
    return np.eye(len(offsets)) - x @ np.linalg.pinv(x)


_ROUGH_OFFSETS = np.array([(dx, dy) for dx in (-0.3, 0.0, 0.3) for dy in (-0.3, 0.0, 0.3)])
_ROUGH_OP = _plane_residual_op(_ROUGH_OFFSETS)


def roughness(world: World, xy) -> np.ndarray:
    """RMS residual of the surface to a local plane fit over a 0.6 m window."""
    xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    zs = world.height(
        xy[:, 0, None] + _ROUGH_OFFSETS[None, :, 0], xy[:, 1, None] + _ROUGH_OFFSETS[None, :, 1]
    )
    res = zs @ _ROUGH_OP.T
    return np.sqrt(np.mean(res**2, axis=1))


def combine_risk(slope, occupancy, rough):
    """Shared monotone risk heuristic used by both the oracle and voxel maps."""
    raw = (
        RISK_W_SLOPE * np.asarray(slope) / RISK_SLOPE_MAX
        + RISK_W_OBSTACLE * np.asarray(occupancy)
        + RISK_W_ROUGH * np.asarray(rough) / RISK_ROUGH_MAX
    )
    return np.clip(raw, 0.0, 1.0)


def true_risk(world: World, xy) -> np.ndarray:
    """Oracle traversability risk at world xy points (scalar or (N, 2))."""
    xy = np.asarray(xy, dtype=np.float64)
    scalar = xy.ndim == 1
    pts = np.atleast_2d(xy)
    if not np.all(world.in_bounds(pts[:, 0], pts[:, 1])):
        raise ValueError("query outside world bounds")
    gx, gy = world.height_gradient(pts[:, 0], pts[:, 1])
    slope = np.hypot(gx, gy)
    occ = world.obstacle_mask(pts[:, 0], pts[:, 1]).astype(np.float64)
    risk = combine_risk(slope, occ, roughness(world, pts))
    risk = np.where(occ > 0.0, 1.0, risk)
    return float(risk[0]) if scalar else risk


def true_elevation_map(world: World, pose: Pose2p5, spec: RangeSpec, timestamp: float = 0.0) -> GridMap:
    """Oracle elevation sampled at every cell center; confidence 1 everywhere."""
    centers = cell_centers(spec, pose)
    z = world.height(centers[..., 0], centers[..., 1])
    g = GridMap(spec, pose, timestamp)
    g.add_layer("elevation", z)
    g.add_layer("confidence", np.ones_like(z))
    return g


def true_risk_map(world: World, pose: Pose2p5, spec: RangeSpec, timestamp: float = 0.0) -> GridMap:
    """Oracle risk sampled at every cell center."""
    centers = cell_centers(spec, pose).reshape(-1, 2)
    risk = true_risk(world, centers).reshape(spec.cells, spec.cells)
    g = GridMap(spec, pose, timestamp)
    g.add_layer("risk", risk)
    return g
