"""Kinematic lattice planner on short-range risk and elevation maps.

Nodes are (cell, heading) with 16 discretized headings; primitives are 4 m
arcs turning at most one heading step. Edges sample a precomputed cost
field (max wheel risk plus mean body risk, inflated conservatively so no
wheel placement at any heading can touch a fatal cell) and are priced as
length * (1 + k_r * mean field cost). Cells without risk data count as
free, which is what gives partial-coverage maps their straight-through
plans.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .gridmap import GridMap, Pose2p5, world_to_cell


@dataclass(frozen=True)
class VehicleFootprint:
    length: float = 3.0
    width: float = 1.6
    wheels: tuple = ((1.2, 0.7), (1.2, -0.7), (-1.2, 0.7), (-1.2, -0.7))

    def __post_init__(self):
        for wx, wy in self.wheels:
            if abs(wx) > self.length / 2 or abs(wy) > self.width / 2:
                raise ValueError("wheel outside the body rectangle")

    @property
    def max_reach(self) -> float:
        corners = math.hypot(self.length / 2, self.width / 2)
        wheels = max(math.hypot(wx, wy) for wx, wy in self.wheels)
        return max(corners, wheels)


@dataclass(frozen=True)
class PlannerConfig:
    headings: int = 16
    primitive_m: float = 4.0
    k_r: float = 10.0
    step_max: float = 0.5
    roll_max: float = math.tan(math.radians(20.0))
    slope_max: float = math.tan(math.radians(25.0))
    v_top: float = 12.0
    fatal_risk_threshold: float = 0.9
    goal_tolerance_m: float = 2.0
    horizon_m: float = 100.0


@dataclass(frozen=True)
class LatticeNode:
    i: int
    j: int
    heading: int

    def __post_init__(self):
        if not 0 <= self.heading < 16:
            raise ValueError("heading index out of range")


@dataclass
class PlanResult:
    waypoints: list  # (x, y, heading_rad, v_max)
    total_cost: float
    feasible: bool  # True when the goal itself was reached


def _local_cells(grid: GridMap, pose: Pose2p5, offsets):
    """Cells under vehicle-frame offsets at a pose; None entries are off-map."""
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    out = []
    for ox, oy in offsets:
        wx = pose.x + c * ox - s * oy
        wy = pose.y + s * ox + c * oy
        out.append(world_to_cell((wx, wy), grid.origin, grid.spec))
    return out


def _body_offsets(footprint: VehicleFootprint, resolution: float):
    xs = np.arange(-footprint.length / 2, footprint.length / 2 + 1e-9, resolution / 2)
    ys = np.arange(-footprint.width / 2, footprint.width / 2 + 1e-9, resolution / 2)
    return [(x, y) for x in xs for y in ys]


def footprint_cost(grid: GridMap, pose: Pose2p5, footprint: VehicleFootprint, config: PlannerConfig):
    """Max wheel risk plus mean body risk at an exact pose.

    Returns (cost, feasible); infeasible when a body cell is fatal or the
    elevation step between adjacent wheels exceeds the limit. Cells without
    risk data count as free.
    """
    if world_to_cell((pose.x, pose.y), grid.origin, grid.spec) is None:
        raise ValueError("pose outside the map")
    risk, risk_ok = grid.layer("risk")

    def cell_risk(c):
        if c is None or not risk_ok[c]:
            return 0.0
        return float(risk[c])

    wheel_cells = _local_cells(grid, pose, footprint.wheels)
    wheel_risk = max(cell_risk(c) for c in wheel_cells)
    body_cells = {c for c in _local_cells(grid, pose, _body_offsets(footprint, grid.spec.resolution_m)) if c}
    if not body_cells:
        raise ValueError("pose outside the map")
    body_risks = [cell_risk(c) for c in body_cells]
    feasible = max(body_risks) < config.fatal_risk_threshold

    if grid.has_layer("elevation") and feasible:
        ele, ele_ok = grid.layer("elevation")
        heights = [float(ele[c]) if c is not None and ele_ok[c] else None for c in wheel_cells]
        order = [0, 1, 3, 2]  # around the rectangle
        for a, b in zip(order, order[1:] + order[:1]):
            if heights[a] is not None and heights[b] is not None:
                if abs(heights[a] - heights[b]) > config.step_max:
                    feasible = False
                    break
    return wheel_risk + float(np.mean(body_risks)), feasible


def slope_speed_limit(grid: GridMap, pose: Pose2p5, footprint: VehicleFootprint = VehicleFootprint(), config: PlannerConfig = PlannerConfig()) -> float:
    """Speed limit from a plane fit under the footprint.

    Longitudinal slope scales speed down linearly; lateral slope beyond the
    roll limit forces a stop.
    """
    ele, ele_ok = grid.layer("elevation")
    cells = {c for c in _local_cells(grid, pose, _body_offsets(footprint, grid.spec.resolution_m)) if c}
    pts = []
    for c in cells:
        if ele_ok[c]:
            pts.append((c[0], c[1], ele[c]))
    if len(pts) < 3:
        raise ValueError("not enough defined elevation under the footprint")
    arr = np.asarray(pts, dtype=np.float64)
    r = grid.spec.resolution_m
    a = np.column_stack([np.ones(len(arr)), arr[:, 0] * r, arr[:, 1] * r])
    coef, *_ = np.linalg.lstsq(a, arr[:, 2], rcond=None)
    gx, gy = coef[1], coef[2]  # gradient in the map frame
    # map frame rows are rotated by origin yaw from world; pose yaw relative
    rel = pose.yaw - grid.origin.yaw
    c, s = math.cos(rel), math.sin(rel)
    g_lon = abs(gx * c + gy * s)
    g_lat = abs(-gx * s + gy * c)
    if g_lat > config.roll_max:
        return 0.0
    return config.v_top * float(np.clip(1.0 - g_lon / config.slope_max, 0.0, 1.0))


def build_cost_fields(grid: GridMap, footprint: VehicleFootprint, config: PlannerConfig):
    """Per-cell traversal cost and blocked mask used by the lattice search.

    cost = max risk within wheel reach + mean risk over a body-sized window;
    blocked = any fatal risk within the footprint's reach (any heading) or a
    local elevation range above the wheel step limit.
    """
    risk, risk_ok = grid.layer("risk")
    risk0 = np.where(risk_ok, risk, 0.0)
    res = grid.spec.resolution_m
    reach = max(1, int(math.ceil(footprint.max_reach / res)))
    yy, xx = np.ogrid[-reach : reach + 1, -reach : reach + 1]
    disk = (xx * xx + yy * yy) * res * res <= footprint.max_reach**2
    body = (
        max(1, int(round(footprint.length / res))),
        max(1, int(round(footprint.width / res))),
    )
    wheel_max = ndimage.maximum_filter(risk0, footprint=disk, mode="constant")
    body_mean = ndimage.uniform_filter(risk0, size=body, mode="constant")
    cost = wheel_max + body_mean
    blocked = ndimage.maximum_filter(risk0 >= config.fatal_risk_threshold, footprint=disk, mode="constant")

    if grid.has_layer("elevation"):
        ele, ele_ok = grid.layer("elevation")
        hi = ndimage.maximum_filter(np.where(ele_ok, ele, -np.inf), footprint=disk, mode="constant", cval=-np.inf)
        lo = ndimage.minimum_filter(np.where(ele_ok, ele, np.inf), footprint=disk, mode="constant", cval=np.inf)
        span = hi - lo
        step_block = np.isfinite(span) & (span > config.step_max)
        blocked = blocked | step_block
    return cost, blocked


def _primitives(config: PlannerConfig, resolution: float):
    """Integer sample-cell offsets, end-cell offset, and heading change per
    (heading, turn). Arcs always start at a cell center, so sample cells are
    fixed integer offsets of the start cell."""
    prims = {}
    n_h = config.headings
    dpsi = 2.0 * math.pi / n_h
    n_samples = max(2, int(math.ceil(config.primitive_m / resolution)))
    ss = np.linspace(config.primitive_m / n_samples, config.primitive_m, n_samples)
    for h in range(n_h):
        psi = h * dpsi
        for turn in (-1, 0, 1):
            dp = turn * dpsi
            if turn == 0:
                xs = ss * math.cos(psi)
                ys = ss * math.sin(psi)
            else:
                radius = config.primitive_m / dp
                ang = psi + ss / config.primitive_m * dp
                xs = radius * (np.sin(ang) - math.sin(psi))
                ys = -radius * (np.cos(ang) - math.cos(psi))
            # cell offsets relative to the start cell (start at its center)
            di = np.floor(0.5 + xs / resolution).astype(np.int64)
            dj = np.floor(0.5 + ys / resolution).astype(np.int64)
            cells = np.unique(np.stack([di, dj], axis=1), axis=0)
            prims[(h, turn)] = {
                "di": cells[:, 0],
                "dj": cells[:, 1],
                "bounds": (int(cells[:, 0].min()), int(cells[:, 0].max()), int(cells[:, 1].min()), int(cells[:, 1].max())),
                "end": (int(di[-1]), int(dj[-1])),
                "heading": (h + turn) % n_h,
            }
    return prims


def plan(
    grid: GridMap,
    start: Pose2p5,
    goal_xy,
    footprint: VehicleFootprint = VehicleFootprint(),
    config: PlannerConfig = PlannerConfig(),
) -> PlanResult:
    """Lowest-cost lattice path toward a goal inside the map.

    The forward search is A* with the admissible straight-line heuristic
    (every edge costs at least its length). Unreachable goals fall back to
    the settled node closest to the goal, a uniform cost-to-go
    straight-line behaviour. Ties break on node index.
    """
    spec = grid.spec
    n = spec.cells
    res = spec.resolution_m
    goal = np.asarray(goal_xy, dtype=np.float64)
    if world_to_cell(goal, grid.origin, spec) is None:
        raise ValueError("goal outside the map")
    cost_field, blocked = build_cost_fields(grid, footprint, config)

    # lattice geometry lives in the map frame
    c0, s0 = math.cos(grid.origin.yaw), math.sin(grid.origin.yaw)
    def to_map(p):
        dx, dy = p[0] - grid.origin.x, p[1] - grid.origin.y
        return np.array([c0 * dx + s0 * dy, -s0 * dx + c0 * dy])

    def to_world(p):
        return np.array(
            [grid.origin.x + c0 * p[0] - s0 * p[1], grid.origin.y + s0 * p[0] + c0 * p[1]]
        )

    start_map = to_map((start.x, start.y))
    goal_map = to_map(goal)
    half = spec.extent_m / 2.0

    def cell_of(p):
        i = int(math.floor((p[0] + half) / res))
        j = int(math.floor((p[1] + half) / res))
        return (i, j) if 0 <= i < n and 0 <= j < n else None

    def center_xy(i, j):
        return (i + 0.5) * res - half, (j + 0.5) * res - half

    start_cell = cell_of(start_map)
    if start_cell is None:
        raise ValueError("start outside the map")
    if blocked[start_cell]:
        raise ValueError("start pose infeasible")
    n_h = config.headings
    rel_yaw = start.yaw - grid.origin.yaw
    start_h = int(round(rel_yaw / (2.0 * math.pi / n_h))) % n_h
    prims = _primitives(config, res)
    for prim in prims.values():
        prim["flat"] = prim["di"] * n + prim["dj"]
    blocked_flat = blocked.reshape(-1)
    cost_flat = cost_field.reshape(-1)
    gx, gy = goal_map
    sx, sy = start_map
    horizon2 = config.horizon_m**2

    def node_id(i, j, h):
        return (i * n + j) * n_h + h

    start_node = (start_cell[0], start_cell[1], start_h)
    dist = {start_node: 0.0}
    parent = {start_node: None}
    h0 = math.hypot(center_xy(*start_cell)[0] - gx, center_xy(*start_cell)[1] - gy)
    heap = [(h0, node_id(*start_node), 0.0, start_node)]
    best_fallback = None
    goal_node = None
    while heap:
        _, _, d, node = heapq.heappop(heap)
        if d > dist.get(node, math.inf):
            continue
        i, j, h = node
        px, py = center_xy(i, j)
        togo = math.hypot(px - gx, py - gy)
        key = (togo, d, node_id(i, j, h))
        if best_fallback is None or key < best_fallback[0]:
            best_fallback = (key, node)
        if togo <= config.goal_tolerance_m:
            goal_node = node
            break
        for turn in (-1, 0, 1):
            prim = prims[(h, turn)]
            ei = i + prim["end"][0]
            ej = j + prim["end"][1]
            if not (0 <= ei < n and 0 <= ej < n):
                continue
            ex, ey = center_xy(ei, ej)
            if (ex - sx) ** 2 + (ey - sy) ** 2 > horizon2:
                continue
            lo_i, hi_i, lo_j, hi_j = prim["bounds"]
            if i + lo_i < 0 or i + hi_i >= n or j + lo_j < 0 or j + hi_j >= n:
                continue
            cells = i * n + j + prim["flat"]
            costs = cost_flat[cells]
            if blocked_flat[cells].any():
                continue
            edge_cost = config.primitive_m * (1.0 + config.k_r * float(costs.mean()))
            nxt = (ei, ej, prim["heading"])
            nd = d + edge_cost
            if nd < dist.get(nxt, math.inf) - 1e-12:
                dist[nxt] = nd
                parent[nxt] = node
                est = nd + math.hypot(ex - gx, ey - gy)
                heapq.heappush(heap, (est, node_id(*nxt), nd, nxt))

    feasible = goal_node is not None
    node = goal_node if feasible else (best_fallback[1] if best_fallback else start_node)
    chain = []
    while node is not None:
        chain.append(node)
        node = parent[node]
    chain.reverse()

    dpsi = 2.0 * math.pi / n_h
    waypoints = []
    for i, j, h in chain:
        w = to_world(center_xy(i, j))
        yaw = h * dpsi + grid.origin.yaw
        pose = Pose2p5(float(w[0]), float(w[1]), 0.0, yaw)
        try:
            v = slope_speed_limit(grid, pose, footprint, config)
        except ValueError:
            v = config.v_top
        waypoints.append((pose.x, pose.y, pose.yaw, v))
    return PlanResult(waypoints=waypoints, total_cost=dist[chain[-1]], feasible=feasible)
