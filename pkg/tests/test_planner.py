import heapq
import math

import numpy as np
import pytest

from bevterrain import planner as pl
from bevterrain.gridmap import GridMap, Pose2p5, SHORT, world_to_cell

FOOT = pl.VehicleFootprint()
CONF = pl.PlannerConfig()


def make_map(risk=None, elevation=None, risk_valid=None, ele_valid=None, origin=Pose2p5(0, 0, 0, 0)):
    n = SHORT.cells
    g = GridMap(SHORT, origin)
    if risk is None:
        risk = np.zeros((n, n))
    g.add_layer("risk", risk, risk_valid)
    if elevation is None:
        elevation = np.zeros((n, n))
    g.add_layer("elevation", elevation, ele_valid)
    return g


def disk_mask(grid, cx, cy, radius):
    n = grid.spec.cells
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    half = grid.spec.extent_m / 2
    x = (ii + 0.5) * grid.spec.resolution_m - half
    y = (jj + 0.5) * grid.spec.resolution_m - half
    return (x - cx) ** 2 + (y - cy) ** 2 <= radius**2


def test_footprint_validation():
    with pytest.raises(ValueError):
        pl.VehicleFootprint(length=2.0, width=1.0, wheels=((2.0, 0.0),) * 4)


def test_footprint_cost_flat_map():
    grid = make_map()
    cost, feasible = pl.footprint_cost(grid, Pose2p5(0, 0, 0, 0.3), FOOT, CONF)
    assert cost == 0.0
    assert feasible


def test_footprint_cost_fatal_wheel():
    n = SHORT.cells
    risk = np.zeros((n, n))
    risk[disk_mask(make_map(), 0, 0, 3.0)] = 1.0
    grid = make_map(risk)
    cost, feasible = pl.footprint_cost(grid, Pose2p5(0, 0, 0, 0), FOOT, CONF)
    assert not feasible


def test_footprint_cost_formula():
    # a single hot wheel cell: cost = max wheel + mean body
    grid = make_map()
    risk, _ = grid.layer("risk")
    pose = Pose2p5(0, 0, 0, 0)
    wheel_cell = world_to_cell((1.2, 0.7), pose, SHORT)
    risk[wheel_cell] = 0.4
    cost, feasible = pl.footprint_cost(grid, pose, FOOT, CONF)
    body_cells = {
        c
        for c in pl._local_cells(grid, pose, pl._body_offsets(FOOT, SHORT.resolution_m))
        if c is not None
    }
    expected = 0.4 + 0.4 / len(body_cells)
    assert feasible
    assert cost == pytest.approx(expected)


def test_footprint_cost_step_infeasible():
    n = SHORT.cells
    ele = np.zeros((n, n))
    pose = Pose2p5(0, 0, 0, 0)
    cell = world_to_cell((1.2, 0.7), pose, SHORT)
    ele[cell] = 1.0  # 1 m ledge under one wheel
    grid = make_map(elevation=ele)
    _, feasible = pl.footprint_cost(grid, pose, FOOT, CONF)
    assert not feasible


def test_footprint_pose_outside():
    grid = make_map()
    with pytest.raises(ValueError):
        pl.footprint_cost(grid, Pose2p5(500, 0, 0, 0), FOOT, CONF)


def test_slope_speed_flat():
    grid = make_map()
    assert pl.slope_speed_limit(grid, Pose2p5(0, 0, 0, 0), FOOT, CONF) == pytest.approx(12.0)


def test_slope_speed_at_limit():
    n = SHORT.cells
    ii = np.arange(n)
    slope = math.tan(math.radians(25.0))
    ele = np.repeat(((ii + 0.5) * SHORT.resolution_m * slope)[:, None], n, axis=1)
    grid = make_map(elevation=ele)
    v = pl.slope_speed_limit(grid, Pose2p5(0, 0, 0, 0), FOOT, CONF)
    assert v == pytest.approx(0.0, abs=1e-9)


def test_slope_speed_longitudinal_formula():
    # 12.5 degree longitudinal slope -> 12 * (1 - tan12.5/tan25)
    n = SHORT.cells
    ii = np.arange(n)
    slope = math.tan(math.radians(12.5))
    ele = np.repeat(((ii + 0.5) * SHORT.resolution_m * slope)[:, None], n, axis=1)
    grid = make_map(elevation=ele)
    v = pl.slope_speed_limit(grid, Pose2p5(0, 0, 0, 0), FOOT, CONF)
    expected = 12.0 * (1.0 - slope / math.tan(math.radians(25.0)))
    assert v == pytest.approx(expected, rel=1e-6)
    assert expected == pytest.approx(6.29, abs=0.01)


def test_slope_speed_lateral_rollover():
    n = SHORT.cells
    jj = np.arange(n)
    slope = math.tan(math.radians(22.0))  # beyond the 20 degree roll limit
    ele = np.repeat(((jj + 0.5) * SHORT.resolution_m * slope)[None, :], n, axis=0)
    grid = make_map(elevation=ele)
    assert pl.slope_speed_limit(grid, Pose2p5(0, 0, 0, 0), FOOT, CONF) == 0.0


def test_slope_speed_undefined_elevation():
    n = SHORT.cells
    grid = make_map(ele_valid=np.zeros((n, n), dtype=bool))
    with pytest.raises(ValueError):
        pl.slope_speed_limit(grid, Pose2p5(0, 0, 0, 0), FOOT, CONF)


def dijkstra_oracle(cost_field, blocked, spec, start_xy, goal_xy, k_r, goal_tol):
    """8-connected Dijkstra on the same cost field the lattice uses."""
    n = spec.cells
    res = spec.resolution_m
    half = spec.extent_m / 2

    def cell_of(p):
        return (int((p[0] + half) // res), int((p[1] + half) // res))

    start = cell_of(start_xy)
    goal = np.asarray(goal_xy, dtype=np.float64)
    dist = {start: 0.0}
    heap = [(0.0, start)]
    moves = [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1) if (di, dj) != (0, 0)]
    best = None
    while heap:
        d, cell = heapq.heappop(heap)
        if d > dist.get(cell, math.inf):
            continue
        center = ((cell[0] + 0.5) * res - half, (cell[1] + 0.5) * res - half)
        if math.hypot(center[0] - goal[0], center[1] - goal[1]) <= goal_tol:
            return d
        for di, dj in moves:
            nxt = (cell[0] + di, cell[1] + dj)
            if not (0 <= nxt[0] < n and 0 <= nxt[1] < n):
                continue
            if blocked[nxt]:
                continue
            step = res * math.hypot(di, dj)
            edge = step * (1.0 + k_r * 0.5 * (cost_field[cell] + cost_field[nxt]))
            nd = d + edge
            if nd < dist.get(nxt, math.inf):
                dist[nxt] = nd
                heapq.heappush(heap, (nd, nxt))
    return None


def test_plan_straight_on_empty_map():
    grid = make_map()
    start = Pose2p5(-40, 0, 0, 0)
    result = pl.plan(grid, start, (40.0, 0.0), FOOT, CONF)
    assert result.feasible
    length = pl.PlannerConfig().primitive_m * (len(result.waypoints) - 1)
    assert length <= 1.1 * 80.0 + CONF.primitive_m
    ys = [w[1] for w in result.waypoints]
    assert max(abs(y) for y in ys) < 2.0


def test_plan_matches_dijkstra_within_tolerance():
    rng = np.random.default_rng(0)
    n = SHORT.cells
    for trial in range(3):
        risk = np.zeros((n, n))
        grid = make_map(risk)
        for _ in range(12):
            cx, cy = rng.uniform(-35, 35, 2)
            risk[disk_mask(grid, cx, cy, rng.uniform(2, 5))] = rng.uniform(0.5, 1.0)
        start = Pose2p5(-45, 0, 0, 0)
        # keep the start clear
        risk[disk_mask(grid, start.x, start.y, 6.0)] = 0.0
        goal = (45.0, 0.0)
        risk[disk_mask(grid, goal[0], goal[1], 6.0)] = 0.0
        result = pl.plan(grid, start, goal, FOOT, CONF)
        cost_field, blocked = pl.build_cost_fields(grid, FOOT, CONF)
        oracle = dijkstra_oracle(cost_field, blocked, SHORT, (start.x, start.y), goal, CONF.k_r, CONF.goal_tolerance_m)
        assert result.feasible and oracle is not None
        assert result.total_cost <= 1.10 * oracle + CONF.primitive_m


def test_plan_goes_through_gap():
    n = SHORT.cells
    risk = np.zeros((n, n))
    grid = make_map(risk)
    # fatal wall at x = 20 m with one gap at y = 15
    wall = (np.abs((np.arange(n) + 0.5) * 0.8 - 100 - 20.0) < 2.0)[:, None] & np.ones((1, n), bool)
    gap = (np.abs((np.arange(n) + 0.5) * 0.8 - 100 - 15.0) < 6.0)[None, :]
    risk[wall & ~gap] = 1.0
    result = pl.plan(grid, Pose2p5(-20, 0, 0, 0), (60.0, 0.0), FOOT, CONF)
    assert result.feasible
    # the path must cross the wall near the gap
    for x, y, _, _ in result.waypoints:
        if abs(x - 20.0) < 3.0:
            assert abs(y - 15.0) < 10.0


def test_plan_never_places_wheel_on_fatal_cell():
    rng = np.random.default_rng(1)
    n = SHORT.cells
    risk = np.zeros((n, n))
    grid = make_map(risk)
    for _ in range(15):
        cx, cy = rng.uniform(-50, 50, 2)
        risk[disk_mask(grid, cx, cy, rng.uniform(1, 4))] = 1.0
    risk[disk_mask(grid, -60, 0, 6.0)] = 0.0
    result = pl.plan(grid, Pose2p5(-60, 0, 0, 0), (60.0, 0.0), FOOT, CONF)
    risk_vals, risk_ok = grid.layer("risk")
    for x, y, yaw, _ in result.waypoints:
        pose = Pose2p5(x, y, 0, yaw)
        for wx, wy in FOOT.wheels:
            c, s = math.cos(yaw), math.sin(yaw)
            cell = world_to_cell((x + c * wx - s * wy, y + s * wx + c * wy), grid.origin, grid.spec)
            if cell is not None and risk_ok[cell]:
                assert risk_vals[cell] < CONF.fatal_risk_threshold


def test_plan_goal_in_fatal_region_falls_back():
    n = SHORT.cells
    risk = np.zeros((n, n))
    grid = make_map(risk)
    risk[disk_mask(grid, 20, 0, 8.0)] = 1.0
    conf = pl.PlannerConfig(horizon_m=45.0)  # keep the exhaustive search small
    result = pl.plan(grid, Pose2p5(-15, 0, 0, 0), (20.0, 0.0), FOOT, conf)
    assert not result.feasible
    # fallback ends near the fatal boundary, outside the inflated region
    end = result.waypoints[-1]
    d = math.hypot(end[0] - 20.0, end[1] - 0.0)
    assert 8.0 - 1.0 <= d <= 8.0 + 3 * FOOT.max_reach + CONF.primitive_m


def test_plan_cost_monotone_in_risk():
    rng = np.random.default_rng(2)
    n = SHORT.cells
    risk = np.zeros((n, n))
    grid = make_map(risk)
    for _ in range(8):
        cx, cy = rng.uniform(-30, 30, 2)
        risk[disk_mask(grid, cx, cy, 4.0)] = 0.4
    r1 = pl.plan(grid, Pose2p5(-50, 0, 0, 0), (50.0, 0.0), FOOT, CONF)
    grid2 = make_map(np.clip(risk * 1.5, 0, 0.89))
    r2 = pl.plan(grid2, Pose2p5(-50, 0, 0, 0), (50.0, 0.0), FOOT, CONF)
    assert r2.total_cost >= r1.total_cost - 1e-9


def test_plan_deterministic():
    rng = np.random.default_rng(3)
    n = SHORT.cells
    risk = np.zeros((n, n))
    grid = make_map(risk)
    for _ in range(10):
        cx, cy = rng.uniform(-40, 40, 2)
        risk[disk_mask(grid, cx, cy, 3.0)] = rng.uniform(0.3, 1.0)
    a = pl.plan(grid, Pose2p5(-50, 5, 0, 0.1), (50.0, -10.0), FOOT, CONF)
    b = pl.plan(grid, Pose2p5(-50, 5, 0, 0.1), (50.0, -10.0), FOOT, CONF)
    assert a.waypoints == b.waypoints
    assert a.total_cost == b.total_cost


def test_plan_start_infeasible():
    n = SHORT.cells
    risk = np.zeros((n, n))
    grid = make_map(risk)
    risk_vals, _ = grid.layer("risk")
    risk_vals[disk_mask(grid, -50, 0, 5.0)] = 1.0
    with pytest.raises(ValueError):
        pl.plan(grid, Pose2p5(-50, 0, 0, 0), (50.0, 0.0), FOOT, CONF)


def test_plan_goal_outside_map():
    grid = make_map()
    with pytest.raises(ValueError):
        pl.plan(grid, Pose2p5(0, 0, 0, 0), (500.0, 0.0), FOOT, CONF)


def test_plan_respects_horizon():
    grid = make_map(origin=Pose2p5(0, 0, 0, 0))
    start = Pose2p5(-95, -60, 0, 0)
    result = pl.plan(grid, start, (95.0, 60.0), FOOT, CONF)
    # goal is ~188 m away: unreachable within the 100 m horizon
    assert not result.feasible
    for x, y, _, _ in result.waypoints:
        assert math.hypot(x - start.x, y - start.y) <= CONF.horizon_m + 1e-6