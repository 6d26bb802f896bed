import math

import numpy as np
import pytest

from bevterrain import synthworld as sw
from bevterrain import voxelmap as vm
from bevterrain.gridmap import MICRO, Pose2p5, RangeSpec, SHORT


def scan_at(points_sensor, pose):
    pts = np.asarray(points_sensor, dtype=np.float64).reshape(-1, 3)
    return sw.SimScan(points=pts, ranges=np.linalg.norm(pts, axis=1), sensor_pose=pose, timestamp=0.0)


def test_integrate_single_point():
    vmap = vm.VoxelMap()
    scan = scan_at([[1.0, 1.0, 0.5]], Pose2p5(0, 0, 0, 0))
    vm.integrate_scan(vmap, scan, Pose2p5(0, 0, 0, 0))
    assert len(vmap) == 1
    st = next(iter(vmap.voxels.values()))
    assert st.count == 1
    assert st.centroid == pytest.approx((1.0, 1.0, 0.5))


def test_integrate_two_points_same_voxel():
    vmap = vm.VoxelMap()
    scan = scan_at([[0.1, 0.1, 0.1], [0.3, 0.3, 0.3]], Pose2p5(0, 0, 0, 0))
    vm.integrate_scan(vmap, scan, Pose2p5(0, 0, 0, 0))
    assert len(vmap) == 1
    st = next(iter(vmap.voxels.values()))
    assert st.count == 2
    assert st.min_z == pytest.approx(0.1)
    assert st.max_z == pytest.approx(0.3)
    assert st.centroid[2] == pytest.approx(0.2)


def test_eviction_after_motion():
    vmap = vm.VoxelMap()
    vm.integrate_scan(vmap, scan_at([[0.0, 0.0, 0.0]], Pose2p5(0, 0, 0, 0)), Pose2p5(0, 0, 0, 0))
    assert len(vmap) == 1
    vm.integrate_points(vmap, np.zeros((0, 3)), Pose2p5(150.0, 0, 0, 0))
    assert len(vmap) == 0


def test_integration_order_insensitive():
    # dyadic coordinates keep float sums exact, so stats match bitwise
    rng = np.random.default_rng(0)
    pts_a = rng.integers(-16, 16, size=(200, 3)) / 8.0
    pts_b = rng.integers(-16, 16, size=(300, 3)) / 8.0
    pose = Pose2p5(0, 0, 0, 0)
    m1 = vm.VoxelMap()
    vm.integrate_points(m1, pts_a, pose)
    vm.integrate_points(m1, pts_b, pose)
    m2 = vm.VoxelMap()
    vm.integrate_points(m2, pts_b, pose)
    vm.integrate_points(m2, pts_a, pose)
    assert set(m1.voxels) == set(m2.voxels)
    for key, st1 in m1.voxels.items():
        st2 = m2.voxels[key]
        assert st1.count == st2.count
        assert st1.centroid == st2.centroid
        assert st1.min_z == st2.min_z and st1.max_z == st2.max_z


def test_select_spaced_scans_travel_rule():
    poses = [Pose2p5(0, 0, 2, 0), Pose2p5(1, 0, 2, 0), Pose2p5(3, 0, 2, 0)]
    scans = [scan_at([[0, 0, -2]], p) for p in poses]
    policy = vm.AccumulationPolicy(mode="last_n_scans", n=2)
    picked = select = vm.select_spaced_scans(scans, policy)
    xs = [s.sensor_pose.x for s in picked]
    # the 1 m scan is skipped: its spacing from the latest is not above 2 m
    assert xs == [3.0, 0.0]


def test_select_spaced_n1():
    poses = [Pose2p5(x, 0, 2, 0) for x in (0.0, 5.0, 10.0)]
    scans = [scan_at([[0, 0, -2]], p) for p in poses]
    picked = vm.select_spaced_scans(scans, vm.AccumulationPolicy(mode="last_n_scans", n=1))
    assert len(picked) == 1
    assert picked[0].sensor_pose.x == 10.0


def test_accumulate_empty_input():
    with pytest.raises(ValueError):
        vm.accumulate_scans([], vm.AccumulationPolicy(mode="last_n_scans", n=1))


def test_voxel_filter_merges():
    pts = np.array([[0.05, 0.05, 0.05], [0.15, 0.15, 0.15], [1.0, 1.0, 1.0]])
    out = vm.voxel_filter(pts, 0.4)
    assert out.shape == (2, 3)
    merged = out[np.lexsort(out.T)][0]
    assert merged == pytest.approx([0.1, 0.1, 0.1])


def test_policy_validation():
    with pytest.raises(ValueError):
        vm.AccumulationPolicy(mode="bogus")
    with pytest.raises(ValueError):
        vm.AccumulationPolicy(mode="last_n_scans", n=0)


def test_raw_elevation_lowest_voxel():
    vmap = vm.VoxelMap()
    pts = np.array([[0.1, 0.1, 1.2], [0.1, 0.1, 3.6]])
    vm.integrate_points(vmap, pts, Pose2p5(0, 0, 0, 0))
    vals, valid = vm.raw_elevation(vmap, SHORT, Pose2p5(0, 0, 0, 0))
    cell = (125, 125)
    assert valid[cell]
    assert vals[cell] == pytest.approx(1.2)
    # empty columns stay missing
    assert valid.sum() <= 4  # the voxel can straddle at most a few cells


def test_raw_elevation_matches_oracle_on_flat_drive():
    world = sw.World(bounds=(-150, 150, -150, 150))
    lidar = sw.LidarModel(rings=16, azimuth_steps=90)
    vmap = vm.VoxelMap()
    for x in (0.0, 4.0, 8.0):
        pose = Pose2p5(x, 0, 0, 0)
        vm.integrate_scan(vmap, sw.simulate_scan(world, pose, lidar), pose)
    pose = Pose2p5(8.0, 0, 0, 0)
    vals, valid = vm.raw_elevation(vmap, SHORT, pose)
    assert valid.any()
    assert np.all(np.abs(vals[valid]) <= 0.4 + 1e-9)
    # lowest-voxel estimate cannot sit above true ground by more than a voxel
    assert np.all(vals[valid] >= -0.4 - 1e-9)


def test_revoxelize_pillar_basics():
    vmap = vm.VoxelMap()
    vm.integrate_points(vmap, np.array([[0.1, 0.1, 0.5]]), Pose2p5(0, 0, 0, 0))
    pillars = vm.revoxelize_pillars(vmap, Pose2p5(0, 0, 0, 0), SHORT)
    assert len(pillars) == 1
    assert pillars[0].points.shape == (1, 3)
    assert pillars[0].count == 1


def test_revoxelize_truncates_lowest_z():
    vmap = vm.VoxelMap()
    zs = np.arange(20) * 0.4 + 0.2
    pts = np.column_stack([np.full(20, 0.1), np.full(20, 0.1), zs])
    vm.integrate_points(vmap, pts, Pose2p5(0, 0, 0, 0))
    pillars = vm.revoxelize_pillars(vmap, Pose2p5(0, 0, 0, 0), SHORT)
    assert len(pillars) == 1
    p = pillars[0]
    assert p.count == 20
    assert p.points.shape[0] == 16
    assert p.points[:, 2].max() == pytest.approx(zs[15])


def test_revoxelize_pillar_cap_keeps_densest():
    vmap = vm.VoxelMap()
    cols = {(0.1, 0.1): 5, (1.7, 0.1): 3, (3.3, 0.1): 1}
    for (x, y), n in cols.items():
        pts = np.column_stack([np.full(n, x), np.full(n, y), 0.2 + 0.4 * np.arange(n)])
        vm.integrate_points(vmap, pts, Pose2p5(0, 0, 0, 0))
    pillars = vm.revoxelize_pillars(vmap, Pose2p5(0, 0, 0, 0), SHORT, max_pillars=2)
    assert [p.count for p in pillars] == [5, 3]


def test_confidence_layer_formula():
    # plug the decided formula: n=5 at d=70 -> (1-e^-1) e^-1
    vmap = vm.VoxelMap()
    pts = np.tile([[70.0, 0.0, 0.0]], (5, 1)) + np.random.default_rng(0).uniform(0, 0.05, (5, 3))
    vm.integrate_points(vmap, pts, Pose2p5(0, 0, 0, 0))
    conf = vm.confidence_layer(vmap, SHORT, Pose2p5(0, 0, 0, 0), [Pose2p5(0, 0, 0, 0)])
    cell = (212, 125)  # x=70 -> (70+100)/0.8 = 212.5
    # distance is measured from the cell center (70.0, 0.4)
    d = math.hypot((212 + 0.5) * 0.8 - 100, (125 + 0.5) * 0.8 - 100)
    expected = (1 - math.exp(-1.0)) * math.exp(-max(0.0, d - 30.0) / 40.0)
    assert conf[cell] == pytest.approx(expected, rel=1e-6)
    assert conf[0, 0] == 0.0  # n = 0


def test_confidence_layer_near_dense():
    vmap = vm.VoxelMap()
    rng = np.random.default_rng(1)
    # all 50 points inside one voxel, whose footprint stays in one cell
    pts = np.column_stack([rng.uniform(10.01, 10.09, 50), rng.uniform(0.01, 0.09, 50), np.zeros(50)])
    vm.integrate_points(vmap, pts, Pose2p5(0, 0, 0, 0))
    conf = vm.confidence_layer(vmap, SHORT, Pose2p5(10, 0, 0, 0), [Pose2p5(10, 0, 0, 0)])
    assert conf.max() == pytest.approx(1 - math.exp(-10.0), rel=1e-4)


def test_coverage_monotone_in_n():
    world = sw.generate_world(sw.WorldConfig(seed=11, n_trees=4, n_rocks=2))
    traj = sw.generate_trajectory(world, (-40, 0), (40, 0), speed=6.0, dt=1.0)
    lidar = sw.LidarModel(rings=12, azimuth_steps=60)
    scans = [sw.simulate_scan(world, p, lidar, float(t)) for t, p in zip(traj.times, traj.poses)]
    pose = traj.poses[-1]
    cov = []
    for n in (1, 2, 5, 10):
        vmap = vm.map_from_scans(scans, vm.AccumulationPolicy(mode="last_n_scans", n=n), pose)
        _, valid = vm.raw_elevation(vmap, SHORT, pose)
        cov.append(valid.mean())
    vmap = vm.map_from_scans(scans, vm.AccumulationPolicy(mode="voxel_map"), pose)
    _, valid = vm.raw_elevation(vmap, SHORT, pose)
    cov_vm = valid.mean()
    assert all(b >= a for a, b in zip(cov, cov[1:]))
    assert cov_vm >= max(cov)


def test_heuristic_risk_anchors():
    world = sw.World(bounds=(-150, 150, -150, 150))
    world.cylinders.append(sw.Cylinder(10.0, 0.0, 0.5, 4.0, base_z=0.0))
    lidar = sw.LidarModel(rings=24, azimuth_steps=180)
    pose = Pose2p5(0, 0, 0, 0)
    vmap = vm.VoxelMap()
    vm.integrate_scan(vmap, sw.simulate_scan(world, pose, lidar), pose)
    risk, valid = vm.heuristic_risk_layer(vmap, SHORT, pose)
    tree_cell = (137, 125)  # x = 10 m
    assert valid[tree_cell]
    assert risk[tree_cell] == 1.0
    # flat ground cells well away from the tree carry (near) zero risk
    flat = valid.copy()
    flat[130:146, 118:132] = False
    assert risk[flat].max() < 0.3
