import math

import numpy as np
import pytest

from bevterrain import groundtruth as gt
from bevterrain import synthworld as sw
from bevterrain.gridmap import GridMap, Pose2p5, RangeSpec, RegionLabel, cell_centers, world_to_cell
from bevterrain.losses import OBSERVED_CONFIDENCE_THRESHOLD

SPEC8 = RangeSpec("test", 6.4, 0.8)  # 8x8 cells


def frame_from_arrays(spec, pose, t, ele, ele_ok, risk, risk_ok, conf):
    g = GridMap(spec, pose, t)
    g.add_layer("elevation", ele, ele_ok)
    g.add_layer("risk", risk, risk_ok)
    g.add_layer("confidence", conf)
    return gt.HindsightFrame(timestamp=t, pose=pose, maps={spec.id: g})


def random_archive(rng, spec, n_frames):
    frames = []
    for k in range(n_frames):
        n = spec.cells
        pose = Pose2p5(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), 0.0, rng.uniform(-math.pi, math.pi))
        ele = rng.normal(0, 2, (n, n))
        ele_ok = rng.random((n, n)) > 0.3
        risk = rng.random((n, n))
        risk_ok = rng.random((n, n)) > 0.3
        conf = rng.random((n, n))
        frames.append(frame_from_arrays(spec, pose, float(k), ele, ele_ok, risk, risk_ok, conf))
    archive = gt.HindsightArchive(frames=[])
    for f in frames:
        archive.add(f)
    return archive


def brute_force_fuse(archive, query_pose, spec):
    """Reference fusion: materialize every observation per output cell, then
    apply the mean / max / latest-above-threshold rules."""
    n = spec.cells
    obs = {}
    for frame in archive.frames:
        fmap = frame.maps[spec.id]
        ele, ele_ok = fmap.layer("elevation")
        risk, risk_ok = fmap.layer("risk")
        conf, _ = fmap.layer("confidence")
        m = fmap.spec.cells
        for i in range(m):
            for j in range(m):
                center = cell_centers(fmap.spec, fmap.origin)[i, j]
                cell = world_to_cell(center, query_pose, spec)
                if cell is None:
                    continue
                rec = obs.setdefault(cell, {"ele": [], "conf": [], "risk": []})
                if ele_ok[i, j]:
                    rec["ele"].append(ele[i, j])
                rec["conf"].append(conf[i, j])
                if risk_ok[i, j] and conf[i, j] > OBSERVED_CONFIDENCE_THRESHOLD:
                    rec["risk"].append(risk[i, j])
    out = GridMap(spec, query_pose)
    ele = np.zeros((n, n))
    ele_ok = np.zeros((n, n), dtype=bool)
    conf = np.zeros((n, n))
    conf_ok = np.zeros((n, n), dtype=bool)
    risk = np.zeros((n, n))
    risk_ok = np.zeros((n, n), dtype=bool)
    for (i, j), rec in obs.items():
        if rec["ele"]:
            total = 0.0
            for v in rec["ele"]:
                total += v
            ele[i, j] = total / len(rec["ele"])
            ele_ok[i, j] = True
        if rec["conf"]:
            conf[i, j] = max(rec["conf"])
            conf_ok[i, j] = True
        if rec["risk"]:
            risk[i, j] = rec["risk"][-1]
            risk_ok[i, j] = True
    out.add_layer("elevation", ele, ele_ok)
    out.add_layer("confidence", conf, conf_ok)
    out.add_layer("risk", risk, risk_ok)
    return out


def test_fuse_mean_max_latest_rules():
    spec = SPEC8
    pose = Pose2p5(0, 0, 0, 0)
    n = spec.cells
    z = np.zeros((n, n))
    ok = np.ones((n, n), dtype=bool)
    f1 = frame_from_arrays(spec, pose, 0.0, np.full((n, n), 2.0), ok, np.full((n, n), 0.7), ok, np.full((n, n), 0.3))
    f2 = frame_from_arrays(spec, pose, 1.0, np.full((n, n), 4.0), ok, np.full((n, n), 0.4), ok, np.full((n, n), 0.05))
    archive = gt.HindsightArchive()
    archive.add(f1)
    archive.add(f2)
    fused = gt.fuse_hindsight(archive, pose, spec)
    assert np.allclose(fused.data["elevation"], 3.0)  # mean
    assert np.allclose(fused.data["confidence"], 0.3)  # max
    # frame 2 is below the confidence threshold: risk keeps frame 1's value
    assert np.allclose(fused.data["risk"], 0.7)


def test_fuse_empty_archive():
    with pytest.raises(ValueError):
        gt.fuse_hindsight(gt.HindsightArchive(), Pose2p5(0, 0, 0, 0), SPEC8)


def test_fuse_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for trial in range(20):
        spec = SPEC8
        archive = random_archive(rng, spec, n_frames=int(rng.integers(1, 6)))
        query = Pose2p5(rng.uniform(-1, 1), rng.uniform(-1, 1), 0.0, rng.uniform(-math.pi, math.pi))
        fused = gt.fuse_hindsight(archive, query, spec)
        ref = brute_force_fuse(archive, query, spec)
        for layer in ("elevation", "confidence", "risk"):
            v1, ok1 = fused.layer(layer)
            v2, ok2 = ref.layer(layer)
            assert np.array_equal(ok1, ok2), f"trial {trial} {layer} masks differ"
            assert np.array_equal(v1[ok1], v2[ok2]), f"trial {trial} {layer} values differ"


def test_fusion_window():
    spec = SPEC8
    pose = Pose2p5(0, 0, 0, 0)
    n = spec.cells
    ok = np.ones((n, n), dtype=bool)
    archive = gt.HindsightArchive(window_s=10.0)
    archive.add(frame_from_arrays(spec, pose, 0.0, np.full((n, n), 2.0), ok, np.zeros((n, n)), ok, ok * 1.0))
    archive.add(frame_from_arrays(spec, pose, 100.0, np.full((n, n), 8.0), ok, np.zeros((n, n)), ok, ok * 1.0))
    fused = gt.fuse_hindsight(archive, pose, spec, query_time=100.0)
    assert np.allclose(fused.data["elevation"], 8.0)  # first frame outside the window


def test_dem_bilinear_midpoint():
    dem = gt.DemTile(0.0, 0.0, 1.0, np.array([[0.0, 1.0], [1.0, 2.0]]))
    assert dem.bilinear(0.5, 0.5) == pytest.approx(1.0)
    assert np.isnan(dem.bilinear(5.0, 0.0))


def test_make_dem_matches_world():
    world = sw.generate_world(sw.WorldConfig(seed=3))
    dem = gt.make_dem(world, pitch=1.0)
    rng = np.random.default_rng(1)
    pts = rng.uniform(-100, 100, size=(20, 2))
    z = dem.bilinear(pts[:, 0], pts[:, 1])
    # bilinear decimation of a smooth field stays close to the field
    assert np.allclose(z, world.height(pts[:, 0], pts[:, 1]), atol=0.05)


def hillier_world(seed=5):
    cfg = sw.WorldConfig(
        seed=seed, n_trees=0, n_rocks=0, n_hills=40,
        hill_amp_min=-6.0, hill_amp_max=8.0, hill_sigma_min=8.0, hill_sigma_max=16.0,
    )
    return sw.generate_world(cfg)


def rebase_pivot(tf, old_pivot, new_pivot):
    """Express a pivoted rigid transform about a different pivot."""
    c, s = math.cos(tf.yaw), math.sin(tf.yaw)
    dx, dy = new_pivot[0] - old_pivot[0], new_pivot[1] - old_pivot[1]
    return gt.RigidTransform2p5(
        tx=tf.tx + (c * dx - s * dy) - dx,
        ty=tf.ty + (s * dx + c * dy) - dy,
        tz=tf.tz,
        yaw=tf.yaw,
    )


def fused_from_world(world, pose, spec, conf=1.0, coverage=0.7, seed=0):
    """Synthetic 'observed' map: true elevation on a random subset of cells."""
    rng = np.random.default_rng(seed)
    n = spec.cells
    centers = cell_centers(spec, pose)
    ele = world.height(centers[..., 0], centers[..., 1])
    ok = rng.random((n, n)) < coverage
    g = GridMap(spec, pose)
    g.add_layer("elevation", np.where(ok, ele, 0.0), ok)
    g.add_layer("confidence", np.full((n, n), conf))
    g.add_layer("risk", np.zeros((n, n)))
    return g


SPEC50 = RangeSpec("reg", 80.0, 0.8)  # 100x100 cells, +-40 m


def test_register_identity_when_aligned():
    world = hillier_world()
    pose = Pose2p5(0, 0, 0, 0.4)
    fused = fused_from_world(world, pose, SPEC50)
    dem = gt.make_dem(world)
    tf = gt.register_dem(dem, fused)
    t_mag, yaw_mag = tf.magnitude()
    assert tf.fitness >= 0.99
    assert t_mag < 0.05 and yaw_mag < 0.005
    assert not tf.degenerate


def test_register_recovers_injected_offset():
    world = hillier_world(seed=8)
    pose = Pose2p5(5.0, -3.0, 0, 0.2)
    fused = fused_from_world(world, pose, SPEC50, seed=2)
    dem = gt.make_dem(world)
    injected = gt.RigidTransform2p5(tx=1.0, ty=-1.5, tz=0.5, yaw=0.04)
    shifted = gt.inject_georeference_error(fused, injected)
    tf = gt.register_dem(dem, shifted)
    old_pivot = (fused.origin.x, fused.origin.y)
    new_pivot = (shifted.origin.x, shifted.origin.y)
    residual = gt.compose(tf, rebase_pivot(injected, old_pivot, new_pivot), new_pivot)
    t_mag, yaw_mag = residual.magnitude()
    assert t_mag < 0.1 and yaw_mag < 0.01


def test_register_flat_terrain_degenerate():
    world = sw.World(bounds=(-150, 150, -150, 150))  # featureless plane
    pose = Pose2p5(0, 0, 0, 0)
    fused = fused_from_world(world, pose, SPEC50, seed=3)
    dem = gt.make_dem(world)
    injected = gt.RigidTransform2p5(tx=1.5, ty=0.0, tz=0.5, yaw=0.0)
    shifted = gt.inject_georeference_error(fused, injected)
    tf = gt.register_dem(dem, shifted)
    assert tf.degenerate
    # xy is unrecoverable and stays at the initial guess (identity here)
    assert tf.tx == 0.0 and tf.ty == 0.0
    # z is recovered
    assert tf.tz == pytest.approx(-0.5, abs=0.05)
    assert tf.fitness > 0.9  # plane matches plane regardless of xy


def test_register_too_few_cells():
    world = hillier_world()
    pose = Pose2p5(0, 0, 0, 0)
    fused = fused_from_world(world, pose, SPEC8, coverage=0.5)
    with pytest.raises(ValueError):
        gt.register_dem(gt.make_dem(world), fused)


def test_fuse_dem_inpaints_only_missing():
    world = hillier_world(seed=9)
    pose = Pose2p5(0, 0, 0, 0.3)
    fused = fused_from_world(world, pose, SPEC50, coverage=0.5, seed=4)
    dem = gt.make_dem(world)
    tf = gt.register_dem(dem, fused)
    before_vals, before_ok = fused.layer("elevation")
    out = gt.fuse_dem(fused, dem, tf)
    after_vals, after_ok = out.layer("elevation")
    assert np.all(after_ok)  # complete elevation
    assert np.array_equal(after_vals[before_ok], before_vals[before_ok])  # untouched
    # inpainted cells approximate the true surface
    filled = ~before_ok
    centers = cell_centers(SPEC50, pose)
    target = world.height(centers[..., 0], centers[..., 1])
    assert np.abs(after_vals[filled] - target[filled]).max() < 0.25


def test_fuse_dem_identity_when_complete():
    world = hillier_world(seed=10)
    pose = Pose2p5(0, 0, 0, 0)
    fused = fused_from_world(world, pose, SPEC50, coverage=1.0)
    dem = gt.make_dem(world)
    tf = gt.register_dem(dem, fused)
    out = gt.fuse_dem(fused, dem, tf)
    assert np.array_equal(out.data["elevation"], fused.data["elevation"])


def test_fuse_dem_rejects_low_fitness():
    world = hillier_world(seed=11)
    pose = Pose2p5(0, 0, 0, 0)
    fused = fused_from_world(world, pose, SPEC50)
    dem = gt.make_dem(world)
    tf = gt.RigidTransform2p5(fitness=0.3)
    with pytest.raises(gt.SampleRejected):
        gt.fuse_dem(fused, dem, tf)


def test_partition_regions_rules():
    cur = np.array([[0.5, 0.05], [0.05, 0.0]])
    fused = np.array([[0.9, 0.5], [0.05, 0.0]])
    region = gt.partition_regions(cur, fused)
    assert region[0, 0] == int(RegionLabel.ObsPC)
    assert region[0, 1] == int(RegionLabel.ObsF)
    assert region[1, 0] == int(RegionLabel.Unobs)
    assert region[1, 1] == int(RegionLabel.Unobs)


def test_partition_is_total():
    rng = np.random.default_rng(5)
    cur = rng.random((30, 30))
    fused = rng.random((30, 30))
    region = gt.partition_regions(cur, fused)
    assert np.isin(region, [0, 1, 2]).all()
