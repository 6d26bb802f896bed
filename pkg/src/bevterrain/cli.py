"""Pipeline command line: world and dataset generation, training,
evaluation (including accumulation and loss ablation sweeps), planning
scenarios, and map export.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bevproject, evalharness, groundtruth, losses, mapio, planner, predictor, synthworld, voxelmap
from .config import ConfigError, apply_file, echo_config, format_config, load_config
from .gridmap import GridMap, MICRO, Pose2p5, SHORT

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _world_config(cfg) -> synthworld.WorldConfig:
    e = cfg["world.half_extent"]
    corridor = (
        cfg["traj.start_x"],
        cfg["traj.start_y"],
        cfg["traj.end_x"],
        cfg["traj.end_y"],
        cfg["world.corridor_half_width"],
    )
    return synthworld.WorldConfig(
        bounds=(-e, e, -e, e),
        seed=cfg["world.seed"],
        base_slope_x=cfg["world.base_slope_x"],
        base_slope_y=cfg["world.base_slope_y"],
        n_hills=cfg["world.n_hills"],
        hill_amp_min=cfg["world.hill_amp_min"],
        hill_amp_max=cfg["world.hill_amp_max"],
        hill_sigma_min=cfg["world.hill_sigma_min"],
        hill_sigma_max=cfg["world.hill_sigma_max"],
        n_trees=cfg["world.n_trees"],
        tree_radius_min=cfg["world.tree_radius_min"],
        tree_radius_max=cfg["world.tree_radius_max"],
        tree_height_min=cfg["world.tree_height_min"],
        tree_height_max=cfg["world.tree_height_max"],
        n_rocks=cfg["world.n_rocks"],
        rock_size_min=cfg["world.rock_size_min"],
        rock_size_max=cfg["world.rock_size_max"],
        rock_height_min=cfg["world.rock_height_min"],
        rock_height_max=cfg["world.rock_height_max"],
        clear_corridor=corridor,
    )


def _lidar(cfg) -> synthworld.LidarModel:
    return synthworld.LidarModel(
        rings=cfg["lidar.rings"],
        azimuth_steps=cfg["lidar.azimuths"],
        max_range=cfg["lidar.max_range"],
        step=cfg["lidar.step"],
        mount_height=cfg["lidar.mount_height"],
    )


def _dataset_config(cfg) -> groundtruth.DatasetConfig:
    return groundtruth.DatasetConfig(
        stride=cfg["dataset.stride"],
        window_s=cfg["dataset.window_s"],
        dem_pitch=cfg["dataset.dem_pitch"],
        fitness_threshold=cfg["dataset.fitness_threshold"],
        policy=voxelmap.AccumulationPolicy(mode=cfg["dataset.accum_mode"], n=cfg["dataset.accum_n"]),
        lidar=_lidar(cfg),
        cam_width=cfg["camera.width"],
        cam_height=cfg["camera.height"],
        cam_pitch=cfg["camera.pitch"],
        cam_downsample=cfg["camera.downsample"],
        c_img=cfg["dataset.c_img"],
        c_pts=cfg["dataset.c_pts"],
        featurizer_seed=cfg["dataset.featurizer_seed"],
        depth_mode=cfg["dataset.depth_mode"],
        gnss_offset_xy=cfg["dataset.gnss_xy"],
        gnss_offset_z=cfg["dataset.gnss_z"],
        gnss_offset_yaw=cfg["dataset.gnss_yaw"],
        seed=cfg["world.seed"],
        train_frac=cfg["dataset.train_frac"],
    )


def _loss_weights(cfg) -> losses.LossWeights:
    return losses.LossWeights(
        alpha=cfg["loss.alpha"], mu=cfg["loss.mu"], lam=cfg["loss.lambda"], gamma=cfg["loss.gamma"]
    )


def _regenerate(cfg):
    world = synthworld.generate_world(_world_config(cfg))
    traj = synthworld.generate_trajectory(
        world,
        (cfg["traj.start_x"], cfg["traj.start_y"]),
        (cfg["traj.end_x"], cfg["traj.end_y"]),
        speed=cfg["traj.speed"],
        dt=cfg["traj.dt"],
        v_max=cfg["traj.v_max"],
        sway_amp=cfg["traj.sway"],
    )
    return world, traj


def cmd_genworld(cfg, out: Path) -> int:
    world, traj = _regenerate(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "world.cfg").write_text(format_config(cfg))
    with open(out / "trajectory.csv", "w") as f:
        f.write("t,x,y,z,yaw\n")
        for t, p in zip(traj.times, traj.poses):
            f.write(f"{t:.6g},{p.x:.6g},{p.y:.6g},{p.z:.6g},{p.yaw:.6g}\n")
    echo_config(out, cfg)
    print(f"world: {len(world.hills)} hills, {len(world.cylinders)} trees, "
          f"{len(world.boxes)} rocks; trajectory: {len(traj)} poses")
    return EXIT_OK


def _features_to_grid(features: bevproject.BevFeatureGrid) -> GridMap:
    g = GridMap(features.spec, features.origin, features.timestamp)
    for k, name in enumerate(features.channel_names):
        g.add_layer(name, features.features[:, :, k].astype(np.float64))
    return g


def _grid_to_features(grid: GridMap, channel_names) -> bevproject.BevFeatureGrid:
    arr = np.stack([grid.data[name] for name in channel_names], axis=-1).astype(np.float32)
    return bevproject.BevFeatureGrid(
        features=arr, channel_names=list(channel_names), spec=grid.spec,
        origin=grid.origin, timestamp=grid.timestamp,
    )


def save_dataset(out: Path, samples, index_rows) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "index.csv", "w") as f:
        f.write("sample,timestamp,x,y,z,yaw,fitness,rejected,split\n")
        split = {s.index: s.split for s in samples}
        for row in index_rows:
            p = row["pose"]
            fit = row["fitness"]
            f.write(
                f"{row['index']},{row['timestamp']:.6g},{p.x:.6g},{p.y:.6g},{p.z:.6g},{p.yaw:.6g},"
                f"{fit:.6g},{int(row['rejected'])},{split.get(row['index'], '')}\n"
            )
    for s in samples:
        d = out / f"sample_{s.index:04d}"
        d.mkdir(exist_ok=True)
        mapio.write_btm1(d / "features.btm1", _features_to_grid(s.features))
        mapio.write_manifest(d / "features.manifest.json", s.features.channel_names)
        mapio.write_btm1(d / "gt_micro.btm1", s.gt_micro)
        mapio.write_btm1(d / "gt_short.btm1", s.gt_short)
        mapio.write_btm1(d / "baseline_micro.btm1", s.baseline_micro)
        mapio.write_btm1(d / "baseline_short.btm1", s.baseline_short)


def load_dataset(path: Path):
    path = Path(path)
    index = (path / "index.csv").read_text().strip().splitlines()[1:]
    samples = []
    for line in index:
        idx, ts, x, y, z, yaw, fitness, rejected, split = line.split(",")
        if int(rejected):
            continue
        d = path / f"sample_{int(idx):04d}"
        names = mapio.read_manifest(d / "features.manifest.json")
        features = _grid_to_features(mapio.read_btm1(d / "features.btm1"), names)
        samples.append(
            groundtruth.Sample(
                index=int(idx),
                timestamp=float(ts),
                pose=Pose2p5(float(x), float(y), float(z), float(yaw)),
                features=features,
                gt_micro=mapio.read_btm1(d / "gt_micro.btm1"),
                gt_short=mapio.read_btm1(d / "gt_short.btm1"),
                baseline_micro=mapio.read_btm1(d / "baseline_micro.btm1"),
                baseline_short=mapio.read_btm1(d / "baseline_short.btm1"),
                fitness=float(fitness),
                split=split,
            )
        )
    return samples


def cmd_dataset(cfg, out: Path, world_dir=None) -> int:
    if world_dir is not None:
        cfg = load_config(Path(world_dir) / "world.cfg")
    world, traj = _regenerate(cfg)
    samples, index_rows = groundtruth.build_dataset(world, traj, _dataset_config(cfg))
    save_dataset(out, samples, index_rows)
    (out / "world.cfg").write_text(format_config(cfg))
    echo_config(out, cfg)
    rejected = sum(int(r["rejected"]) for r in index_rows)
    for r in index_rows:
        if r["rejected"]:
            print(f"sample {r['index']} rejected: fitness {r['fitness']:.3f}")
    print(f"dataset: {len(samples)} samples ({rejected} rejected) -> {out}")
    return EXIT_OK


def _init_params(channels: int, cfg, single_range: str):
    if single_range:
        return predictor.SingleRangeParams.zeros(channels, single_range)
    return predictor.PredictorParams.seeded(channels, seed=cfg["train.init_seed"])


def cmd_train(cfg, dataset_dir: Path, out: Path, single_range: str = "", init_checkpoint=None) -> int:
    samples = load_dataset(dataset_dir)
    train_set = [s for s in samples if s.split == "train"] or samples
    channels = train_set[0].features.channels
    names = train_set[0].features.channel_names
    if init_checkpoint is not None:
        params = predictor.load_checkpoint(init_checkpoint, names)
    else:
        params = _init_params(channels, cfg, single_range)
    tc = predictor.TrainConfig(
        steps=cfg["train.steps"],
        lr_peak=cfg["train.lr_peak"],
        lr_floor=cfg["train.lr_floor"],
        warmup_frac=cfg["train.warmup_frac"],
        weights=_loss_weights(cfg),
    )
    params, history = predictor.train(train_set, params, tc)
    out.mkdir(parents=True, exist_ok=True)
    predictor.save_checkpoint(out / "checkpoint.btcp", params, names)
    with open(out / "loss.csv", "w") as f:
        f.write(losses.LossReport.CSV_HEADER + "\n")
        for step, rep in enumerate(history):
            f.write(rep.csv_row(step) + "\n")
    echo_config(out, cfg)
    print(f"train: {len(history)} steps, L_total {history[0].total:.6g} -> {history[-1].total:.6g}")
    return EXIT_OK


def _predictor_system(params):
    if isinstance(params, predictor.PredictorParams):
        def produce(sample):
            pair = predictor.predict(sample.features, params)
            return {"micro": pair.micro, "short": pair.short}
        return produce

    def produce_single(sample):
        grid = predictor.predict_single_range(sample.features, params)
        empty = {"micro": None, "short": None}
        empty[params.range_id] = grid
        other = "short" if params.range_id == "micro" else "micro"
        empty[other] = sample.baseline_micro if other == "micro" else sample.baseline_short
        return empty

    return produce_single


def cmd_eval(cfg, dataset_dir: Path, out: Path, checkpoints, accum: str = "", loss_sweep: str = "", split: str = "val") -> int:
    samples = load_dataset(dataset_dir)
    eval_set = [s for s in samples if s.split == split] or samples
    econf = evalharness.EvalConfig(fatal_risk_threshold=cfg["eval.fatal_threshold"])
    out.mkdir(parents=True, exist_ok=True)

    systems = {"voxel-baseline": evalharness.baseline_producer}
    for ck in checkpoints:
        params = predictor.load_checkpoint(ck, eval_set[0].features.channel_names)
        name = Path(ck).stem if len(checkpoints) > 1 else "predictor"
        if isinstance(params, predictor.SingleRangeParams):
            name = f"{name}-{params.range_id}-only"
        systems[name] = _predictor_system(params)
    reports = evalharness.compare(systems, eval_set, econf)
    (out / "report.csv").write_text(evalharness.reports_to_csv(reports))
    table = evalharness.reports_to_table(reports)
    (out / "report.txt").write_text(table)
    print(table, end="")

    if accum:
        rows = accumulation_ablation(cfg, dataset_dir, accum)
        with open(out / "accum.csv", "w") as f:
            f.write("setting,cov_micro,cov_short,mae_micro,mae_short\n")
            for r in rows:
                f.write(
                    f"{r['setting']},{r['cov_micro']:.6g},{r['cov_short']:.6g},"
                    f"{r['mae_micro']:.6g},{r['mae_short']:.6g}\n"
                )
            print(f"accumulation ablation -> {out / 'accum.csv'}")

    if loss_sweep:
        rows = loss_ablation(cfg, eval_set, econf, loss_sweep)
        with open(out / "loss_ablation.csv", "w") as f:
            f.write("setting,mae_micro_obspc,mae_micro_obsf,mae_micro_unobs,"
                    "mae_short_obspc,mae_short_obsf,mae_short_unobs,cons_mae_m\n")
            for r in rows:
                f.write(",".join([r["setting"]] + [f"{v:.6g}" for v in r["values"]]) + "\n")
        print(f"loss ablation -> {out / 'loss_ablation.csv'}")

    echo_config(out, cfg)
    return EXIT_OK


def accumulation_ablation(cfg, dataset_dir: Path, settings: str):
    """Coverage and raw-elevation MAE per accumulation setting, averaged over
    the dataset's sample poses."""
    world_cfg = load_config(Path(dataset_dir) / "world.cfg")
    world, traj = _regenerate(world_cfg)
    lidar = _lidar(world_cfg)
    sample_ids = sorted(
        int(line.split(",")[0])
        for line in (Path(dataset_dir) / "index.csv").read_text().strip().splitlines()[1:]
    )
    scans = [
        synthworld.simulate_scan(world, pose, lidar, float(t))
        for t, pose in zip(traj.times, traj.poses)
    ]
    rows = []
    for token in settings.split(","):
        token = token.strip()
        if token == "vm":
            policy = voxelmap.AccumulationPolicy(mode="voxel_map")
        else:
            policy = voxelmap.AccumulationPolicy(mode="last_n_scans", n=int(token))
        cov = {"micro": [], "short": []}
        mae = {"micro": [], "short": []}
        for k in sample_ids:
            pose = traj.poses[k]
            vmap = voxelmap.map_from_scans(scans[: k + 1], policy, pose)
            for rid, spec in (("micro", MICRO), ("short", SHORT)):
                vals, valid = voxelmap.raw_elevation(vmap, spec, pose)
                cov[rid].append(100.0 * valid.mean())
                oracle = synthworld.true_elevation_map(world, pose, spec).data["elevation"]
                if valid.any():
                    mae[rid].append(float(np.abs(vals - oracle)[valid].mean()))
        rows.append(
            {
                "setting": token,
                "cov_micro": float(np.mean(cov["micro"])),
                "cov_short": float(np.mean(cov["short"])),
                "mae_micro": float(np.mean(mae["micro"])) if mae["micro"] else math.nan,
                "mae_short": float(np.mean(mae["short"])) if mae["short"] else math.nan,
            }
        )
    return rows


LOSS_ABLATION_SETTINGS = {
    "ul": {"gamma": 0.0},  # unobserved loss only
    "cl": {"alpha": 0.0},  # consistency loss only
    "ul+cl": {},
}


def loss_ablation(cfg, eval_set, econf, settings: str):
    """Train per loss setting and report per-region elevation MAE plus the
    cross-range consistency MAE in meters."""
    rows = []
    base = _loss_weights(cfg)
    for token in settings.split(","):
        token = token.strip()
        if token not in LOSS_ABLATION_SETTINGS:
            raise ConfigError(f"unknown loss ablation {token!r} (use ul, cl, ul+cl)")
        weights = replace(base, **LOSS_ABLATION_SETTINGS[token])
        params = predictor.PredictorParams.seeded(eval_set[0].features.channels, seed=cfg["train.init_seed"])
        tc = predictor.TrainConfig(
            steps=cfg["train.steps"],
            lr_peak=cfg["train.lr_peak"],
            lr_floor=cfg["train.lr_floor"],
            warmup_frac=cfg["train.warmup_frac"],
            weights=weights,
        )
        params, _ = predictor.train(eval_set, params, tc)
        acc = {"micro": {}, "short": {}}
        cons = []
        sums = {rid: {r: [0.0, 0] for r in evalharness.REGION_NAMES} for rid in acc}
        for s in eval_set:
            pair = predictor.predict(s.features, params)
            cons.append(evalharness.consistency_mae_m(pair.short, pair.micro))
            for rid, pred, gt in (("micro", pair.micro, s.gt_micro), ("short", pair.short, s.gt_short)):
                m = evalharness.mae_by_region(
                    pred.data["elevation"], pred.valid["elevation"],
                    gt.data["elevation"], gt.valid["elevation"],
                    gt.data["region"].astype(np.int64),
                )
                for region, (val, cnt) in m.items():
                    if region in sums[rid]:
                        sums[rid][region][0] += val * cnt
                        sums[rid][region][1] += cnt
        values = []
        for rid in ("micro", "short"):
            for region in evalharness.REGION_NAMES:
                tot, cnt = sums[rid][region]
                values.append(tot / cnt if cnt else math.nan)
        values.append(float(np.mean(cons)))
        rows.append({"setting": token, "values": values})
    return rows


def _draw_path(values, valid, grid: GridMap, waypoints):
    img = values.copy()
    for x, y, _, _ in waypoints:
        cell = planner.world_to_cell((x, y), grid.origin, grid.spec)
        if cell:
            img[cell] = img[valid].max() if valid.any() else 1.0
    return img


def cmd_plan(cfg, map_paths, out: Path) -> int:
    start = Pose2p5(cfg["scenario.start_x"], cfg["scenario.start_y"], 0.0, cfg["scenario.start_yaw"])
    goal = (cfg["scenario.goal_x"], cfg["scenario.goal_y"])
    pconf = planner.PlannerConfig(
        headings=cfg["plan.headings"],
        primitive_m=cfg["plan.primitive_m"],
        k_r=cfg["plan.k_r"],
        step_max=cfg["plan.step_max"],
        v_top=cfg["plan.v_top"],
        fatal_risk_threshold=cfg["plan.fatal_threshold"],
        goal_tolerance_m=cfg["plan.goal_tolerance"],
    )
    out.mkdir(parents=True, exist_ok=True)
    for path in map_paths:
        grid = mapio.read_btm1(path)
        result = planner.plan(grid, start, goal, config=pconf)
        stem = Path(path).stem
        with open(out / f"plan_{stem}.csv", "w") as f:
            f.write("x,y,heading,v_max\n")
            for x, y, yaw, v in result.waypoints:
                f.write(f"{x:.6g},{y:.6g},{yaw:.6g},{v:.6g}\n")
        risk, risk_ok = grid.layer("risk")
        mapio.write_pgm(out / f"overlay_{stem}.pgm", _draw_path(risk, risk_ok, grid, result.waypoints), None)
        print(
            f"{stem}: {len(result.waypoints)} waypoints, cost {result.total_cost:.6g}, "
            f"{'reached goal' if result.feasible else 'fallback toward goal'}"
        )
    echo_config(out, cfg)
    return EXIT_OK


def cmd_export(map_path: Path, out: Path, layers=None, fmt: str = "both") -> int:
    grid = mapio.read_btm1(map_path)
    wanted = layers or grid.layer_names
    for name in wanted:
        if name not in grid.layer_names:
            raise FileNotFoundError(
                f"layer {name!r} not in map; available: {', '.join(grid.layer_names)}"
            )
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(map_path).stem
    for name in wanted:
        values, valid = grid.layer(name)
        if fmt in ("pgm", "both"):
            mapio.write_pgm(out / f"{stem}_{name}.pgm", values, valid)
        if fmt in ("csv", "both"):
            mapio.write_layer_csv(out / f"{stem}_{name}.csv", values, valid)
    print(f"exported {len(wanted)} layer(s) from {map_path} -> {out}")
    return EXIT_OK


def build_parser() -> _Parser:
    p = _Parser(prog="bevterrain", description=__doc__)
    p.add_argument("--config", help="key-value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    p.add_argument("--seed", type=int, help="override world.seed")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--threads", type=int, default=1, help="reserved; commands run single-process")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("genworld", help="generate world + trajectory files")
    d = sub.add_parser("dataset", help="build a dataset from a world")
    d.add_argument("--world-dir", help="directory holding world.cfg from genworld")
    t = sub.add_parser("train", help="train the predictor")
    t.add_argument("--dataset", required=True)
    t.add_argument("--single-range", choices=("micro", "short"), default="")
    t.add_argument("--init", help="checkpoint to resume from")
    e = sub.add_parser("eval", help="evaluate systems on a dataset")
    e.add_argument("--dataset", required=True)
    e.add_argument("--checkpoint", action="append", default=[])
    e.add_argument("--accum", default="", help="accumulation sweep, e.g. 1,2,5,10,vm")
    e.add_argument("--loss", default="", help="loss ablation sweep, e.g. ul,cl,ul+cl")
    e.add_argument("--split", default="val", choices=("val", "train", "all"))
    pl = sub.add_parser("plan", help="plan on exported maps")
    pl.add_argument("--map", action="append", required=True, help="BTM1 map file (repeatable)")
    pl.add_argument("--scenario", help="scenario config file (start, goal)")
    x = sub.add_parser("export", help="export BTM1 layers to PGM/CSV")
    x.add_argument("--map", required=True)
    x.add_argument("--layer", action="append", default=[])
    x.add_argument("--format", choices=("pgm", "csv", "both"), default="both")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"world.seed={args.seed}")
        cfg = load_config(args.config, overrides)
        scenario = getattr(args, "scenario", None)
        if scenario:
            cfg = apply_file(cfg, scenario)
        out = Path(args.out)
        if args.command == "genworld":
            return cmd_genworld(cfg, out)
        if args.command == "dataset":
            return cmd_dataset(cfg, out, args.world_dir)
        if args.command == "train":
            return cmd_train(cfg, Path(args.dataset), out, args.single_range, args.init)
        if args.command == "eval":
            split = args.split if args.split != "all" else ""
            return cmd_eval(cfg, Path(args.dataset), out, args.checkpoint, args.accum, args.loss, split)
        if args.command == "plan":
            return cmd_plan(cfg, args.map, out)
        if args.command == "export":
            return cmd_export(Path(args.map), out, args.layer or None, args.format)
        raise UsageError(f"unknown command {args.command}")
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, mapio.MapFormatError, groundtruth.SampleRejected) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (predictor.TrainingDiverged, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
