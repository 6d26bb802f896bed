"""Key-value run configuration: file parsing, defaults, overrides, and the
effective-config echo every command writes next to its outputs."""
from __future__ import annotations

import math
from pathlib import Path

DEFAULTS = {
    # world generation
    "world.seed": 0,
    "world.half_extent": 150.0,
    "world.base_slope_x": 0.0,
    "world.base_slope_y": 0.0,
    "world.n_hills": 6,
    "world.hill_amp_min": -4.0,
    "world.hill_amp_max": 6.0,
    "world.hill_sigma_min": 12.0,
    "world.hill_sigma_max": 35.0,
    "world.n_trees": 12,
    "world.tree_radius_min": 0.3,
    "world.tree_radius_max": 0.8,
    "world.tree_height_min": 3.0,
    "world.tree_height_max": 8.0,
    "world.n_rocks": 6,
    "world.rock_size_min": 0.6,
    "world.rock_size_max": 2.0,
    "world.rock_height_min": 0.3,
    "world.rock_height_max": 1.2,
    "world.corridor_half_width": 4.0,
    # trajectory
    "traj.start_x": -60.0,
    "traj.start_y": 0.0,
    "traj.end_x": 60.0,
    "traj.end_y": 0.0,
    "traj.speed": 6.0,
    "traj.dt": 1.0,
    "traj.v_max": 12.0,
    "traj.sway": 3.0,
    # lidar
    "lidar.rings": 32,
    "lidar.azimuths": 360,
    "lidar.max_range": 120.0,
    "lidar.step": 0.05,
    "lidar.mount_height": 2.0,
    # cameras
    "camera.width": 64,
    "camera.height": 48,
    "camera.pitch": 0.15,
    "camera.downsample": 8,
    # dataset
    "dataset.stride": 1,
    "dataset.window_s": 60.0,
    "dataset.dem_pitch": 1.0,
    "dataset.fitness_threshold": 0.6,
    "dataset.c_img": 8,
    "dataset.c_pts": 16,
    "dataset.featurizer_seed": 7,
    "dataset.depth_mode": "oracle",
    "dataset.gnss_xy": 0.0,
    "dataset.gnss_z": 0.0,
    "dataset.gnss_yaw": 0.0,
    "dataset.train_frac": 0.8,
    "dataset.accum_mode": "voxel_map",
    "dataset.accum_n": 1,
    # training
    "train.steps": 200,
    "train.lr_peak": 5e-4,
    "train.lr_floor": 5e-6,
    "train.warmup_frac": 0.3,
    "train.init_seed": 0,
    # loss weights
    "loss.alpha": 0.2,
    "loss.mu": 2.0,
    "loss.lambda": 2.0,
    "loss.gamma": 5.0,
    # evaluation
    "eval.fatal_threshold": 0.9,
    # planner
    "plan.k_r": 10.0,
    "plan.primitive_m": 4.0,
    "plan.headings": 16,
    "plan.step_max": 0.5,
    "plan.v_top": 12.0,
    "plan.goal_tolerance": 2.0,
    "plan.fatal_threshold": 0.9,
    # scenario (cmd_plan)
    "scenario.start_x": 0.0,
    "scenario.start_y": 0.0,
    "scenario.start_yaw": 0.0,
    "scenario.goal_x": 50.0,
    "scenario.goal_y": 0.0,
}


class ConfigError(ValueError):
    pass


def parse_kv_text(text: str) -> dict:
    """`key = value` lines; '#' starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        return str(value).lower() in ("1", "true", "yes")
    try:
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            f = float(value)
            if not math.isfinite(f):
                raise ValueError
            return f
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot parse {value!r} as {type(default).__name__}") from None
    return str(value)


def load_config(path=None, overrides=None) -> dict:
    """Defaults, overlaid by a config file, overlaid by key=value overrides.
    Unknown keys are rejected."""
    cfg = dict(DEFAULTS)
    layers = []
    if path is not None:
        layers.append(parse_kv_text(Path(path).read_text()))
    if overrides:
        parsed = {}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            k, v = item.split("=", 1)
            parsed[k.strip()] = v.strip()
        layers.append(parsed)
    for layer in layers:
        for key, value in layer.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown configuration key {key!r}")
            cfg[key] = _coerce(key, value, DEFAULTS[key])
    return cfg


def apply_file(cfg: dict, path) -> dict:
    """Overlay a key-value file onto an existing configuration."""
    out = dict(cfg)
    for key, value in parse_kv_text(Path(path).read_text()).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key {key!r}")
        out[key] = _coerce(key, value, DEFAULTS[key])
    return out


def format_config(cfg: dict) -> str:
    lines = []
    for key in sorted(cfg):
        v = cfg[key]
        if isinstance(v, float):
            lines.append(f"{key} = {v:.6g}")
        else:
            lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def echo_config(out_dir, cfg: dict, name: str = "effective_config.txt") -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(format_config(cfg))
