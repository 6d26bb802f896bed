"""File formats: BTM1 grid maps, PGM/CSV layer exports, DEM rasters,
scan and voxel dumps, featurizer weights, channel manifests."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .gridmap import GridMap, Pose2p5, RangeSpec

BTM_MAGIC = b"BTM1"


class MapFormatError(ValueError):
    pass


def _write_str(f, s: str) -> None:
    b = s.encode("utf-8")
    if len(b) > 255:
        raise MapFormatError(f"name too long: {s!r}")
    f.write(struct.pack("<B", len(b)))
    f.write(b)


def _read_str(f) -> str:
    (n,) = struct.unpack("<B", f.read(1))
    return f.read(n).decode("utf-8")


def write_btm1(path, grid: GridMap) -> None:
    """Binary map dump: header, then per layer float32 values + validity bits."""
    n = grid.spec.cells
    names = grid.layer_names
    with open(path, "wb") as f:
        f.write(BTM_MAGIC)
        _write_str(f, grid.spec.id)
        f.write(struct.pack("<ddII", grid.spec.extent_m, grid.spec.resolution_m, n, len(names)))
        o = grid.origin
        f.write(struct.pack("<5d", o.x, o.y, o.z, o.yaw, grid.timestamp))
        for name in names:
            _write_str(f, name)
        for name in names:
            values, valid = grid.layer(name)
            out = np.where(valid, values, 0.0).astype("<f4")
            f.write(out.tobytes())
            f.write(np.packbits(valid.reshape(-1), bitorder="little").tobytes())


def read_btm1(path) -> GridMap:
    with open(path, "rb") as f:
        if f.read(4) != BTM_MAGIC:
            raise MapFormatError(f"{path}: not a BTM1 file")
        range_id = _read_str(f)
        extent, resolution, n, nlayers = struct.unpack("<ddII", f.read(24))
        x, y, z, yaw, ts = struct.unpack("<5d", f.read(40))
        spec = RangeSpec(range_id, extent, resolution)
        if spec.cells != n:
            raise MapFormatError(f"{path}: cell count {n} inconsistent with header")
        names = [_read_str(f) for _ in range(nlayers)]
        grid = GridMap(spec, Pose2p5(x, y, z, yaw), ts)
        nbits = (n * n + 7) // 8
        for name in names:
            values = np.frombuffer(f.read(4 * n * n), dtype="<f4").astype(np.float64).reshape(n, n)
            bits = np.frombuffer(f.read(nbits), dtype=np.uint8)
            valid = np.unpackbits(bits, bitorder="little")[: n * n].astype(bool).reshape(n, n)
            grid.add_layer(name, values, valid)
    return grid


def write_pgm(path, values: np.ndarray, valid=None) -> None:
    """8-bit P5 export, min-max scaled over valid cells; invalid cells map to 0."""
    values = np.asarray(values, dtype=np.float64)
    if valid is None:
        valid = np.ones_like(values, dtype=bool)
    img = np.zeros(values.shape, dtype=np.uint8)
    v = values[valid]
    if v.size:
        lo, hi = v.min(), v.max()
        if hi > lo:
            img[valid] = np.round((values[valid] - lo) / (hi - lo) * 255.0).astype(np.uint8)
        else:
            img[valid] = 128
    with open(path, "wb") as f:
        f.write(f"P5\n{values.shape[1]} {values.shape[0]}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise MapFormatError(f"{path}: not a P5 PGM")
    w, h = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def write_layer_csv(path, values: np.ndarray, valid=None) -> None:
    values = np.asarray(values, dtype=np.float64)
    if valid is None:
        valid = np.ones_like(values, dtype=bool)
    with open(path, "w") as f:
        for row, vrow in zip(values, valid):
            f.write(",".join(f"{x:.6g}" if ok else "nan" for x, ok in zip(row, vrow)))
            f.write("\n")


def write_weights(path, w: np.ndarray, b: np.ndarray) -> None:
    """Featurizer weights: dimension header, then float32 matrix and bias."""
    w = np.asarray(w, dtype="<f4")
    b = np.asarray(b, dtype="<f4")
    if w.ndim != 2 or b.shape != (w.shape[1],):
        raise MapFormatError(f"weights {w.shape} and bias {b.shape} inconsistent")
    with open(path, "wb") as f:
        f.write(struct.pack("<II", w.shape[0], w.shape[1]))
        f.write(w.tobytes())
        f.write(b.tobytes())


def read_weights(path):
    with open(path, "rb") as f:
        n_in, n_out = struct.unpack("<II", f.read(8))
        w = np.frombuffer(f.read(4 * n_in * n_out), dtype="<f4").astype(np.float64).reshape(n_in, n_out)
        b = np.frombuffer(f.read(4 * n_out), dtype="<f4").astype(np.float64)
    return w, b


def write_manifest(path, channel_names) -> None:
    """Channel-layout manifest, written next to every feature dump."""
    with open(path, "w") as f:
        json.dump({"channels": list(channel_names)}, f, indent=1)
        f.write("\n")


def read_manifest(path):
    with open(path) as f:
        return json.load(f)["channels"]


def write_scan_xyz(path, points: np.ndarray) -> None:
    """Raw binary xyz float32 records."""
    np.asarray(points, dtype="<f4").reshape(-1, 3).tofile(path)


def read_scan_xyz(path) -> np.ndarray:
    data = np.fromfile(path, dtype="<f4")
    if data.size % 3:
        raise MapFormatError(f"{path}: size is not a multiple of xyz records")
    return data.astype(np.float64).reshape(-1, 3)


_VOXEL_REC = struct.Struct("<3iI5f")


def write_voxel_dump(path, voxels) -> None:
    """Records of (kx, ky, kz, count, centroid xyz, min_z, max_z)."""
    with open(path, "wb") as f:
        for key in sorted(voxels):
            st = voxels[key]
            cx, cy, cz = st.centroid
            f.write(_VOXEL_REC.pack(key[0], key[1], key[2], st.count, cx, cy, cz, st.min_z, st.max_z))


def read_voxel_dump(path):
    out = []
    with open(path, "rb") as f:
        while True:
            buf = f.read(_VOXEL_REC.size)
            if not buf:
                break
            kx, ky, kz, count, cx, cy, cz, mn, mx = _VOXEL_REC.unpack(buf)
            out.append(((kx, ky, kz), count, (cx, cy, cz), mn, mx))
    return out


def write_dem(path, origin_x: float, origin_y: float, pitch: float, values: np.ndarray) -> None:
    """Plain elevation raster: text header (origin, pitch, dims), float32 rows."""
    values = np.asarray(values, dtype="<f4")
    with open(path, "wb") as f:
        f.write(f"DEM1 {origin_x!r} {origin_y!r} {pitch!r} {values.shape[0]} {values.shape[1]}\n".encode("ascii"))
        f.write(values.tobytes())


def read_dem(path):
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").split()
        if header[0] != "DEM1":
            raise MapFormatError(f"{path}: not a DEM raster")
        ox, oy, pitch = float(header[1]), float(header[2]), float(header[3])
        rows, cols = int(header[4]), int(header[5])
        values = np.frombuffer(f.read(4 * rows * cols), dtype="<f4").astype(np.float64).reshape(rows, cols)
    return ox, oy, pitch, values
