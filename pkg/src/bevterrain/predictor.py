"""Hierarchical multi-range prediction head.

The short head is a per-cell affine map (optionally followed by a small
smoothing convolution) over the fused BEV features. The micro path crops
the features and the short head's pre-output maps to the central half
extent, concatenates them, applies its own affine map, upsamples 4x with
nearest neighbour, and refines with a 3x3 kernel. Channel 0 is risk
(clamped to [0, 1]), channel 1 is normalized elevation (de-rescaled to
meters on output). All gradients are reverse-mode and analytic.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import losses as L
from .bevproject import BevFeatureGrid
from .gridmap import (
    GridMap,
    MICRO,
    RangeSpec,
    center_crop,
    crop_window,
    rescale_elevation,
    unrescale_elevation,
)


def micro_spec_for(short_spec: RangeSpec) -> RangeSpec:
    """Fine-range spec paired with a short-range spec (half extent, 1/4 cell)."""
    extent = short_spec.extent_m / 2.0
    res = short_spec.resolution_m / 4.0
    if (extent, res) == (MICRO.extent_m, MICRO.resolution_m):
        return MICRO
    return RangeSpec(f"{short_spec.id}-fine", extent, res)


def delta_kernel(k: int = 3, channels: int = 2) -> np.ndarray:
    """Identity convolution kernel."""
    kern = np.zeros((k, k, channels, channels))
    for c in range(channels):
        kern[k // 2, k // 2, c, c] = 1.0
    return kern


def conv2d_same(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded same-size convolution, kernel (k, k, Cin, Cout)."""
    k = kernel.shape[0]
    p = k // 2
    h, w, _ = x.shape
    xp = np.pad(x, ((p, p), (p, p), (0, 0)))
    out = np.zeros((h, w, kernel.shape[3]))
    for di in range(k):
        for dj in range(k):
            out += xp[di : di + h, dj : dj + w] @ kernel[di, dj]
    return out


def conv2d_same_backward(x: np.ndarray, kernel: np.ndarray, grad_out: np.ndarray):
    """Gradients of conv2d_same w.r.t. input and kernel."""
    k = kernel.shape[0]
    p = k // 2
    h, w, _ = x.shape
    xp = np.pad(x, ((p, p), (p, p), (0, 0)))
    gxp = np.zeros_like(xp)
    gk = np.zeros_like(kernel)
    for di in range(k):
        for dj in range(k):
            gk[di, dj] = np.einsum("ijc,ijd->cd", xp[di : di + h, dj : dj + w], grad_out)
            gxp[di : di + h, dj : dj + w] += grad_out @ kernel[di, dj].T
    return gxp[p : p + h, p : p + w], gk


def upsample4(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 4, axis=0), 4, axis=1)


def upsample4_backward(grad: np.ndarray) -> np.ndarray:
    h, w = grad.shape[0] // 4, grad.shape[1] // 4
    return grad.reshape(h, 4, w, 4, -1).sum(axis=(1, 3))


@dataclass
class PredictorParams:
    """Full two-range head: short affine (+ optional smoothing conv), micro
    affine over the cropped concat, and the 3x3 refinement kernel."""

    w_short: np.ndarray  # (C, 2)
    b_short: np.ndarray  # (2,)
    w_micro: np.ndarray  # (C + 2, 2)
    b_micro: np.ndarray  # (2,)
    refine_kernel: np.ndarray  # (3, 3, 2, 2)
    smooth_kernel: Optional[np.ndarray] = None  # (k, k, 2, 2)

    kind = "full"

    @property
    def channels(self) -> int:
        return self.w_short.shape[0]

    def arrays(self) -> dict:
        out = {
            "w_short": self.w_short,
            "b_short": self.b_short,
            "w_micro": self.w_micro,
            "b_micro": self.b_micro,
            "refine_kernel": self.refine_kernel,
        }
        if self.smooth_kernel is not None:
            out["smooth_kernel"] = self.smooth_kernel
        return out

    def validate(self, channels: int) -> None:
        if self.channels != channels:
            raise ValueError(f"params expect {self.channels} channels, features have {channels}")
        if self.w_micro.shape[0] != channels + 2:
            raise ValueError("micro head width does not match channels + 2")
        for a in self.arrays().values():
            if not np.all(np.isfinite(a)):
                raise ValueError("non-finite parameter values")

    @classmethod
    def zeros(cls, channels: int, refine_identity: bool = True):
        return cls(
            w_short=np.zeros((channels, 2)),
            b_short=np.zeros(2),
            w_micro=np.zeros((channels + 2, 2)),
            b_micro=np.zeros(2),
            refine_kernel=delta_kernel() if refine_identity else np.zeros((3, 3, 2, 2)),
        )

    @classmethod
    def seeded(cls, channels: int, seed: int = 0, scale: float = 0.01):
        rng = np.random.default_rng(seed)
        p = cls.zeros(channels)
        p.w_short = rng.normal(0.0, scale, p.w_short.shape)
        p.w_micro = rng.normal(0.0, scale, p.w_micro.shape)
        return p


@dataclass
class SingleRangeParams:
    """Head for one range only; the micro variant runs on cropped features."""

    range_id: str  # "micro" | "short"
    w: np.ndarray  # (C, 2)
    b: np.ndarray  # (2,)
    refine_kernel: Optional[np.ndarray] = None  # micro only

    @property
    def kind(self) -> str:
        return self.range_id

    @property
    def channels(self) -> int:
        return self.w.shape[0]

    def arrays(self) -> dict:
        out = {"w": self.w, "b": self.b}
        if self.refine_kernel is not None:
            out["refine_kernel"] = self.refine_kernel
        return out

    def validate(self, channels: int) -> None:
        if self.channels != channels:
            raise ValueError(f"params expect {self.channels} channels, features have {channels}")
        if self.range_id == "micro" and self.refine_kernel is None:
            raise ValueError("micro head needs a refinement kernel")

    @classmethod
    def zeros(cls, channels: int, range_id: str):
        if range_id not in ("micro", "short"):
            raise ValueError(f"unknown range {range_id!r}")
        return cls(
            range_id=range_id,
            w=np.zeros((channels, 2)),
            b=np.zeros(2),
            refine_kernel=delta_kernel() if range_id == "micro" else None,
        )


@dataclass
class PredictionPair:
    micro: GridMap
    short: GridMap


def _clip01(x):
    return np.clip(x, 0.0, 1.0)


def _forward_full(features: BevFeatureGrid, params: PredictorParams) -> dict:
    params.validate(features.channels)
    f = features.features.astype(np.float64)
    s0 = f @ params.w_short + params.b_short
    s = conv2d_same(s0, params.smooth_kernel) if params.smooth_kernel is not None else s0
    fc = center_crop(f)
    sc = center_crop(s)
    concat = np.concatenate([fc, sc], axis=-1)
    m1 = concat @ params.w_micro + params.b_micro
    u = upsample4(m1)
    m3 = conv2d_same(u, params.refine_kernel)
    return {"f": f, "s0": s0, "s": s, "concat": concat, "m1": m1, "u": u, "m3": m3}


def _forward_single(features: BevFeatureGrid, params: SingleRangeParams) -> dict:
    params.validate(features.channels)
    f = features.features.astype(np.float64)
    if params.range_id == "short":
        s = f @ params.w + params.b
        return {"f": f, "s": s}
    fc = center_crop(f)
    m1 = fc @ params.w + params.b
    u = upsample4(m1)
    m3 = conv2d_same(u, params.refine_kernel)
    return {"f": f, "fc": fc, "m1": m1, "u": u, "m3": m3}


def _grid_from_raw(raw: np.ndarray, spec: RangeSpec, features: BevFeatureGrid) -> GridMap:
    g = GridMap(spec, features.origin, features.timestamp)
    g.add_layer("risk", _clip01(raw[..., 0]))
    g.add_layer("elevation", unrescale_elevation(raw[..., 1]))
    return g


def predict(features: BevFeatureGrid, params: PredictorParams) -> PredictionPair:
    """Short and micro maps from one fused feature grid."""
    cache = _forward_full(features, params)
    short = _grid_from_raw(cache["s"], features.spec, features)
    micro = _grid_from_raw(cache["m3"], micro_spec_for(features.spec), features)
    return PredictionPair(micro=micro, short=short)


def predict_single_range(features: BevFeatureGrid, params: SingleRangeParams, range_id: Optional[str] = None) -> GridMap:
    """One-range prediction; micro runs on the center-cropped feature grid."""
    if range_id is not None and range_id != params.range_id:
        raise ValueError(f"params are for {params.range_id!r}, not {range_id!r}")
    cache = _forward_single(features, params)
    if params.range_id == "short":
        return _grid_from_raw(cache["s"], features.spec, features)
    return _grid_from_raw(cache["m3"], micro_spec_for(features.spec), features)


def _gt_masks(gt: GridMap):
    ele, ele_valid = gt.layer("elevation")
    risk, risk_valid = gt.layer("risk")
    conf, _ = gt.layer("confidence")
    observed = ele_valid & (conf > L.OBSERVED_CONFIDENCE_THRESHOLD)
    unobserved = ele_valid & ~observed
    return ele, risk, risk_valid, observed, unobserved


def _loss_terms(cache: dict, gt_micro, gt_short, weights: L.LossWeights, kind: str):
    """Loss components on the raw normalized outputs, plus their gradients
    w.r.t. the raw (pre-clamp) risk and elevation channels."""
    terms = {}
    raw_grads = {}

    def range_terms(raw, gt, tag):
        ele, risk, risk_valid, obs, unobs = _gt_masks(gt)
        trav = L.trav_loss(_clip01(raw[..., 0]), np.where(risk_valid, risk, 0.0), risk_valid)
        elev = L.ele_loss(raw[..., 1], rescale_elevation(ele), obs, unobs, weights.alpha)
        clip_pass = (raw[..., 0] >= 0.0) & (raw[..., 0] <= 1.0)
        raw_grads[f"risk_{tag}"] = (trav[1] * clip_pass, None)
        raw_grads[f"ele_{tag}"] = (elev[1], None)
        terms[f"trav_{tag}"] = trav
        terms[f"ele_{tag}"] = elev

    if kind in ("full", "short"):
        range_terms(cache["s"], gt_short, "short")
    if kind in ("full", "micro"):
        range_terms(cache["m3"], gt_micro, "micro")
    if kind == "full":
        terms["cons"] = L.consistency_loss(cache["s"][..., 1], cache["m3"][..., 1])
    else:
        terms["cons"] = (0.0, None, None)
    return terms, raw_grads


def _assemble_report(terms, weights: L.LossWeights, kind: str) -> L.LossReport:
    get = lambda k: terms.get(k, (0.0,))[0]
    total = (
        weights.mu * (get("trav_micro") + get("trav_short"))
        + weights.lam * (get("ele_micro") + get("ele_short"))
        + weights.gamma * get("cons")
    )
    if not math.isfinite(total):
        raise ValueError("non-finite loss")
    return L.LossReport(
        trav_micro=get("trav_micro"),
        trav_short=get("trav_short"),
        ele_micro=get("ele_micro"),
        ele_short=get("ele_short"),
        cons=get("cons"),
        total=float(total),
    )


def parameter_gradients(
    features: BevFeatureGrid,
    params,
    gt_micro: GridMap,
    gt_short: GridMap,
    weights: Optional[L.LossWeights] = None,
) -> L.LossReport:
    """Analytic gradients of the weighted total loss w.r.t. every parameter."""
    if weights is None:
        weights = L.LossWeights()
    kind = params.kind
    cache = _forward_full(features, params) if kind == "full" else _forward_single(features, params)
    terms, raw_grads = _loss_terms(cache, gt_micro, gt_short, weights, kind)
    report = _assemble_report(terms, weights, kind)

    if kind == "full":
        ds = np.zeros_like(cache["s"])
        ds[..., 0] = weights.mu * raw_grads["risk_short"][0]
        ds[..., 1] = weights.lam * raw_grads["ele_short"][0] + weights.gamma * terms["cons"][1]
        dm3 = np.zeros_like(cache["m3"])
        dm3[..., 0] = weights.mu * raw_grads["risk_micro"][0]
        dm3[..., 1] = weights.lam * raw_grads["ele_micro"][0] + weights.gamma * terms["cons"][2]

        du, d_refine = conv2d_same_backward(cache["u"], params.refine_kernel, dm3)
        dm1 = upsample4_backward(du)
        d_w_micro = np.einsum("ijc,ijd->cd", cache["concat"], dm1)
        d_b_micro = dm1.sum(axis=(0, 1))
        dconcat = dm1 @ params.w_micro.T
        c = params.channels
        w = crop_window(cache["s"].shape[0])
        ds[w, w] += dconcat[..., c:]
        if params.smooth_kernel is not None:
            ds0, d_smooth = conv2d_same_backward(cache["s0"], params.smooth_kernel, ds)
        else:
            ds0, d_smooth = ds, None
        grads = {
            "w_short": np.einsum("ijc,ijd->cd", cache["f"], ds0),
            "b_short": ds0.sum(axis=(0, 1)),
            "w_micro": d_w_micro,
            "b_micro": d_b_micro,
            "refine_kernel": d_refine,
        }
        if d_smooth is not None:
            grads["smooth_kernel"] = d_smooth
    elif kind == "short":
        ds = np.zeros_like(cache["s"])
        ds[..., 0] = weights.mu * raw_grads["risk_short"][0]
        ds[..., 1] = weights.lam * raw_grads["ele_short"][0]
        grads = {
            "w": np.einsum("ijc,ijd->cd", cache["f"], ds),
            "b": ds.sum(axis=(0, 1)),
        }
    else:
        dm3 = np.zeros_like(cache["m3"])
        dm3[..., 0] = weights.mu * raw_grads["risk_micro"][0]
        dm3[..., 1] = weights.lam * raw_grads["ele_micro"][0]
        du, d_refine = conv2d_same_backward(cache["u"], params.refine_kernel, dm3)
        dm1 = upsample4_backward(du)
        grads = {
            "w": np.einsum("ijc,ijd->cd", cache["fc"], dm1),
            "b": dm1.sum(axis=(0, 1)),
            "refine_kernel": d_refine,
        }
    report.gradients = grads
    return report


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss at step {step}: {value}")
        self.step = step
        self.value = value


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    lr_peak: float = 5e-4
    lr_floor: float = 5e-6
    warmup_frac: float = 0.3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weights: L.LossWeights = field(default_factory=L.LossWeights)


def one_cycle_lr(step: int, config: TrainConfig) -> float:
    """Linear warmup to the peak over the first 30% of steps, then cosine
    decay to the floor."""
    warm = max(1, int(round(config.steps * config.warmup_frac)))
    if step < warm:
        return config.lr_floor + (config.lr_peak - config.lr_floor) * (step + 1) / warm
    span = max(1, config.steps - warm)
    prog = (step - warm) / span
    return config.lr_floor + (config.lr_peak - config.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * prog))


def train(dataset, params, config: TrainConfig = TrainConfig()):
    """Adam over the dataset, cycling samples in order. Returns the trained
    params and the per-step LossReport curve."""
    if not dataset:
        raise ValueError("empty training dataset")
    arrays = params.arrays()
    m = {k: np.zeros_like(v) for k, v in arrays.items()}
    v = {k: np.zeros_like(val) for k, val in arrays.items()}
    history = []
    for step in range(config.steps):
        sample = dataset[step % len(dataset)]
        report = parameter_gradients(sample.features, params, sample.gt_micro, sample.gt_short, config.weights)
        if not math.isfinite(report.total):
            raise TrainingDiverged(step, report.total)
        lr = one_cycle_lr(step, config)
        t = step + 1
        for key, arr in arrays.items():
            g = report.gradients[key]
            m[key] = config.beta1 * m[key] + (1.0 - config.beta1) * g
            v[key] = config.beta2 * v[key] + (1.0 - config.beta2) * g * g
            mhat = m[key] / (1.0 - config.beta1**t)
            vhat = v[key] / (1.0 - config.beta2**t)
            arr -= lr * mhat / (np.sqrt(vhat) + config.eps)
        history.append(report)
    return params, history


CHECKPOINT_MAGIC = b"BTCP"


def manifest_hash(channel_names) -> str:
    return hashlib.sha256(json.dumps(list(channel_names)).encode()).hexdigest()[:16]


def save_checkpoint(path, params, channel_names) -> None:
    """Checkpoint: kind + channel manifest hash + named float32 blobs."""
    arrays = params.arrays()
    header = {
        "kind": params.kind,
        "manifest": manifest_hash(channel_names),
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
    }
    if isinstance(params, SingleRangeParams):
        header["range_id"] = params.range_id
    blob = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for key in sorted(arrays):
            f.write(arrays[key].astype("<f4").tobytes())


def load_checkpoint(path, channel_names=None):
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        (n,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(n).decode())
        if channel_names is not None and header["manifest"] != manifest_hash(channel_names):
            raise ValueError("checkpoint manifest hash does not match the feature channels")
        arrays = {}
        for key in sorted(header["shapes"]):
            shape = tuple(header["shapes"][key])
            count = int(np.prod(shape))
            arrays[key] = np.frombuffer(f.read(4 * count), dtype="<f4").astype(np.float64).reshape(shape)
    if header["kind"] == "full":
        return PredictorParams(
            w_short=arrays["w_short"],
            b_short=arrays["b_short"],
            w_micro=arrays["w_micro"],
            b_micro=arrays["b_micro"],
            refine_kernel=arrays["refine_kernel"],
            smooth_kernel=arrays.get("smooth_kernel"),
        )
    return SingleRangeParams(
        range_id=header["range_id"],
        w=arrays["w"],
        b=arrays["b"],
        refine_kernel=arrays.get("refine_kernel"),
    )
