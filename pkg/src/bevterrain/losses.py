"""Training losses: risk MSE, region-weighted Smooth-L1 elevation loss, and
the cross-range elevation consistency penalty, plus their weighted total.

All elevation losses operate in normalized units (meters / 25) so the
default weights keep their intended balance. Every function returns the
loss value together with analytic gradients w.r.t. the predictions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gridmap import center_crop, crop_window, downsample_micro_to_short

OBSERVED_CONFIDENCE_THRESHOLD = 0.1


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.2  # unobserved-region elevation weight
    mu: float = 2.0  # traversability weight
    lam: float = 2.0  # elevation weight
    gamma: float = 5.0  # cross-range consistency weight

    def __post_init__(self):
        if min(self.alpha, self.mu, self.lam, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    trav_micro: float = 0.0
    trav_short: float = 0.0
    ele_micro: float = 0.0
    ele_short: float = 0.0
    cons: float = 0.0
    total: float = 0.0
    gradients: dict = field(default_factory=dict)

    CSV_HEADER = "step,L_trav_m,L_trav_s,L_ele_m,L_ele_s,L_cons,L_total"

    def csv_row(self, step: int) -> str:
        return (
            f"{step},{self.trav_micro:.6g},{self.trav_short:.6g},{self.ele_micro:.6g},"
            f"{self.ele_short:.6g},{self.cons:.6g},{self.total:.6g}"
        )


def trav_loss(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray):
    """Mean squared risk error over cells with defined ground truth."""
    valid = np.asarray(valid, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("traversability loss over an empty mask")
    res = np.where(valid, pred - gt, 0.0)
    value = float(np.sum(res**2) / n)
    return value, 2.0 * res / n


def smooth_l1(x, beta: float = 1.0):
    """Smooth-L1 value and derivative: quadratic inside |x| < beta, linear outside."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    x = np.asarray(x, dtype=np.float64)
    quad = np.abs(x) < beta
    value = np.where(quad, 0.5 * x**2 / beta, np.abs(x) - 0.5 * beta)
    deriv = np.where(quad, x / beta, np.sign(x))
    return value, deriv


def ele_loss(pred, gt, observed, unobserved, alpha: float, beta: float = 1.0):
    """Region-weighted Smooth-L1 elevation loss (normalized units).

    observed: cells whose ground-truth confidence clears the threshold;
    unobserved: remaining cells with defined ground truth. The unobserved
    term is scaled by alpha (alpha = 0 disables it).
    """
    observed = np.asarray(observed, dtype=bool)
    unobserved = np.asarray(unobserved, dtype=bool)
    if np.any(observed & unobserved):
        raise ValueError("observed/unobserved masks overlap")
    n_o = int(observed.sum())
    n_u = int(unobserved.sum())
    if n_o == 0 and n_u == 0:
        raise ValueError("elevation loss with no ground truth")
    res = np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    value = 0.0
    grad = np.zeros_like(res)
    if n_o:
        v, d = smooth_l1(res[observed], beta)
        value += float(v.sum()) / n_o
        grad[observed] = d / n_o
    if n_u:
        v, d = smooth_l1(res[unobserved], beta)
        value += alpha * float(v.sum()) / n_u
        grad[unobserved] = alpha * d / n_u
    return value, grad


def consistency_loss(short_ele, micro_ele, short_valid=None, micro_valid=None, beta: float = 1.0):
    """Smooth-L1 between center-cropped short and 4x-downsampled micro
    elevation over their overlap; gradients w.r.t. both inputs."""
    short_ele = np.asarray(short_ele, dtype=np.float64)
    micro_ele = np.asarray(micro_ele, dtype=np.float64)
    if short_valid is None:
        short_valid = np.ones_like(short_ele, dtype=bool)
    if micro_valid is None:
        micro_valid = np.ones_like(micro_ele, dtype=bool)
    ns = short_ele.shape[0]
    if micro_ele.shape[0] != 2 * ns:
        raise ValueError(f"micro side {micro_ele.shape[0]} is not twice short side {ns}")

    cropped = center_crop(short_ele)
    crop_ok = center_crop(short_valid)
    down, down_ok = downsample_micro_to_short(micro_ele, micro_valid)
    both = crop_ok & down_ok
    n = int(both.sum())
    if n == 0:
        raise ValueError("consistency loss with empty overlap")
    res = np.where(both, cropped - down, 0.0)
    v, d = smooth_l1(res, beta)
    value = float(v[both].sum()) / n
    d = np.where(both, d, 0.0) / n

    grad_short = np.zeros_like(short_ele)
    w = crop_window(ns)
    grad_short[w, w] = d
    # each valid micro cell contributed 1/m to its block mean
    m = micro_valid.reshape(ns // 2, 4, ns // 2, 4).sum(axis=(1, 3)).astype(np.float64)
    scale = np.zeros_like(m)
    np.divide(d, m, out=scale, where=m > 0)
    grad_micro = np.where(micro_valid, -np.repeat(np.repeat(scale, 4, 0), 4, 1), 0.0)
    return value, grad_short, grad_micro


def total_loss(
    trav_micro,
    trav_short,
    ele_micro,
    ele_short,
    cons,
    weights: LossWeights,
):
    """Weighted combination of the per-range and consistency terms.

    Each argument is a (value, gradient...) tuple as returned by the loss
    functions; the combined gradients carry the exact weight linearity.
    """
    values = [trav_micro[0], trav_short[0], ele_micro[0], ele_short[0], cons[0]]
    if not all(np.isfinite(values)):
        raise ValueError(f"non-finite loss components {values}")
    total = (
        weights.mu * (trav_micro[0] + trav_short[0])
        + weights.lam * (ele_micro[0] + ele_short[0])
        + weights.gamma * cons[0]
    )
    gradients = {
        "risk_micro": weights.mu * trav_micro[1],
        "risk_short": weights.mu * trav_short[1],
        "ele_micro": weights.lam * ele_micro[1] + weights.gamma * cons[2],
        "ele_short": weights.lam * ele_short[1] + weights.gamma * cons[1],
    }
    return LossReport(
        trav_micro=trav_micro[0],
        trav_short=trav_short[0],
        ele_micro=ele_micro[0],
        ele_short=ele_short[0],
        cons=cons[0],
        total=float(total),
        gradients=gradients,
    )
