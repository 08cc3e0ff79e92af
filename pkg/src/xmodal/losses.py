"""Training objectives: coarse L1, confidence targets/loss, SILog, total.

All losses are means over valid pixels, so their scale is independent of
mask size. Confidence targets are derived from detached coarse predictions:
the confidence loss trains only the confidence predictor, and the coarse
loss trains only the coarse networks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import DepthMap

LOG_FLOOR = 1e-6


@dataclass(frozen=True)
class LossWeights:
    """Weights of the combined objective."""

    lambda_si: float = 0.5
    beta: float = 0.8
    gamma: float = 0.65

    def __post_init__(self):
        if not (0.0 < self.lambda_si <= 1.0):
            raise ValueError("lambda_si must lie in (0, 1]")
        if self.beta <= 0 or self.gamma <= 0:
            raise ValueError("beta and gamma must be positive")


@dataclass
class ErrorMaps:
    """Absolute depth errors of both modalities under a shared mask."""

    e_rgb: np.ndarray
    e_thr: np.ndarray
    valid: np.ndarray


def _as_map(t: Tensor | np.ndarray) -> np.ndarray:
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    return data.reshape(data.shape[-2:])


def _map_tensor(t: Tensor, shape: tuple[int, int]) -> Tensor:
    if t.data.shape[-2:] != shape:
        raise ValueError(f"prediction extents {t.shape} do not match {shape}")
    return ad.reshape(t, shape)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of x over the True entries of mask; errors on an empty mask."""
    count = int(mask.sum())
    if count == 0:
        raise ValueError("mask selects zero pixels")
    return ad.tensor_sum(x * Tensor(mask.astype(np.float64))) * (1.0 / count)


def coarse_loss(d_rgb: Tensor, d_thr_warped: Tensor, d_gt: DepthMap,
                thr_valid: np.ndarray | None = None) -> Tensor:
    """Mean L1 error of each coarse prediction against ground truth."""
    shape = d_gt.shape
    pr = _map_tensor(d_rgb, shape)
    pt = _map_tensor(d_thr_warped, shape)
    gt = Tensor(d_gt.values)
    mask_rgb = d_gt.valid
    mask_thr = d_gt.valid if thr_valid is None else (d_gt.valid & thr_valid)
    term_rgb = masked_mean(ad.absolute(pr - gt), mask_rgb)
    term_thr = masked_mean(ad.absolute(pt - gt), mask_thr)
    return term_rgb + term_thr


def error_maps(d_gt: DepthMap, d_rgb: Tensor | np.ndarray,
               d_thr_warped: Tensor | np.ndarray,
               thr_valid: np.ndarray | None = None) -> ErrorMaps:
    """Per-pixel absolute errors on detached predictions."""
    shape = d_gt.shape
    pr = _as_map(d_rgb)
    pt = _as_map(d_thr_warped)
    if pr.shape != shape or pt.shape != shape:
        raise ValueError("prediction extents do not match ground truth")
    valid = d_gt.valid.copy()
    if thr_valid is not None:
        valid &= thr_valid
    e_rgb = np.where(valid, np.abs(d_gt.values - pr), 0.0)
    e_thr = np.where(valid, np.abs(d_gt.values - pt), 0.0)
    return ErrorMaps(e_rgb=e_rgb, e_thr=e_thr, valid=valid)


def confidence_targets(errs: ErrorMaps) -> tuple[np.ndarray, np.ndarray]:
    """Softmax-of-errors targets: high own error means low own confidence."""
    if not errs.valid.any():
        raise ValueError("error maps have no valid pixels")
    m = np.maximum(errs.e_rgb, errs.e_thr)
    a = np.exp(errs.e_rgb - m)
    b = np.exp(errs.e_thr - m)
    t_rgb = b / (a + b)
    return t_rgb, 1.0 - t_rgb


def confidence_loss(c_rgb: Tensor, targets: tuple[np.ndarray, np.ndarray],
                    valid: np.ndarray) -> Tensor:
    """Mean L1 distance of both confidence maps from their targets."""
    t_rgb, t_thr = targets
    shape = t_rgb.shape
    c = _map_tensor(c_rgb, shape)
    c_thr = 1.0 - c
    term = ad.absolute(c - Tensor(t_rgb)) + ad.absolute(c_thr - Tensor(t_thr))
    return masked_mean(term, valid)


def silog_loss(d: Tensor, d_gt: DepthMap, lambda_si: float = 0.5) -> Tensor:
    """Scale-invariant logarithmic loss over valid pixels.

    sqrt(mean(delta^2) - lambda * mean(delta)^2) with delta the per-pixel
    log difference between ground truth and prediction. Predictions are
    floored at 1e-6 m before the log.
    """
    shape = d_gt.shape
    pred = _map_tensor(d, shape)
    k = int(d_gt.valid.sum())
    if k == 0:
        raise ValueError("ground truth has no valid pixels")
    if np.any(pred.data[d_gt.valid] <= 0):
        raise ValueError("prediction must be positive on valid pixels")
    mask = Tensor(d_gt.valid.astype(np.float64))
    log_gt = Tensor(np.log(np.where(d_gt.valid, d_gt.values, 1.0)))
    delta = (log_gt - ad.log(ad.clamp_min(pred, LOG_FLOOR))) * mask
    mean_sq = ad.tensor_sum(delta * delta) * (1.0 / k)
    mean = ad.tensor_sum(delta) * (1.0 / k)
    return ad.sqrt(ad.clamp_min(mean_sq - mean * mean * lambda_si, 1e-30))


def total_loss(l_coa: Tensor, l_con: Tensor, l_silog: Tensor,
               w: LossWeights) -> Tensor:
    """Weighted combination of the three objectives."""
    for term in (l_coa, l_con, l_silog):
        if term.size != 1:
            raise ValueError("loss terms must be scalars")
    return l_coa + l_con * w.beta + l_silog * w.gamma
