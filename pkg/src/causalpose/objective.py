"""Training losses: visibility-weighted KL on the counterfactual output and the
stop-gradient consistency term on non-intervened keypoints."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .model import CoordDistributions, InterventionMask
from .numerics import Tensor

DEFAULT_LAMBDA = 0.1
LAMBDA_GRID = (0.0, 0.01, 0.1, 0.5)


@dataclass
class GroundTruthEncoding:
    qx: np.ndarray
    qy: np.ndarray
    weights: np.ndarray
    n_clamped: int = 0


def _gaussian_rows(coord: np.ndarray, bins: int, sigma: float) -> np.ndarray:
    centre = np.minimum((coord * bins).astype(np.int64), bins - 1)
    grid = np.arange(bins)
    q = np.exp(-0.5 * ((grid - centre[..., None]) / sigma) ** 2)
    return q / q.sum(axis=-1, keepdims=True)


def encode_targets(coords, visibility, sigma_bins: float, bins_x: int, bins_y: int | None = None) -> GroundTruthEncoding:
    """Discretised Gaussians centred on the bin containing each coordinate."""
    if sigma_bins <= 0:
        raise ValueError("sigma_bins must be positive")
    bins_y = bins_x if bins_y is None else bins_y
    coords = np.asarray(coords, dtype=np.float64)
    clamped = np.clip(coords, 0.0, 1.0)
    n_clamped = int(np.count_nonzero(clamped != coords))
    return GroundTruthEncoding(
        _gaussian_rows(clamped[..., 0], bins_x, sigma_bins),
        _gaussian_rows(clamped[..., 1], bins_y, sigma_bins),
        np.asarray(visibility, dtype=np.float64),
        n_clamped,
    )


def per_keypoint_kl(qx, qy, pred: CoordDistributions) -> Tensor:
    """KL summed over the x and y axes, shape B x K."""
    return nm.kl_div(qx, pred.px) + nm.kl_div(qy, pred.py)


def keypoint_loss(gt: GroundTruthEncoding, pred: CoordDistributions) -> Tensor:
    per = per_keypoint_kl(gt.qx, gt.qy, pred)
    B = per.shape[0]
    return nm.scale(nm.sum_(nm.mul(gt.weights, per)), 1.0 / B)


def consistency_loss(pred_obs: CoordDistributions, pred_cf: CoordDistributions,
                     mask: InterventionMask) -> Tensor:
    """Mean over the stable set of KL(sg[P_obs] || P_cf); zero when that set is empty."""
    stable = mask.stable.astype(np.float64)
    count = stable.sum()
    target = CoordDistributions(nm.stop_gradient(pred_obs.px), nm.stop_gradient(pred_obs.py))
    per = per_keypoint_kl(target.px, target.py, pred_cf)
    if count == 0:
        return nm.scale(nm.sum_(per), 0.0)
    return nm.scale(nm.sum_(nm.mul(stable, per)), 1.0 / count)


def total_loss(l_kpt: Tensor, l_cf: Tensor, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return l_kpt + nm.scale(l_cf, lam)
