"""Grid agreement metrics: channel-distribution KL, direction cosine, occupancy IoU, masked MSE."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .pillars import OccupancyMask, PillarGrid, occupancy_of

log = logging.getLogger(__name__)

_PROB_FLOOR = 1e-12
_NORM_FLOOR = 1e-9


def _channel_softmax(data: np.ndarray) -> np.ndarray:
    shifted = data - data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def kl_alignment(enhanced: PillarGrid, dense: PillarGrid) -> float:
    """Mean KL between per-cell channel softmaxes, over cells occupied in `dense`."""
    if enhanced.spec != dense.spec:
        raise ValueError("grid specs differ")
    if enhanced.spec.c < 2:
        raise ValueError("kl_alignment needs at least 2 channels")
    occ = occupancy_of(dense).data.astype(bool)
    if not occ.any():
        log.warning("kl_alignment: dense grid has no occupied cells; defined as 0")
        return 0.0
    pe = np.maximum(_channel_softmax(enhanced.data[occ]), _PROB_FLOOR)
    pd = np.maximum(_channel_softmax(dense.data[occ]), _PROB_FLOOR)
    kl = (pe * (np.log(pe) - np.log(pd))).sum(axis=1)
    return float(kl.mean())


def cosine_alignment(enhanced: PillarGrid, dense: PillarGrid) -> float:
    """Mean of 1 - cos(channel vectors) over cells where both vectors have mass."""
    if enhanced.spec != dense.spec:
        raise ValueError("grid specs differ")
    a = enhanced.data
    b = dense.data
    na = np.linalg.norm(a, axis=2)
    nb = np.linalg.norm(b, axis=2)
    ok = (na > _NORM_FLOOR) & (nb > _NORM_FLOOR)
    if not ok.any():
        log.warning("cosine_alignment: no cell has mass in both grids; defined as 0")
        return 0.0
    cos = (a[ok] * b[ok]).sum(axis=1) / (na[ok] * nb[ok])
    return float((1.0 - cos).mean())


def occupancy_iou(pred_occ: np.ndarray, target: OccupancyMask, threshold: float = 0.5) -> float:
    """IoU of the thresholded prediction against a binary mask."""
    pred_occ = np.asarray(pred_occ, dtype=np.float64)
    if pred_occ.shape != target.data.shape:
        raise ValueError(f"prediction shape {pred_occ.shape} != mask shape {target.data.shape}")
    pred = pred_occ > threshold
    tgt = target.data.astype(bool)
    union = int(np.logical_or(pred, tgt).sum())
    if union == 0:
        log.warning("occupancy_iou: both masks empty; defined as 1")
        return 1.0
    return float(np.logical_and(pred, tgt).sum() / union)


def masked_mse(pred: PillarGrid, dense: PillarGrid) -> float:
    """Mean squared channel-vector error over cells occupied in `dense`."""
    if pred.spec != dense.spec:
        raise ValueError("grid specs differ")
    occ = occupancy_of(dense).data.astype(bool)
    n = int(occ.sum())
    if n == 0:
        log.warning("masked_mse: dense grid has no occupied cells; defined as 0")
        return 0.0
    diff = pred.data[occ] - dense.data[occ]
    return float((diff**2).sum() / n)


def alignment_total(kl: float, cosine_loss: float, gamma1: float = 1000.0, gamma2: float = 10.0) -> float:
    return gamma1 * kl + gamma2 * cosine_loss


@dataclass(frozen=True)
class AlignmentReport:
    kl: float
    cosine_loss: float
    iou: float
    masked_mse: float
    weighted_total: float


def compare_grids(
    enhanced: PillarGrid,
    dense: PillarGrid,
    gamma1: float = 1000.0,
    gamma2: float = 10.0,
) -> AlignmentReport:
    """All agreement metrics between an enhanced grid and its dense reference."""
    kl = kl_alignment(enhanced, dense)
    cos = cosine_alignment(enhanced, dense)
    iou = occupancy_iou(occupancy_of(enhanced).data.astype(np.float64), occupancy_of(dense))
    mse = masked_mse(enhanced, dense)
    return AlignmentReport(kl, cos, iou, mse, alignment_total(kl, cos, gamma1, gamma2))
