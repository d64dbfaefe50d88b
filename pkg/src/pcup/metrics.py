"""Evaluation metrics: Chamfer distance, Hausdorff distance, normal angular
error, and per-point deviation export.

Unlike the training loss, ``cd_metric`` reports the mean over the pooled
per-point nearest-neighbor terms of both directions, so values are
comparable across cloud cardinalities.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .cloud import PointCloud
from .geometry import _sq_dist_block
from .io import write_xyzn

_CHUNK = 256


def _nearest_sq_dists(queries: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per query row, squared distance to the nearest target."""
    out = np.empty(queries.shape[0])
    for start in range(0, queries.shape[0], _CHUNK):
        d = _sq_dist_block(queries[start : start + _CHUNK], targets)
        out[start : start + _CHUNK] = d.min(axis=1)
    return out


def cd_metric(pred: PointCloud, gt: PointCloud) -> float:
    """Mean over all (|pred| + |gt|) directed squared nearest distances."""
    fwd = _nearest_sq_dists(pred.positions, gt.positions)
    rev = _nearest_sq_dists(gt.positions, pred.positions)
    return float((fwd.sum() + rev.sum()) / (len(pred) + len(gt)))


def hd_metric(pred: PointCloud, gt: PointCloud) -> float:
    """Symmetric Hausdorff distance (non-squared)."""
    fwd = _nearest_sq_dists(pred.positions, gt.positions)
    rev = _nearest_sq_dists(gt.positions, pred.positions)
    return float(np.sqrt(max(fwd.max(), rev.max())))


def normal_angle_error(pred: PointCloud, gt: PointCloud) -> tuple[float, np.ndarray]:
    """Angle in degrees between each predicted normal and the normal of the
    nearest ground-truth point. Orientation-sensitive: a flipped normal
    scores 180. Returns (mean, per-point array).
    """
    pair = np.empty(len(pred), dtype=np.int64)
    for start in range(0, len(pred), _CHUNK):
        d = _sq_dist_block(pred.positions[start : start + _CHUNK], gt.positions)
        pair[start : start + _CHUNK] = d.argmin(axis=1)
    dots = (pred.normals * gt.normals[pair]).sum(axis=1)
    angles = np.degrees(np.arccos(np.clip(dots, -1.0, 1.0)))
    return float(angles.mean()), angles


def deviation_export(pred: PointCloud, gt: PointCloud, path: str | Path) -> None:
    """Write pred as XYZN plus a 7th column: distance to the nearest gt point."""
    deviation = np.sqrt(_nearest_sq_dists(pred.positions, gt.positions))
    write_xyzn(pred, path, extra=deviation)
