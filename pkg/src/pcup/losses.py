"""Differentiable compound loss over predicted points and normals.

Components:

* ``chamfer`` — symmetric sum of squared nearest-neighbor distances
  between prediction and ground truth.
* ``emd`` — exact earth mover's distance under an optimal bijection
  (evaluation only; never part of the training objective).
* ``point_knn_loss`` — mean squared distance to the k nearest predicted
  neighbors; pulls the prediction toward a uniform spread.
* ``normal_l2_loss`` — squared deviation from the nearest ground-truth
  normal (orientation-sensitive).
* ``normal_orth_loss`` — mean squared cosine between each normal and the
  offsets to its k nearest neighbors; zero exactly when normals are
  orthogonal to the local surface.
* ``normal_knn_loss`` — squared deviation between neighboring normals,
  enforcing smooth orientation fields.

``*_t`` variants consume :class:`~pcup.autodiff.Tensor` values and return
a scalar tensor; neighbor/pairing index sets are recomputed from current
values each call and treated as constants of the iterate. Plain-named
wrappers take :class:`~pcup.cloud.PointCloud` pairs and return floats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import Tensor
from .cloud import PointCloud
from .geometry import knn_search

DEFAULT_K = 15

# squared-distance singularity guard for coincident neighbor pairs
_ORTH_GUARD_SQ = 1e-16


@dataclass
class LossWeights:
    """Component weights of the training objective."""

    cd: float = 1.0
    point_knn: float = 0.1
    normal: float = 0.05
    normal_orth: float = 1e-4
    normal_knn: float = 1e-4

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"weight {name} must be finite and non-negative")


@dataclass
class LossReport:
    total: float
    cd: float
    point_knn: float
    normal: float
    normal_orth: float
    normal_knn: float

    def as_dict(self) -> dict[str, float]:
        return {
            "total": self.total,
            "cd": self.cd,
            "point_knn": self.point_knn,
            "normal": self.normal,
            "normal_orth": self.normal_orth,
            "normal_knn": self.normal_knn,
        }

    def format_kv(self) -> str:
        return "\n".join(f"{k}={v:.9g}" for k, v in self.as_dict().items())


def _values(x: Tensor | np.ndarray) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def nearest_indices(queries: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Index of the nearest target per query row (lowest index on ties)."""
    from .geometry import _sq_dist_block

    out = np.empty(queries.shape[0], dtype=np.int64)
    for start in range(0, queries.shape[0], 256):
        d = _sq_dist_block(queries[start : start + 256], targets)
        out[start : start + 256] = d.argmin(axis=1)
    return out


# ---------------------------------------------------------------------------
# differentiable cores


def chamfer_t(pred_pos: Tensor, gt_pos: np.ndarray, pairing: np.ndarray | None = None) -> Tensor:
    """Sum over both directed nearest-neighbor terms of squared distance."""
    gt_pos = np.asarray(gt_pos, dtype=np.float64)
    if gt_pos.shape[0] == 0 or pred_pos.rows == 0:
        raise ValueError("chamfer requires non-empty clouds")
    fwd = pairing if pairing is not None else nearest_indices(pred_pos.data, gt_pos)
    rev = nearest_indices(gt_pos, pred_pos.data)  # gt -> pred
    d_fwd = ad.sum_all(ad.square(pred_pos - ad.constant(gt_pos[fwd])))
    d_rev = ad.sum_all(ad.square(ad.gather_rows(pred_pos, rev) - ad.constant(gt_pos)))
    return d_fwd + d_rev


def _self_neighbors(pos: np.ndarray, k: int, neighbors: np.ndarray | None) -> np.ndarray:
    n = pos.shape[0]
    if n <= k:
        raise ValueError(f"need more than k={k} points, got {n}")
    if neighbors is None:
        neighbors = knn_search(pos, pos, k, exclude_self=True).indices
    return neighbors


def point_knn_loss_t(
    pred_pos: Tensor,
    k: int = DEFAULT_K,
    neighbors: np.ndarray | None = None,
) -> Tensor:
    """Mean over points of summed squared distance to k nearest predicted
    neighbors (self excluded)."""
    n = pred_pos.rows
    nbr = _self_neighbors(pred_pos.data, k, neighbors)
    centers = ad.gather_rows(pred_pos, np.repeat(np.arange(n), k))
    neighbor_rows = ad.gather_rows(pred_pos, nbr.reshape(-1))
    return ad.sum_all(ad.square(centers - neighbor_rows)) * (1.0 / n)


def normal_l2_loss_t(
    pred_pos: Tensor | np.ndarray,
    pred_nrm: Tensor,
    gt: PointCloud,
    pairing: np.ndarray | None = None,
) -> Tensor:
    """Mean squared deviation from the nearest ground-truth normal.

    Pairing is by position and constant for the iterate; gradients flow
    only into the predicted normals.
    """
    if pairing is None:
        pairing = nearest_indices(_values(pred_pos), gt.positions)
    target = ad.constant(gt.normals[pairing])
    return ad.sum_all(ad.square(pred_nrm - target)) * (1.0 / pred_nrm.rows)


def normal_orth_loss_t(
    pred_pos: Tensor,
    pred_nrm: Tensor,
    k: int = DEFAULT_K,
    neighbors: np.ndarray | None = None,
) -> Tensor:
    """Mean squared cosine between each point's normal and the offsets to
    its k nearest neighbors.

    cos^2 is computed as dot^2 / (|offset|^2 |normal|^2), so no square
    roots enter the graph. Neighbor pairs closer than 1e-8 contribute
    exactly zero (value and gradient), as do pairs with a zero-length
    normal.
    """
    n = pred_pos.rows
    nbr = _self_neighbors(pred_pos.data, k, neighbors)
    rep = np.repeat(np.arange(n), k)
    offsets = ad.gather_rows(pred_pos, rep) - ad.gather_rows(pred_pos, nbr.reshape(-1))
    normals = ad.gather_rows(pred_nrm, rep)
    dot = ad.row_sum(offsets * normals)
    dist_sq = ad.row_sum(ad.square(offsets))
    nrm_sq = ad.row_sum(ad.square(normals))
    keep = ((dist_sq.data >= _ORTH_GUARD_SQ) & (nrm_sq.data >= _ORTH_GUARD_SQ)).astype(float)
    mask = ad.constant(keep)
    one_if_masked = ad.constant(1.0 - keep)
    denom = dist_sq * nrm_sq * mask + one_if_masked
    cos_sq = ad.square(dot * mask) / denom
    return ad.sum_all(cos_sq) * (1.0 / (n * k))


def normal_knn_loss_t(
    pred_pos: Tensor | np.ndarray,
    pred_nrm: Tensor,
    k: int = DEFAULT_K,
    neighbors: np.ndarray | None = None,
) -> Tensor:
    """Mean over points of summed squared deviation from the normals of the
    k nearest neighbors (neighborhoods by position)."""
    pos = _values(pred_pos)
    n = pos.shape[0]
    nbr = _self_neighbors(pos, k, neighbors)
    centers = ad.gather_rows(pred_nrm, np.repeat(np.arange(n), k))
    neighbor_rows = ad.gather_rows(pred_nrm, nbr.reshape(-1))
    return ad.sum_all(ad.square(centers - neighbor_rows)) * (1.0 / n)


def total_loss_t(
    pred_pos: Tensor,
    pred_nrm: Tensor,
    gt: PointCloud,
    weights: LossWeights | None = None,
    k: int = DEFAULT_K,
) -> tuple[Tensor, LossReport]:
    """Weighted sum of all five components plus a float report.

    The self-neighborhood index and the pred-to-gt pairing are computed
    once and shared by the components that need them.
    """
    w = weights or LossWeights()
    neighbors = knn_search(pred_pos.data, pred_pos.data, k, exclude_self=True).indices
    pairing = nearest_indices(pred_pos.data, gt.positions)
    cd = chamfer_t(pred_pos, gt.positions, pairing=pairing)
    pk = point_knn_loss_t(pred_pos, k, neighbors=neighbors)
    nl = normal_l2_loss_t(pred_pos, pred_nrm, gt, pairing=pairing)
    no = normal_orth_loss_t(pred_pos, pred_nrm, k, neighbors=neighbors)
    nk = normal_knn_loss_t(pred_pos, pred_nrm, k, neighbors=neighbors)
    total = (
        cd * w.cd + pk * w.point_knn + nl * w.normal + no * w.normal_orth + nk * w.normal_knn
    )
    report = LossReport(
        total=total.item(),
        cd=cd.item(),
        point_knn=pk.item(),
        normal=nl.item(),
        normal_orth=no.item(),
        normal_knn=nk.item(),
    )
    return total, report


# ---------------------------------------------------------------------------
# scalar wrappers over point clouds


def chamfer(pred: PointCloud, gt: PointCloud) -> float:
    return chamfer_t(ad.constant(pred.positions), gt.positions).item()


def emd(pred: PointCloud, gt: PointCloud) -> float:
    """Exact earth mover's distance: min over bijections of summed
    (non-squared) distances, via optimal assignment."""
    if len(pred) != len(gt):
        raise ValueError(f"emd needs equal cardinality, got {len(pred)} vs {len(gt)}")
    diff = pred.positions[:, None, :] - gt.positions[None, :, :]
    cost = np.sqrt((diff * diff).sum(axis=2))
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def point_knn_loss(pred: PointCloud, k: int = DEFAULT_K) -> float:
    return point_knn_loss_t(ad.constant(pred.positions), k).item()


def normal_l2_loss(pred: PointCloud, gt: PointCloud) -> float:
    return normal_l2_loss_t(pred.positions, ad.constant(pred.normals), gt).item()


def normal_orth_loss(pred: PointCloud, k: int = DEFAULT_K) -> float:
    return normal_orth_loss_t(
        ad.constant(pred.positions), ad.constant(pred.normals), k
    ).item()


def normal_knn_loss(pred: PointCloud, k: int = DEFAULT_K) -> float:
    return normal_knn_loss_t(pred.positions, ad.constant(pred.normals), k).item()


def total_loss(
    pred: PointCloud,
    gt: PointCloud,
    weights: LossWeights | None = None,
    k: int = DEFAULT_K,
) -> LossReport:
    _, report = total_loss_t(
        ad.constant(pred.positions), ad.constant(pred.normals), gt, weights, k
    )
    return report
