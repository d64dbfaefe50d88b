"""Spatial kernels and dataset-construction procedures.

Exact kNN / ball query / farthest point sampling, patch extraction and
merging for patch-based inference, non-uniform downsampling and on-the-fly
augmentation for dataset creation, and patch normalization.

Determinism contract: every op is a pure function of its inputs; all ties
break toward the lowest index; every RNG-dependent op is bit-reproducible
for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .cloud import PointCloud, unit_normals

# Above this many candidate points kNN switches from the exhaustive scan to
# a uniform-grid index. The grid only prunes candidates: squared distances
# are computed with the same elementary expression in both backends, so the
# results (including tie-breaks) agree exactly.
EXHAUSTIVE_KNN_LIMIT = 1024

_CHUNK = 256  # query rows per distance-matrix block


@dataclass
class NeighborIndex:
    """k nearest neighbors per query row, ascending by squared distance.

    Ties are broken by ascending candidate index.
    """

    indices: np.ndarray  # (q, k) int64
    sq_dists: np.ndarray  # (q, k) float64


@dataclass
class Patch:
    members: np.ndarray  # (patch_size,) int64 indices into the source cloud
    centroid: np.ndarray  # (3,)
    scale: float


@dataclass
class PatchSet:
    patches: list[Patch] = field(default_factory=list)
    source_size: int = 0


def _as_positions(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected (n, 3) positions, got {arr.shape}")
    return arr


def _sq_dists_to(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    # Single elementary expression shared by both kNN backends so that the
    # grid accelerator reproduces the exhaustive scan bit for bit.
    diff = points - query
    return (diff * diff).sum(axis=1)


def knn_search(
    points: np.ndarray,
    queries: np.ndarray,
    k: int,
    exclude_self: bool = False,
) -> NeighborIndex:
    """Exact k-nearest-neighbor search.

    ``exclude_self`` requires ``queries`` to be the candidate set itself
    (aligned by index); query i then never reports candidate i.
    """
    points = _as_positions(points)
    queries = _as_positions(queries)
    n = points.shape[0]
    if n == 0:
        raise ValueError("empty point set")
    if exclude_self and queries.shape[0] != n:
        raise ValueError("exclude_self requires queries to be the point set itself")
    candidates = n - 1 if exclude_self else n
    if not 1 <= k <= candidates:
        raise ValueError(f"k={k} out of range for {candidates} candidate points")
    if n <= EXHAUSTIVE_KNN_LIMIT:
        return _knn_exhaustive(points, queries, k, exclude_self)
    return _knn_grid(points, queries, k, exclude_self)


def _sq_dist_block(queries: np.ndarray, points: np.ndarray) -> np.ndarray:
    # blocked version of _sq_dists_to with identical per-pair arithmetic
    # (subtract, square, (x+y)+z sum), so results match it bit for bit;
    # accumulating per coordinate avoids a (q, n, 3) temporary
    out = None
    scratch = np.empty((queries.shape[0], points.shape[0]))
    for c in range(3):
        np.subtract(queries[:, c, None], points[None, :, c], out=scratch)
        np.multiply(scratch, scratch, out=scratch)
        if out is None:
            out = scratch.copy()
        else:
            out += scratch
    return out


def _knn_exhaustive(points, queries, k, exclude_self) -> NeighborIndex:
    q = queries.shape[0]
    indices = np.empty((q, k), dtype=np.int64)
    sq_dists = np.empty((q, k), dtype=np.float64)
    for start in range(0, q, _CHUNK):
        stop = min(start + _CHUNK, q)
        block = _sq_dist_block(queries[start:stop], points)
        if exclude_self:
            rows = np.arange(start, stop)
            block[rows - start, rows] = np.inf
        # stable sort on distance keeps ascending-index order within ties
        order = np.argsort(block, axis=1, kind="stable")[:, :k]
        indices[start:stop] = order
        sq_dists[start:stop] = np.take_along_axis(block, order, axis=1)
    return NeighborIndex(indices, sq_dists)


class _UniformGrid:
    """Hash grid over 3D points supporting expanding-ring candidate walks."""

    def __init__(self, points: np.ndarray):
        self.points = points
        lo = points.min(axis=0)
        hi = points.max(axis=0)
        extent = float((hi - lo).max())
        # aim for a handful of points per occupied cell
        ncells = max(1, round(points.shape[0] ** (1.0 / 3.0)))
        self.cell = extent / ncells if extent > 0 else 1.0
        self.origin = lo
        coords = np.floor((points - lo) / self.cell).astype(np.int64)
        self.cells: dict[tuple[int, int, int], list[int]] = {}
        for idx, key in enumerate(map(tuple, coords)):
            self.cells.setdefault(key, []).append(idx)

    def cell_of(self, p: np.ndarray) -> tuple[int, int, int]:
        return tuple(np.floor((p - self.origin) / self.cell).astype(np.int64))

    def ring(self, center: tuple[int, int, int], r: int) -> list[int]:
        """Point indices in cells at Chebyshev distance exactly r."""
        cx, cy, cz = center
        out: list[int] = []
        if r == 0:
            return list(self.cells.get(center, ()))
        for dx in range(-r, r + 1):
            for dy in range(-r, r + 1):
                for dz in range(-r, r + 1):
                    if max(abs(dx), abs(dy), abs(dz)) != r:
                        continue
                    bucket = self.cells.get((cx + dx, cy + dy, cz + dz))
                    if bucket:
                        out.extend(bucket)
        return out


def _knn_grid(points, queries, k, exclude_self) -> NeighborIndex:
    grid = _UniformGrid(points)
    q = queries.shape[0]
    indices = np.empty((q, k), dtype=np.int64)
    sq_dists = np.empty((q, k), dtype=np.float64)
    max_ring = int(np.ceil(np.ptp(points, axis=0).max() / grid.cell)) + 2
    for i in range(q):
        center = grid.cell_of(queries[i])
        cand: list[int] = []
        kth_best = np.inf
        collected: list[np.ndarray] = []
        dists: list[np.ndarray] = []
        count = 0
        for r in range(max_ring + 1):
            # any point in an unvisited ring lies at distance >= (r-1)*cell
            if count >= k and ((r - 1) * grid.cell) ** 2 > kth_best:
                break
            ring_idx = grid.ring(center, r)
            if exclude_self and i in ring_idx:
                ring_idx = [j for j in ring_idx if j != i]
            if not ring_idx:
                continue
            arr = np.asarray(ring_idx, dtype=np.int64)
            d = _sq_dists_to(points[arr], queries[i])
            collected.append(arr)
            dists.append(d)
            count += arr.shape[0]
            if count >= k:
                all_d = np.concatenate(dists)
                kth_best = np.partition(all_d, k - 1)[k - 1]
        all_idx = np.concatenate(collected)
        all_d = np.concatenate(dists)
        order = np.lexsort((all_idx, all_d))[:k]
        indices[i] = all_idx[order]
        sq_dists[i] = all_d[order]
    return NeighborIndex(indices, sq_dists)


def ball_query(
    points: np.ndarray,
    centers: np.ndarray,
    radius: float,
    max_samples: int,
) -> np.ndarray:
    """Fixed-width radius grouping.

    Returns (len(centers), max_samples) indices: per center, up to
    ``max_samples`` points within ``radius`` (nearest first, ties by index),
    padded by repeating the first qualifying index. A center with no point
    in range gets its nearest neighbor repeated.
    """
    points = _as_positions(points)
    centers = _as_positions(centers)
    if radius <= 0:
        raise ValueError("radius must be positive")
    if max_samples < 1:
        raise ValueError("max_samples must be >= 1")
    r2 = radius * radius
    n = points.shape[0]
    take = min(max_samples, n)
    groups = np.empty((centers.shape[0], max_samples), dtype=np.int64)
    for start in range(0, centers.shape[0], _CHUNK):
        stop = min(start + _CHUNK, centers.shape[0])
        d = _sq_dist_block(centers[start:stop], points)
        order = np.argsort(d, axis=1, kind="stable")  # distance, ties by index
        within = np.take_along_axis(d, order, axis=1) <= r2
        # first qualifying index per center; rows with no qualifier fall
        # back to the nearest neighbor (argmax of all-False is column 0)
        first = np.take_along_axis(order, within.argmax(axis=1)[:, None], axis=1)
        chunk = np.where(within[:, :take], order[:, :take], first)
        if take < max_samples:
            pad = np.broadcast_to(first, (chunk.shape[0], max_samples - take))
            chunk = np.hstack([chunk, pad])
        groups[start:stop] = chunk
    return groups


def farthest_point_sample(points: np.ndarray, m: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling starting from ``seed_index``.

    At each step adds the point maximizing the minimum distance to the
    selected set (lowest index on ties). Deterministic.
    """
    points = _as_positions(points)
    n = points.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"m={m} out of range for {n} points")
    if not 0 <= seed_index < n:
        raise ValueError(f"seed_index={seed_index} out of range")
    selected = np.empty(m, dtype=np.int64)
    selected[0] = seed_index
    min_d = _sq_dists_to(points, points[seed_index])
    for step in range(1, m):
        nxt = int(np.argmax(min_d))  # argmax takes the first (lowest) index on ties
        selected[step] = nxt
        np.minimum(min_d, _sq_dists_to(points, points[nxt]), out=min_d)
    return selected


def _centroid_scale(positions: np.ndarray) -> tuple[np.ndarray, float]:
    centroid = positions.mean(axis=0)
    scale = float(np.linalg.norm(positions - centroid, axis=1).max())
    if scale == 0.0:
        scale = 1.0
    return centroid, scale


def normalize_patch(cloud: PointCloud) -> tuple[PointCloud, np.ndarray, float]:
    """Shift to the centroid and scale to unit max radius; normals untouched."""
    centroid, scale = _centroid_scale(cloud.positions)
    return (
        PointCloud((cloud.positions - centroid) / scale, cloud.normals.copy()),
        centroid,
        scale,
    )


def denormalize_patch(cloud: PointCloud, centroid: np.ndarray, scale: float) -> PointCloud:
    return PointCloud(cloud.positions * scale + centroid, cloud.normals.copy())


def extract_patches(cloud: PointCloud, patch_size: int, num_patches: int) -> PatchSet:
    """Patch seeds by FPS; each patch is the seed's ``patch_size`` nearest
    neighbors (seed included), with centroid/scale recorded for normalization.
    """
    n = len(cloud)
    if patch_size > n:
        raise ValueError(f"patch_size={patch_size} exceeds cloud size {n}")
    if num_patches < 1:
        raise ValueError("num_patches must be >= 1")
    seeds = farthest_point_sample(cloud.positions, min(num_patches, n), seed_index=0)
    nn = knn_search(cloud.positions, cloud.positions[seeds], patch_size, exclude_self=False)
    patches = []
    for row in nn.indices:
        centroid, scale = _centroid_scale(cloud.positions[row])
        patches.append(Patch(members=row.copy(), centroid=centroid, scale=scale))
    return PatchSet(patches=patches, source_size=n)


def default_patch_count(n: int, patch_size: int) -> int:
    """Seed count giving roughly 2x patch overlap."""
    return int(np.ceil(2.0 * n / patch_size))


def merge_and_consolidate(
    patches: Sequence[tuple[PointCloud, np.ndarray, float]],
    target_count: int,
    return_selection: bool = False,
):
    """De-normalize upsampled patches, concatenate, and FPS down to exactly
    ``target_count`` points. Normals ride along and are re-unitized.

    Each entry is (cloud, centroid, scale) in the patch's normalized frame.
    With ``return_selection`` also returns the indices selected from the
    concatenated cloud (for provenance tracking).
    """
    if not patches:
        raise ValueError("no patches to merge")
    positions = np.vstack([c.positions * s + ctr for c, ctr, s in patches])
    normals = np.vstack([c.normals for c, _, _ in patches])
    if positions.shape[0] < target_count:
        raise ValueError(
            f"{positions.shape[0]} merged points < target_count {target_count}"
        )
    keep = farthest_point_sample(positions, target_count, seed_index=0)
    merged_normals, _ = unit_normals(normals[keep])
    merged = PointCloud(positions[keep].copy(), merged_normals)
    if return_selection:
        return merged, keep
    return merged


def cloud_diameter(positions: np.ndarray) -> float:
    """Exact max pairwise distance, chunked."""
    positions = _as_positions(positions)
    best = 0.0
    for start in range(0, positions.shape[0], _CHUNK):
        block = _sq_dist_block(positions[start : start + _CHUNK], positions)
        best = max(best, float(block.max()))
    return float(np.sqrt(best))


def nonuniform_downsample(cloud: PointCloud, m: int, rng_seed: int) -> PointCloud:
    """Density-varying subsample: keep-weight grows with distance from a
    randomly chosen anchor, so the neighborhood of the anchor thins out.
    """
    n = len(cloud)
    if not 1 <= m <= n:
        raise ValueError(f"m={m} out of range for {n} points")
    rng = np.random.default_rng(rng_seed)
    anchor = int(rng.integers(n))
    dist = np.sqrt(_sq_dists_to(cloud.positions, cloud.positions[anchor]))
    eps = 0.05 * cloud_diameter(cloud.positions)
    weights = eps + dist
    total = weights.sum()
    if total == 0.0:
        weights = np.ones(n)
        total = float(n)
    keep = rng.choice(n, size=m, replace=False, p=weights / total)
    return PointCloud(cloud.positions[keep].copy(), cloud.normals[keep].copy())


@dataclass
class AugmentConfig:
    rotate: bool = True
    scale_range: tuple[float, float] = (0.8, 1.2)
    shift_range: float = 0.1
    noise_sigma: float = 0.005

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValueError("scale_range must satisfy 0 < lo <= hi")
        if self.shift_range < 0:
            raise ValueError("shift_range must be >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation matrix (unit quaternion method)."""
    q = rng.standard_normal(4)
    while np.linalg.norm(q) == 0.0:
        q = rng.standard_normal(4)
    return Rotation.from_quat(q / np.linalg.norm(q)).as_matrix()


def augment(cloud: PointCloud, rng_seed: int, config: AugmentConfig | None = None) -> PointCloud:
    """Random rotation, uniform scale, shift, then Gaussian position noise.

    Normals follow the rotation and are otherwise untouched (uniform scale
    and translation preserve surface orientation).
    """
    config = config or AugmentConfig()
    rng = np.random.default_rng(rng_seed)
    positions = cloud.positions.copy()
    normals = cloud.normals.copy()
    if config.rotate:
        rot = random_rotation(rng)
        positions = positions @ rot.T
        normals = normals @ rot.T
    lo, hi = config.scale_range
    positions = positions * rng.uniform(lo, hi)
    positions = positions + rng.uniform(-config.shift_range, config.shift_range, 3)
    if config.noise_sigma > 0:
        positions = positions + rng.normal(0.0, config.noise_sigma, positions.shape)
    return PointCloud(positions, normals)
