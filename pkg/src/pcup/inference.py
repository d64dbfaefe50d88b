"""Patch-based whole-cloud upsampling.

The cloud is covered by overlapping patches (FPS seeds, ~2x overlap), each
patch is normalized, pushed through the network, de-normalized, and the
merged result is FPS-consolidated down to exactly up_ratio times the input
size. Fully deterministic for fixed parameters.
"""

from __future__ import annotations

import warnings

import numpy as np

from .cloud import PointCloud
from .geometry import (
    default_patch_count,
    extract_patches,
    merge_and_consolidate,
    normalize_patch,
)
from .network import NetConfig, NetworkParams, bind_params, forward, predict_normalized


def upsample_cloud(
    cloud: PointCloud,
    params: NetworkParams,
    config: NetConfig | None = None,
    return_provenance: bool = False,
):
    """Upsample a whole cloud to exactly up_ratio * n points with normals.

    Clouds smaller than the configured patch size fall back to a single
    whole-cloud patch (with a warning). With ``return_provenance`` also
    returns, per output point, the index of the patch that produced it.
    """
    config = config or params.config
    n = len(cloud)
    patch_size = config.patch_size
    if n < patch_size:
        warnings.warn(
            f"cloud has {n} < patch_size={patch_size} points; "
            "falling back to a single whole-cloud patch"
        )
        patch_size = n
    num_patches = default_patch_count(n, patch_size)
    patch_set = extract_patches(cloud, patch_size, num_patches)

    pt = bind_params(params)  # constants: inference records no tape
    upsampled: list[tuple[PointCloud, np.ndarray, float]] = []
    patch_of_row: list[np.ndarray] = []
    for pi, patch in enumerate(patch_set.patches):
        sub = PointCloud(
            cloud.positions[patch.members].copy(), cloud.normals[patch.members].copy()
        )
        normalized, centroid, scale = normalize_patch(sub)
        out = forward(normalized.as_array(), pt, config)
        pred, _ = predict_normalized(out.data)
        upsampled.append((pred, centroid, scale))
        patch_of_row.append(np.full(len(pred), pi, dtype=np.int64))

    target = config.up_ratio * n
    merged, keep = merge_and_consolidate(upsampled, target, return_selection=True)
    if return_provenance:
        return merged, np.concatenate(patch_of_row)[keep]
    return merged
