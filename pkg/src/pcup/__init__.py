"""Point cloud upsampling and normal estimation.

Turns an n-point cloud with normals into a 4n-point cloud with normals:
spatial kernels, a compound differentiable point/normal loss with verified
gradients, a feature-embedding/reshaping network on a minimal reverse-mode
autodiff engine, Adam training, and patch-based inference.
"""

from .cloud import PointCloud
from .geometry import (
    AugmentConfig,
    NeighborIndex,
    PatchSet,
    augment,
    ball_query,
    extract_patches,
    farthest_point_sample,
    knn_search,
    merge_and_consolidate,
    nonuniform_downsample,
    normalize_patch,
)
from .inference import upsample_cloud
from .io import read_ply, read_xyzn, write_xyzn
from .losses import LossReport, LossWeights, chamfer, emd, total_loss
from .metrics import cd_metric, hd_metric, normal_angle_error
from .network import NetConfig, NetworkParams, init_params, load_checkpoint, save_checkpoint
from .synth import sample_shape
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "LossReport",
    "LossWeights",
    "NeighborIndex",
    "NetConfig",
    "NetworkParams",
    "PatchSet",
    "PointCloud",
    "TrainConfig",
    "augment",
    "ball_query",
    "cd_metric",
    "chamfer",
    "emd",
    "extract_patches",
    "farthest_point_sample",
    "hd_metric",
    "init_params",
    "knn_search",
    "load_checkpoint",
    "merge_and_consolidate",
    "nonuniform_downsample",
    "normal_angle_error",
    "normalize_patch",
    "read_ply",
    "read_xyzn",
    "sample_shape",
    "save_checkpoint",
    "total_loss",
    "train",
    "upsample_cloud",
    "write_xyzn",
]
