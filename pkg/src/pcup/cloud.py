"""Point cloud container shared by every stage of the pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Tolerance on |norm - 1| for normals at ingest / final-output boundaries.
UNIT_NORMAL_TOL = 1e-3

# Fallback direction for a degenerate (zero-length) normal.
FALLBACK_NORMAL = np.array([0.0, 0.0, 1.0])


@dataclass
class PointCloud:
    """n points with unit surface normals.

    positions: (n, 3) float64, model units.
    normals:   (n, 3) float64, unit vectors (checked at I/O boundaries,
               not on every construction; intermediate transforms keep
               them unit by design).
    """

    positions: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.float64)
        normals = np.asarray(self.normals, dtype=np.float64)
        if positions.ndim != 2 or positions.shape[1] != 3:
            raise ValueError(f"positions must be (n, 3), got {positions.shape}")
        if normals.shape != positions.shape:
            raise ValueError(
                f"normals shape {normals.shape} != positions shape {positions.shape}"
            )
        if positions.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.isfinite(positions).all():
            raise ValueError("positions contain NaN/Inf")
        self.positions = positions
        self.normals = normals

    def __len__(self) -> int:
        return self.positions.shape[0]

    def as_array(self) -> np.ndarray:
        """Stack into one (n, 6) array: x y z nx ny nz."""
        return np.hstack([self.positions, self.normals])

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "PointCloud":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] < 6:
            raise ValueError(f"expected (n, >=6) array, got {arr.shape}")
        return cls(arr[:, :3].copy(), arr[:, 3:6].copy())

    def copy(self) -> "PointCloud":
        return PointCloud(self.positions.copy(), self.normals.copy())

    def check_unit_normals(self) -> None:
        """Raise if any normal length falls outside [1 - tol, 1 + tol]."""
        lengths = np.linalg.norm(self.normals, axis=1)
        bad = np.abs(lengths - 1.0) > UNIT_NORMAL_TOL
        if bad.any():
            i = int(np.argmax(bad))
            raise ValueError(
                f"normal {i} has length {lengths[i]:.6g}, outside unit tolerance"
            )


def unit_normals(normals: np.ndarray) -> tuple[np.ndarray, int]:
    """Rescale rows to unit length.

    Zero-length rows are replaced by the +z fallback; returns the
    renormalized array and the count of such degenerate rows.
    """
    normals = np.asarray(normals, dtype=np.float64)
    lengths = np.linalg.norm(normals, axis=1)
    zero = lengths == 0.0
    safe = np.where(zero, 1.0, lengths)
    out = normals / safe[:, None]
    if zero.any():
        out[zero] = FALLBACK_NORMAL
    return out, int(zero.sum())
