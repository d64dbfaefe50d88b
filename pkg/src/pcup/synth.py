"""Synthetic test shapes: uniform surface samples with exact analytic normals."""

from __future__ import annotations

import numpy as np

from .cloud import PointCloud


def sample_sphere(n: int, seed: int) -> PointCloud:
    """Uniform samples on the unit sphere; the normal at p is p itself."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n, 3))
    lengths = np.linalg.norm(v, axis=1)
    while (lengths == 0.0).any():  # astronomically unlikely, but keep it exact
        redo = lengths == 0.0
        v[redo] = rng.standard_normal((int(redo.sum()), 3))
        lengths = np.linalg.norm(v, axis=1)
    pos = v / lengths[:, None]
    return PointCloud(pos, pos.copy())


def sample_plane(n: int, seed: int) -> PointCloud:
    """Uniform samples on the z=0 square [-1, 1]^2 with +z normals."""
    rng = np.random.default_rng(seed)
    pos = np.zeros((n, 3))
    pos[:, :2] = rng.uniform(-1.0, 1.0, (n, 2))
    normals = np.tile([0.0, 0.0, 1.0], (n, 1))
    return PointCloud(pos, normals)


def sample_torus(n: int, seed: int, major: float = 1.0, minor: float = 0.3) -> PointCloud:
    """Area-uniform samples on a torus (tube radius ``minor`` around a circle
    of radius ``major`` in the xy-plane).

    The surface element scales with (major + minor*cos v), so the tube angle
    v is drawn by rejection to stay uniform per unit area.
    """
    if not (0 < minor < major):
        raise ValueError("require 0 < minor < major")
    rng = np.random.default_rng(seed)
    u = rng.uniform(0.0, 2.0 * np.pi, n)
    v = np.empty(n)
    filled = 0
    while filled < n:
        cand = rng.uniform(0.0, 2.0 * np.pi, 2 * (n - filled))
        accept = rng.uniform(0.0, 1.0, cand.shape[0]) < (
            (major + minor * np.cos(cand)) / (major + minor)
        )
        take = cand[accept][: n - filled]
        v[filled : filled + take.shape[0]] = take
        filled += take.shape[0]
    cos_u, sin_u = np.cos(u), np.sin(u)
    cos_v, sin_v = np.cos(v), np.sin(v)
    pos = np.stack(
        [(major + minor * cos_v) * cos_u, (major + minor * cos_v) * sin_u, minor * sin_v],
        axis=1,
    )
    normals = np.stack([cos_v * cos_u, cos_v * sin_u, sin_v], axis=1)
    return PointCloud(pos, normals)


def sample_cube(n: int, seed: int) -> PointCloud:
    """Uniform samples on the surface of the cube [-1, 1]^3."""
    rng = np.random.default_rng(seed)
    face = rng.integers(0, 6, n)  # axis = face // 2, sign = +1 / -1
    uv = rng.uniform(-1.0, 1.0, (n, 2))
    pos = np.empty((n, 3))
    normals = np.zeros((n, 3))
    for f in range(6):
        rows = face == f
        axis, sign = f // 2, 1.0 if f % 2 == 0 else -1.0
        others = [a for a in range(3) if a != axis]
        pos[rows, axis] = sign
        pos[rows, others[0]] = uv[rows, 0]
        pos[rows, others[1]] = uv[rows, 1]
        normals[rows, axis] = sign
    return PointCloud(pos, normals)


SHAPES = {
    "sphere": sample_sphere,
    "plane": sample_plane,
    "torus": sample_torus,
    "cube": sample_cube,
}


def sample_shape(shape: str, n: int, seed: int) -> PointCloud:
    if shape not in SHAPES:
        raise ValueError(f"unknown shape {shape!r}; choose from {sorted(SHAPES)}")
    if n < 8:
        raise ValueError("need at least 8 points")
    return SHAPES[shape](n, seed)
