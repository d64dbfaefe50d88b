"""Reading and writing point clouds.

XYZN text format: one record per line, six whitespace-separated decimals
``x y z nx ny nz``; ``#`` starts a comment line. Extra trailing columns
(e.g. a per-point deviation value) are tolerated on read. Values are
written with 9 significant digits so a write/read cycle round-trips.

ASCII PLY is supported read-only, for vertex elements carrying
x, y, z, nx, ny, nz properties.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .cloud import PointCloud

_XYZN_FMT = "%.9g"


def _atomic_write_text(path: str | Path, text: str) -> None:
    """Write via a temp file + rename so failures never leave partial output."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_xyzn(path: str | Path) -> PointCloud:
    """Read an XYZN file; validates unit normals on ingest."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            fields = stripped.split()
            if len(fields) < 6:
                raise ValueError(
                    f"{path}:{lineno}: expected at least 6 columns, got {len(fields)}"
                )
            try:
                rows.append([float(v) for v in fields[:6]])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad number: {exc}") from None
    if not rows:
        raise ValueError(f"{path}: no points")
    arr = np.asarray(rows, dtype=np.float64)
    cloud = PointCloud(arr[:, :3], arr[:, 3:6])
    cloud.check_unit_normals()
    return cloud


def write_xyzn(cloud: PointCloud, path: str | Path, extra: np.ndarray | None = None) -> None:
    """Write an XYZN file; ``extra`` appends one more column per point."""
    cloud.check_unit_normals()
    cols = [cloud.positions, cloud.normals]
    if extra is not None:
        extra = np.asarray(extra, dtype=np.float64).reshape(-1)
        if extra.shape[0] != len(cloud):
            raise ValueError("extra column length does not match point count")
        cols.append(extra[:, None])
    data = np.hstack(cols)
    lines = [" ".join(_XYZN_FMT % v for v in row) for row in data]
    _atomic_write_text(path, "\n".join(lines) + "\n")


def read_ply(path: str | Path) -> PointCloud:
    """Read an ASCII PLY file with x, y, z, nx, ny, nz vertex properties."""
    with open(path) as fh:
        line = fh.readline().strip()
        if line != "ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt = None
        elements: list[tuple[str, int, list[str]]] = []  # (name, count, props)
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: unexpected EOF in header")
            line = line.strip()
            if not line or line.startswith("comment"):
                continue
            if line == "end_header":
                break
            parts = line.split()
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element":
                elements.append((parts[1], int(parts[2]), []))
            elif parts[0] == "property":
                if not elements:
                    raise ValueError(f"{path}: property before element")
                if parts[1] == "list":
                    # list property occupies one whitespace-separated line chunk;
                    # acceptable only on non-vertex elements we skip wholesale
                    elements[-1][2].append("__list__")
                else:
                    elements[-1][2].append(parts[-1])
        if fmt != "ascii":
            raise ValueError(f"{path}: only ASCII PLY is supported, got format {fmt!r}")

        vertex_data = None
        for name, count, props in elements:
            if name == "vertex":
                needed = ["x", "y", "z", "nx", "ny", "nz"]
                missing = [p for p in needed if p not in props]
                if missing:
                    raise ValueError(f"{path}: vertex element missing {missing}")
                idx = [props.index(p) for p in needed]
                rows = np.empty((count, 6), dtype=np.float64)
                for i in range(count):
                    fields = fh.readline().split()
                    if len(fields) < len(props):
                        raise ValueError(f"{path}: truncated vertex {i}")
                    rows[i] = [float(fields[j]) for j in idx]
                vertex_data = rows
            else:
                for _ in range(count):  # skip non-vertex payload line by line
                    fh.readline()
    if vertex_data is None:
        raise ValueError(f"{path}: no vertex element")
    cloud = PointCloud(vertex_data[:, :3], vertex_data[:, 3:6])
    cloud.check_unit_normals()
    return cloud


def write_key_values(path: str | Path, items: dict[str, float | int | str]) -> None:
    """Flat key=value report, one pair per line."""
    lines = []
    for key, value in items.items():
        if isinstance(value, float):
            lines.append(f"{key}={value:.9g}")
        else:
            lines.append(f"{key}={value}")
    _atomic_write_text(path, "\n".join(lines) + "\n")
