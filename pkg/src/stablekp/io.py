"""ASCII XYZ and PLY readers/writers."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError
from .geometry import PointCloud


class MalformedFileError(InvalidArgumentError):
    kind = "malformed-file"


def _fmt(x: float) -> str:
    return repr(float(x))


def write_xyz(path, cloud: PointCloud) -> None:
    """One "x y z[ nx ny nz]" line per point, full float precision."""
    rows = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    with open(path, "w") as fh:
        for row in rows:
            fh.write(" ".join(_fmt(v) for v in row) + "\n")


def read_xyz(path) -> PointCloud:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) not in (3, 6):
                raise MalformedFileError(f"{path}:{lineno}: expected 3 or 6 values, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise MalformedFileError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise MalformedFileError(f"{path}: no points")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise MalformedFileError(f"{path}: mixed 3- and 6-column rows")
    arr = np.asarray(rows, dtype=np.float64)
    if arr.shape[1] == 6:
        return PointCloud(arr[:, :3], arr[:, 3:])
    return PointCloud(arr)


_PLY_TYPES = {"float", "float32", "double", "float64", "uchar", "uint8", "int", "int32",
              "char", "int8", "short", "ushort", "uint", "int16", "uint16", "uint32"}


def write_ply(path, points, normals=None, colors=None) -> None:
    """ASCII PLY with float x/y/z, optional nx/ny/nz and uchar red/green/blue."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    header = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
              "property float x", "property float y", "property float z"]
    if normals is not None:
        header += ["property float nx", "property float ny", "property float nz"]
    if colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        for i, p in enumerate(pts):
            vals = [_fmt(v) for v in p]
            if normals is not None:
                vals += [_fmt(v) for v in normals[i]]
            if colors is not None:
                vals += [str(int(c)) for c in colors[i]]
            fh.write(" ".join(vals) + "\n")


def read_ply(path) -> PointCloud:
    """Read the vertex element of an ASCII PLY file."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MalformedFileError(f"{path}: missing 'ply' magic")
    elements = []  # (name, count, [property names])
    body_start = None
    for i, line in enumerate(lines[1:], 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            if parts[1] != "ascii":
                raise MalformedFileError(f"{path}: only ASCII PLY is supported")
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MalformedFileError(f"{path}: property before element")
            if parts[1] == "list":
                elements[-1][2].append(("list", parts[-1]))
            elif parts[1] in _PLY_TYPES:
                elements[-1][2].append(("scalar", parts[2]))
            else:
                raise MalformedFileError(f"{path}: unknown property type {parts[1]!r}")
        elif parts[0] == "end_header":
            body_start = i + 1
            break
    if body_start is None:
        raise MalformedFileError(f"{path}: missing end_header")
    cursor = body_start
    for name, count, props in elements:
        if name != "vertex":
            cursor += count
            continue
        names = [p[1] for p in props]
        if any(kind == "list" for kind, _ in props):
            raise MalformedFileError(f"{path}: list properties on vertices are not supported")
        try:
            cols = [names.index(c) for c in ("x", "y", "z")]
        except ValueError:
            raise MalformedFileError(f"{path}: vertex element lacks x/y/z") from None
        try:
            data = np.array([[float(v) for v in lines[cursor + r].split()] for r in range(count)])
        except (ValueError, IndexError) as exc:
            raise MalformedFileError(f"{path}: bad vertex data ({exc})") from None
        if data.ndim != 2 or data.shape[1] != len(names):
            raise MalformedFileError(f"{path}: vertex rows do not match header")
        normals = None
        if all(c in names for c in ("nx", "ny", "nz")):
            normals = data[:, [names.index(c) for c in ("nx", "ny", "nz")]]
        return PointCloud(data[:, cols], normals)
    raise MalformedFileError(f"{path}: no vertex element")


def read_cloud(path) -> PointCloud:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return read_ply(path)
    return read_xyz(path)


def write_cloud(path, cloud: PointCloud) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        write_ply(path, cloud.points, cloud.normals)
    else:
        write_xyz(path, cloud)


def sigma_colors(sigmas) -> np.ndarray:
    """Red ramp: the smallest sigma is bright red, larger sigmas get darker."""
    s = np.asarray(sigmas, dtype=np.float64)
    if len(s) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    span = s.max() - s.min()
    frac = np.zeros_like(s) if span <= 0 else (s - s.min()) / span
    red = np.round(255 - 205 * frac).astype(np.int64)
    return np.stack([red, np.zeros_like(red), np.zeros_like(red)], axis=1)
