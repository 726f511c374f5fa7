"""ASCII PLY / PCD reading and writing.

PLY goes through plyfile, PCD through Open3D's tensor I/O (the tensor API keeps
the integer ``label`` field that the legacy reader drops).
"""

import logging
from pathlib import Path
from typing import Literal

import numpy as np
from plyfile import PlyData, PlyElement, PlyParseError

from .cloud import PointCloud
from .errors import DataError, ParseError

logger = logging.getLogger(__name__)

CloudFormat = Literal["ply", "pcd"]

RGB = ("red", "green", "blue")


def infer_format(path: str | Path) -> CloudFormat:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return "ply"
    if suffix == ".pcd":
        return "pcd"
    raise DataError(f"cannot infer cloud format from {path!s}; use .ply or .pcd")


def read_cloud(path: str | Path, format: CloudFormat | None = None) -> PointCloud:
    """Read an ASCII PLY or PCD file. Point order is preserved."""
    format = format or infer_format(path)
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")

    if format == "ply":
        cloud = _read_ply(path)
    else:
        cloud = _read_pcd(path)
    logger.debug(f"Read {len(cloud)} points from {path}")
    return cloud


def write_cloud(cloud: PointCloud, path: str | Path, format: CloudFormat | None = None) -> None:
    """Write an ASCII PLY or PCD file readable by read_cloud."""
    format = format or infer_format(path)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if format == "ply":
        _write_ply(cloud, path)
    else:
        _write_pcd(cloud, path)
    logger.debug(f"Wrote {len(cloud)} points to {path}")


def _color_bytes(colors: np.ndarray) -> np.ndarray:
    return np.rint(colors * 255.0).astype(np.uint8)


def _checked_cloud(
    positions: np.ndarray,
    rgb: np.ndarray | None,
    labels: np.ndarray | None,
    path: Path,
) -> PointCloud:
    """Validate raw columns; row numbers in messages are 0-based point indices."""
    positions = np.asarray(positions, dtype=np.float64)
    bad = np.flatnonzero(~np.all(np.isfinite(positions), axis=1))
    if len(bad):
        raise ParseError(f"non-finite position at point {int(bad[0])}", path=str(path))

    colors = None
    if rgb is not None:
        rgb = np.asarray(rgb, dtype=np.float64)
        invalid = np.any((rgb != np.round(rgb)) | (rgb < 0) | (rgb > 255), axis=1)
        if np.any(invalid):
            raise ParseError(
                f"color values must be integers in 0..255 (point {int(np.flatnonzero(invalid)[0])})",
                path=str(path),
            )
        colors = rgb / 255.0

    if labels is not None:
        raw = np.asarray(labels, dtype=np.float64).reshape(-1)
        invalid = (raw != np.round(raw)) | (raw < 0)
        if np.any(invalid):
            raise ParseError(
                f"labels must be non-negative integers (point {int(np.flatnonzero(invalid)[0])})",
                path=str(path),
            )
        labels = raw.astype(np.int64)
    return PointCloud(positions, colors, labels)


def _write_ply(cloud: PointCloud, path: Path) -> None:
    fields = [("x", "f8"), ("y", "f8"), ("z", "f8")]
    if cloud.has_colors:
        fields += [(c, "u1") for c in RGB]
    if cloud.has_labels:
        fields.append(("label", "i4"))

    vertex = np.empty(len(cloud), dtype=fields)
    for axis, name in enumerate("xyz"):
        vertex[name] = cloud.positions[:, axis]
    if cloud.has_colors:
        rgb = _color_bytes(cloud.colors)
        for channel, name in enumerate(RGB):
            vertex[name] = rgb[:, channel]
    if cloud.has_labels:
        vertex["label"] = cloud.labels
    PlyData([PlyElement.describe(vertex, "vertex")], text=True).write(str(path))


def _header_line(ply: PlyData, name: str) -> tuple[int | None, str]:
    """1-based number and text of the header line declaring vertex property ``name``."""
    in_vertex = False
    for number, line in enumerate(ply.header.splitlines(), start=1):
        tokens = line.split()
        if tokens[:1] == ["element"]:
            in_vertex = tokens[1:2] == ["vertex"]
        elif in_vertex and tokens[:1] == ["property"] and tokens[-1:] == [name]:
            return number, line.strip()
    return None, f"property {name}"


def _read_ply(path: Path) -> PointCloud:
    try:
        ply = PlyData.read(str(path))
    except PlyParseError as e:
        raise ParseError(str(e), line=getattr(e, "line", None), path=str(path)) from e
    except UnicodeDecodeError as e:
        raise ParseError("not a PLY file", path=str(path)) from e
    if not ply.text:
        raise ParseError("binary PLY is not supported", line=2, path=str(path))
    if "vertex" not in [element.name for element in ply.elements]:
        raise ParseError("no vertex element", path=str(path))

    data = ply["vertex"].data
    names = data.dtype.names or ()
    for axis in "xyz":
        if axis not in names:
            raise ParseError(f"vertex element lacks property {axis}", path=str(path))

    declared = [c for c in RGB if c in names]
    if declared and len(declared) < len(RGB):
        missing = ", ".join(c for c in RGB if c not in names)
        line, text = _header_line(ply, declared[0])
        raise ParseError(
            f"'{text}' declared without {missing}",
            line=line,
            path=str(path),
        )

    positions = np.column_stack([data[a] for a in "xyz"])
    rgb = np.column_stack([data[c] for c in RGB]) if declared else None
    labels = np.asarray(data["label"]) if "label" in names else None
    return _checked_cloud(positions, rgb, labels, path)


def _open3d():
    try:
        import open3d
    except ImportError as e:
        raise DataError("PCD files need the open3d package") from e
    return open3d


def _write_pcd(cloud: PointCloud, path: Path) -> None:
    o3d = _open3d()

    if not len(cloud):
        raise DataError(f"cannot write an empty PCD file: {path}")
    pcd = o3d.t.geometry.PointCloud(o3d.core.Tensor(cloud.positions.astype(np.float64)))
    if cloud.has_colors:
        pcd.point["colors"] = o3d.core.Tensor(_color_bytes(cloud.colors).astype(np.float32) / 255.0)
    if cloud.has_labels:
        pcd.point["label"] = o3d.core.Tensor(cloud.labels.astype(np.int32).reshape(-1, 1))
    if not o3d.t.io.write_point_cloud(str(path), pcd, write_ascii=True, compressed=False):
        raise DataError(f"failed to write {path}")


def _read_pcd(path: Path) -> PointCloud:
    o3d = _open3d()

    pcd = o3d.t.io.read_point_cloud(str(path))
    if "positions" not in pcd.point or pcd.point["positions"].shape[0] == 0:
        raise ParseError("no points could be read", path=str(path))

    positions = pcd.point["positions"].numpy()
    rgb = None
    if "colors" in pcd.point:
        raw = pcd.point["colors"].numpy()
        rgb = raw.astype(np.float64) if np.issubdtype(raw.dtype, np.integer) else np.rint(raw * 255.0)
    labels = pcd.point["label"].numpy() if "label" in pcd.point else None
    return _checked_cloud(positions, rgb, labels, path)
