"""LiDAR-camera fusion: pinhole projection with plumb-bob distortion, colorization and frame accumulation."""

import logging
import re
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy.spatial.transform import Rotation

from .cloud import PointCloud, concatenate
from .errors import DataError, ParseError

logger = logging.getLogger(__name__)

MIN_DEPTH = 1e-6
ORTHONORMAL_TOL = 1e-9
# calibration files with printed decimals are snapped onto SO(3) below this deviation
SNAP_TOL = 1e-3


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics with (k1, k2, p1, p2, k3) plumb-bob distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    distortion: tuple[float, float, float, float, float] = (0.0, 0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DataError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise DataError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )
        if len(self.distortion) != 5:
            raise DataError(f"expected 5 distortion coefficients, got {len(self.distortion)}")
        object.__setattr__(self, "distortion", tuple(float(c) for c in self.distortion))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Extrinsic:
    """Rigid LiDAR -> camera transform q = R p + t."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise DataError(f"extrinsic needs a 3x3 rotation and a 3-vector, got {rotation.shape} and {translation.shape}")
        if not np.allclose(rotation.T @ rotation, np.eye(3), rtol=0.0, atol=ORTHONORMAL_TOL):
            raise DataError("extrinsic rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOL:
            raise DataError("extrinsic rotation has determinant != +1")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "Extrinsic":
        return cls()


@dataclass(frozen=True)
class ColorImage:
    """Row-major RGB image, pixels (height, width, 3) in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise DataError(f"image pixels must be (H, W, 3), got {pixels.shape}")
        if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
            raise DataError("image pixels must lie in [0, 1]")
        object.__setattr__(self, "pixels", pixels)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def distort(x: np.ndarray, y: np.ndarray, coeffs: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Apply plumb-bob distortion to normalized image coordinates."""
    k1, k2, p1, p2, k3 = coeffs
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2 + k3 * r2 * r2 * r2
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    return xd, yd


def project_points(positions: np.ndarray, cam: CameraModel, ext: Extrinsic) -> tuple[np.ndarray, np.ndarray]:
    """
    Project LiDAR-frame points into the image.

    Returns (uv (M, 2), visible (M,)); uv rows of invisible points are NaN.
    """
    points = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    q = points @ ext.rotation.T + ext.translation
    in_front = q[:, 2] > MIN_DEPTH

    uv = np.full((len(points), 2), np.nan)
    z = q[in_front, 2]
    xd, yd = distort(q[in_front, 0] / z, q[in_front, 1] / z, cam.distortion)
    u = cam.fx * xd + cam.cx
    v = cam.fy * yd + cam.cy
    uv[in_front, 0] = u
    uv[in_front, 1] = v

    visible = np.zeros(len(points), dtype=bool)
    visible[in_front] = (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    uv[~visible] = np.nan
    return uv, visible


def project_point(p: Sequence[float], cam: CameraModel, ext: Extrinsic) -> tuple[float, float] | None:
    """Pixel coordinate of one LiDAR-frame point, or None when it is outside the frustum."""
    uv, visible = project_points(np.asarray(p, dtype=np.float64)[None, :], cam, ext)
    if not visible[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1])


def colorize(cloud: PointCloud, image: ColorImage, cam: CameraModel, ext: Extrinsic) -> PointCloud:
    """
    Color every point that projects into the image with its nearest pixel.

    Points outside the image are dropped; survivors keep their order.
    """
    if len(cloud) == 0:
        raise DataError("colorize needs a non-empty cloud")
    if (image.width, image.height) != (cam.width, cam.height):
        raise DataError(
            f"image is {image.width}x{image.height} but the camera model expects {cam.width}x{cam.height}"
        )

    uv, visible = project_points(cloud.positions, cam, ext)
    keep = np.flatnonzero(visible)
    # the pixel whose footprint contains (u, v)
    cols = np.floor(uv[keep, 0]).astype(np.int64)
    rows = np.floor(uv[keep, 1]).astype(np.int64)
    colored = cloud.subset(keep).with_colors(image.pixels[rows, cols])

    if len(keep) == 0:
        logger.warning("No point projects into the image; colorized cloud is empty")
    else:
        logger.info(f"Colorized {len(keep)} of {len(cloud)} points")
    return colored


def accumulate(frames: Sequence[PointCloud]) -> PointCloud:
    """Concatenate frames already expressed in a common frame."""
    if not frames:
        raise DataError("accumulate needs at least one frame")
    return concatenate(frames)


_CALIB_KEYS = ("fx", "fy", "cx", "cy", "width", "height")
_DISTORTION_KEYS = ("k1", "k2", "p1", "p2", "k3")


def read_calibration(path: str | Path) -> tuple[CameraModel, Extrinsic]:
    """
    Read a key=value calibration file.

    Keys: fx fy cx cy width height, optional k1 k2 p1 p2 k3, and
    extrinsic = 12 numbers, the 3x4 [R | t] LiDAR->camera matrix row-major.
    """
    values: dict[str, tuple[str, int]] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise DataError(f"no such file: {path}") from e

    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected key=value", line=number, path=str(path))
        key, _, value = line.partition("=")
        values[key.strip().lower()] = (value.strip(), number)

    def number_of(key: str, cast=float):
        raw, line = values[key]
        try:
            return cast(raw)
        except ValueError as e:
            raise ParseError(f"bad value for {key}: {raw!r}", line=line, path=str(path)) from e

    missing = [k for k in _CALIB_KEYS + ("extrinsic",) if k not in values]
    if missing:
        raise ParseError(f"missing calibration keys: {', '.join(missing)}", path=str(path))

    cam = CameraModel(
        fx=number_of("fx"),
        fy=number_of("fy"),
        cx=number_of("cx"),
        cy=number_of("cy"),
        width=number_of("width", int),
        height=number_of("height", int),
        distortion=tuple(number_of(k) if k in values else 0.0 for k in _DISTORTION_KEYS),
    )

    raw, line = values["extrinsic"]
    try:
        entries = [float(tok) for tok in re.split(r"[,\s]+", raw) if tok]
    except ValueError as e:
        raise ParseError(f"bad extrinsic entry: {e}", line=line, path=str(path)) from e
    if len(entries) != 12:
        raise ParseError(f"extrinsic needs 12 entries, found {len(entries)}", line=line, path=str(path))
    matrix = np.array(entries).reshape(3, 4)
    rotation, translation = matrix[:, :3], matrix[:, 3]

    deviation = np.abs(rotation.T @ rotation - np.eye(3)).max()
    if deviation > ORTHONORMAL_TOL:
        if deviation > SNAP_TOL or np.linalg.det(rotation) <= 0:
            raise ParseError("extrinsic rotation is not a rotation matrix", line=line, path=str(path))
        logger.warning(f"Re-orthonormalizing extrinsic rotation (deviation {deviation:.2e})")
        rotation = Rotation.from_matrix(rotation).as_matrix()
    return cam, Extrinsic(rotation, translation)


def read_ppm(path: str | Path) -> ColorImage:
    """Read an ASCII (P3) or 8-bit binary (P6) PPM image."""
    try:
        data = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    except FileNotFoundError as e:
        raise DataError(f"no such file: {path}") from e

    bgr = cv2.imdecode(data, cv2.IMREAD_UNCHANGED) if len(data) else None
    if bgr is None:
        raise ParseError("not a readable PPM image", path=str(path))
    if bgr.ndim != 3 or bgr.shape[2] != 3:
        raise ParseError(f"expected a 3-channel color image, got shape {bgr.shape}", path=str(path))
    if bgr.dtype != np.uint8:
        raise ParseError(f"only 8-bit PPM is supported (got {bgr.dtype})", path=str(path))
    return ColorImage(bgr[..., ::-1].astype(np.float64) / 255.0)


def write_ppm(image: ColorImage, path: str | Path, binary: bool = True) -> None:
    """Write an 8-bit PPM (P6 by default, P3 when binary=False)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    bgr = np.ascontiguousarray(np.rint(image.pixels[..., ::-1] * 255.0).astype(np.uint8))
    ok, encoded = cv2.imencode(".ppm", bgr, [cv2.IMWRITE_PXM_BINARY, int(binary)])
    if not ok:
        raise DataError(f"failed to encode {path}")
    path.write_bytes(encoded.tobytes())
