"""Point cloud container, voxel downsampling and statistical outlier removal."""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError

logger = logging.getLogger(__name__)

BACKGROUND = 0
FRUIT = 1

DEFAULT_OUTLIER_K = 16
DEFAULT_STD_RATIO = 2.0


@dataclass(frozen=True)
class PointCloud:
    """
    Columnar point set.

    positions: (M, 3) float64 meters
    colors: optional (M, 3) float64 in [0, 1]
    labels: optional (M,) int64 class ids (0 = background, 1 = fruit)
    """

    positions: np.ndarray
    colors: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.float64)
        if positions.size == 0:
            positions = positions.reshape(0, 3)
        if positions.ndim != 2 or positions.shape[1] != 3:
            raise DataError(f"positions must be (M, 3), got {positions.shape}")
        if not np.all(np.isfinite(positions)):
            raise DataError("positions contain non-finite values")
        object.__setattr__(self, "positions", positions)

        m = len(positions)
        if self.colors is not None:
            colors = np.asarray(self.colors, dtype=np.float64)
            if colors.size == 0:
                colors = colors.reshape(0, 3)
            if colors.shape != (m, 3):
                raise DataError(f"colors must be ({m}, 3), got {colors.shape}")
            if not np.all(np.isfinite(colors)) or colors.min(initial=0.0) < 0.0 or colors.max(initial=0.0) > 1.0:
                raise DataError("colors must lie in [0, 1]")
            object.__setattr__(self, "colors", colors)
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.size == 0:
                labels = labels.reshape(0)
            if labels.shape != (m,):
                raise DataError(f"labels must be ({m},), got {labels.shape}")
            if m and not np.issubdtype(labels.dtype, np.integer):
                if not np.all(labels == np.round(labels)):
                    raise DataError("labels must be integers")
            labels = labels.astype(np.int64)
            if m and labels.min() < 0:
                raise DataError("labels must be non-negative")
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def has_colors(self) -> bool:
        return self.colors is not None

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def subset(self, indices: np.ndarray) -> "PointCloud":
        """Select points by index (or boolean mask), keeping every present field."""
        indices = np.asarray(indices)
        return PointCloud(
            positions=self.positions[indices],
            colors=None if self.colors is None else self.colors[indices],
            labels=None if self.labels is None else self.labels[indices],
        )

    def with_labels(self, labels: np.ndarray) -> "PointCloud":
        return PointCloud(self.positions, self.colors, labels)

    def with_colors(self, colors: np.ndarray | None) -> "PointCloud":
        return PointCloud(self.positions, colors, self.labels)

    def translated(self, offset: Sequence[float]) -> "PointCloud":
        return PointCloud(self.positions + np.asarray(offset, dtype=np.float64), self.colors, self.labels)

    def check_classes(self, n_classes: int) -> None:
        """Raise if any label is outside [0, n_classes)."""
        if self.labels is not None and len(self) and self.labels.max() >= n_classes:
            raise DataError(f"label {int(self.labels.max())} out of range for {n_classes} classes")


@dataclass(frozen=True)
class VoxelSpec:
    """Uniform voxel grid, meters per axis."""

    cell_size: float = 0.01

    def __post_init__(self):
        if not self.cell_size > 0:
            raise DataError(f"voxel cell size must be positive, got {self.cell_size}")


def concatenate(clouds: Sequence[PointCloud]) -> PointCloud:
    """Concatenate clouds that carry the same optional fields."""
    if not clouds:
        raise DataError("nothing to concatenate")
    has_colors = {c.has_colors for c in clouds}
    has_labels = {c.has_labels for c in clouds}
    if len(has_colors) > 1 or len(has_labels) > 1:
        raise DataError("clouds mix presence of colors/labels")
    return PointCloud(
        positions=np.concatenate([c.positions for c in clouds]),
        colors=np.concatenate([c.colors for c in clouds]) if has_colors.pop() else None,
        labels=np.concatenate([c.labels for c in clouds]) if has_labels.pop() else None,
    )


def voxel_indices(positions: np.ndarray, cell_size: float) -> np.ndarray:
    """Integer voxel coordinates on the global grid anchored at the origin."""
    return np.floor(positions / cell_size).astype(np.int64)


def voxel_downsample(cloud: PointCloud, spec: VoxelSpec) -> PointCloud:
    """
    Replace the points of every occupied voxel with their centroid.

    Colors are averaged; labels take the majority (ties -> lowest class id).
    Output voxels are ordered lexicographically by voxel index, so the result
    is independent of input order.
    """
    if len(cloud) == 0:
        raise DataError("voxel_downsample needs a non-empty cloud")

    keys = voxel_indices(cloud.positions, spec.cell_size)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n_voxels = len(counts)

    def mean_of(values: np.ndarray) -> np.ndarray:
        sums = np.stack(
            [np.bincount(inverse, weights=values[:, i], minlength=n_voxels) for i in range(values.shape[1])],
            axis=1,
        )
        return sums / counts[:, None]

    positions = mean_of(cloud.positions)
    colors = np.clip(mean_of(cloud.colors), 0.0, 1.0) if cloud.has_colors else None
    labels = None
    if cloud.has_labels:
        n_classes = int(cloud.labels.max()) + 1
        votes = np.bincount(inverse * n_classes + cloud.labels, minlength=n_voxels * n_classes)
        labels = votes.reshape(n_voxels, n_classes).argmax(axis=1)

    logger.debug(f"Voxelized {len(cloud)} points into {n_voxels} cells of {spec.cell_size} m")
    return PointCloud(positions, colors, labels)


def mean_neighbor_distances(positions: np.ndarray, k: int) -> np.ndarray:
    """Mean distance from each point to its k nearest neighbours (self excluded)."""
    tree = cKDTree(positions)
    dists, _ = tree.query(positions, k=k + 1)
    # column 0 is the point itself (distance 0)
    return dists[:, 1:].mean(axis=1)


def remove_outliers(
    cloud: PointCloud,
    k: int = DEFAULT_OUTLIER_K,
    std_ratio: float = DEFAULT_STD_RATIO,
) -> PointCloud:
    """
    Statistical outlier removal.

    Drops points whose mean k-NN distance exceeds the global mean plus
    std_ratio global standard deviations. Survivors keep their order.
    """
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if not std_ratio > 0:
        raise DataError(f"std_ratio must be positive, got {std_ratio}")
    if k >= len(cloud):
        raise DataError(f"k={k} must be smaller than the point count {len(cloud)}")

    mean_dists = mean_neighbor_distances(cloud.positions, k)
    threshold = mean_dists.mean() + std_ratio * mean_dists.std()
    keep = np.flatnonzero(mean_dists <= threshold)

    removed = len(cloud) - len(keep)
    if removed:
        logger.info(f"Outlier removal dropped {removed} of {len(cloud)} points (threshold {threshold:.4f} m)")
    return cloud.subset(keep)
