"""Sampling and grouping kernels used by the set-abstraction and propagation layers."""

from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.spatial import cKDTree

from .errors import DataError

INTERP_EPS = 1e-8

# Upper bound on entries of a temporary (centroids x points) distance matrix
_CHUNK_ELEMENTS = 1_000_000


class SamplingSpec(BaseModel):
    """How an SA block picks its N centroids."""

    model_config = ConfigDict(frozen=True)

    method: Literal["fps", "random"] = "fps"
    n_centroids: int = Field(ge=1)
    seed: int = 0


class GroupingSpec(BaseModel):
    """How an SA block gathers K neighbours around each centroid."""

    model_config = ConfigDict(frozen=True)

    method: Literal["knn", "ball"] = "ball"
    k: int = Field(default=24, ge=1)
    radius: float | None = 0.01

    @model_validator(mode="after")
    def _radius_for_ball(self):
        if self.method == "ball" and (self.radius is None or not self.radius > 0):
            raise ValueError("ball grouping needs a positive radius")
        return self


def _as_points(positions) -> np.ndarray:
    points = np.asarray(positions, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise DataError(f"expected an (M, 3) point array, got {points.shape}")
    return points


def farthest_point_sample(positions, n: int, seed: int = 0) -> np.ndarray:
    """
    Greedy farthest point sampling.

    The first index is seed mod M; every next index maximizes the squared
    distance to the chosen set (ties -> lowest index). When n > M the
    selection is repeated cyclically to length n.
    """
    points = _as_points(positions)
    m = len(points)
    if m == 0:
        raise DataError("farthest_point_sample on an empty cloud")
    if n < 1:
        raise DataError(f"n must be >= 1, got {n}")

    count = min(n, m)
    selected = np.empty(count, dtype=np.int64)
    min_dist = np.full(m, np.inf)
    current = seed % m
    for i in range(count):
        selected[i] = current
        delta = points - points[current]
        min_dist = np.minimum(min_dist, np.einsum("ij,ij->i", delta, delta))
        # chosen points can never win again, even among duplicates
        min_dist[current] = -1.0
        current = int(np.argmax(min_dist))

    if n > m:
        return np.resize(selected, n)
    return selected


def random_sample(positions, n: int, seed: int = 0) -> np.ndarray:
    """Uniform sampling without replacement (with replacement only when n > M)."""
    points = _as_points(positions)
    m = len(points)
    if m == 0:
        raise DataError("random_sample on an empty cloud")
    if n < 1:
        raise DataError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    if n <= m:
        return rng.permutation(m)[:n].astype(np.int64)
    return rng.choice(m, size=n, replace=True).astype(np.int64)


def sample(positions, spec: SamplingSpec) -> np.ndarray:
    if spec.method == "fps":
        return farthest_point_sample(positions, spec.n_centroids, spec.seed)
    return random_sample(positions, spec.n_centroids, spec.seed)


def ball_query(positions, centroids, radius: float, k: int) -> np.ndarray:
    """
    First k points (ascending index) within radius of each centroid.

    Short groups are padded with their first member; empty groups are filled
    with the index of the nearest point.
    """
    points = _as_points(positions)
    centers = _as_points(centroids)
    if len(points) == 0:
        raise DataError("ball_query on an empty cloud")
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if not radius > 0:
        raise DataError(f"radius must be positive, got {radius}")

    tree = cKDTree(points)
    members = tree.query_ball_point(centers, r=radius, return_sorted=True)
    groups = np.empty((len(centers), k), dtype=np.int64)
    empty = []
    for row, found in enumerate(members):
        if not found:
            empty.append(row)
            continue
        found = found[:k]
        groups[row, : len(found)] = found
        groups[row, len(found) :] = found[0]
    if empty:
        _, nearest = tree.query(centers[empty], k=1)
        groups[empty] = np.asarray(nearest, dtype=np.int64)[:, None]
    return groups


def knn_query(positions, centroids, k: int) -> np.ndarray:
    """k nearest points per centroid, distance ascending, ties by lowest index."""
    points = _as_points(positions)
    centers = _as_points(centroids)
    m = len(points)
    if m == 0:
        raise DataError("knn_query on an empty cloud")
    if k < 1 or k > m:
        raise DataError(f"k must be in [1, {m}], got {k}")

    groups = np.empty((len(centers), k), dtype=np.int64)
    chunk = max(1, _CHUNK_ELEMENTS // m)
    for start in range(0, len(centers), chunk):
        block = centers[start : start + chunk]
        d2 = squared_distances(block, points)
        # stable sort keeps index order among equal distances
        groups[start : start + chunk] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return groups


def squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact pairwise squared distances, (len(a), len(b))."""
    delta = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", delta, delta)


def group(positions, centroids, spec: GroupingSpec) -> np.ndarray:
    if spec.method == "ball":
        return ball_query(positions, centroids, spec.radius, spec.k)
    k = min(spec.k, len(positions))
    groups = knn_query(positions, centroids, k)
    if k < spec.k:
        pad = np.repeat(groups[:, :1], spec.k - k, axis=1)
        groups = np.concatenate([groups, pad], axis=1)
    return groups


def three_nn_interpolate_weights(queries, sources) -> tuple[np.ndarray, np.ndarray]:
    """
    Inverse squared distance weights over the 3 nearest sources.

    Returns (indices (Q, 3), weights (Q, 3)); rows sum to 1. With fewer than
    3 sources the nearest one fills the missing slots.
    """
    q = _as_points(queries)
    s = _as_points(sources)
    if len(s) == 0:
        raise DataError("three_nn_interpolate_weights needs at least one source")

    k = min(3, len(s))
    indices = knn_query(s, q, k)
    if k < 3:
        indices = np.concatenate([indices, np.repeat(indices[:, :1], 3 - k, axis=1)], axis=1)

    delta = s[indices] - q[:, None, :]
    d2 = np.einsum("ijk,ijk->ij", delta, delta)
    inv = 1.0 / (d2 + INTERP_EPS)
    weights = inv / inv.sum(axis=1, keepdims=True)
    return indices, weights
