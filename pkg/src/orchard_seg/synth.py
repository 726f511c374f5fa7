"""
Synthetic labeled orchard scenes.

A scene is a ground patch, a trunk, a few branches, a canopy of leaf discs
and non-overlapping fruit spheres, all sampled as surfaces at a fixed point
density. Fruit points are labeled FRUIT, everything else BACKGROUND.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.spatial import cKDTree

from .cloud import BACKGROUND, FRUIT, PointCloud
from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

MAX_POINTS = 1_000_000

TRUNK_RADIUS = 0.08
BRANCH_RADIUS = 0.025
LEAF_RADIUS = 0.035
# depth noise of a stereo camera grows with the square of the distance
RGBD_SIGMA0 = 0.002

ColorMode = Literal["separable", "geometry-only", "ambiguous"]

# mean RGB per component; per-point jitter is added on top
PALETTE = {
    "ground": (0.36, 0.30, 0.22),
    "bark": (0.40, 0.28, 0.16),
    "leaf": (0.22, 0.52, 0.16),
    "fruit": (0.80, 0.16, 0.12),
}
COLOR_JITTER = 0.04


class SceneRecipe(BaseModel):
    """Everything that determines a synthetic scene."""

    model_config = ConfigDict(frozen=True)

    # (width x, height z, depth y) in meters
    extent: tuple[float, float, float] = (2.5, 3.0, 2.0)
    fruit_count: int = Field(default=40, ge=0)
    fruit_radius: float = Field(default=0.04, gt=0)
    point_density: float = Field(default=8000.0, gt=0)
    color_mode: ColorMode = "separable"
    noise_sigma: float = Field(default=0.003, ge=0)
    leaf_area: float = Field(default=11.0, ge=0)
    branch_count: int = Field(default=8, ge=0)
    include_ground: bool = True
    seed: int = 0

    @field_validator("extent")
    @classmethod
    def _positive_extent(cls, value):
        if any(not v > 0 for v in value):
            raise ValueError(f"extent must be positive, got {value}")
        return value

    @property
    def trunk_height(self) -> float:
        return 0.4 * self.extent[1]

    @property
    def canopy_center(self) -> np.ndarray:
        return np.array([0.0, 0.0, 0.675 * self.extent[1]])

    @property
    def canopy_semi_axes(self) -> np.ndarray:
        width, height, depth = self.extent
        return np.array([0.45 * width, 0.45 * depth, 0.275 * height])


@dataclass(frozen=True)
class SyntheticScene:
    cloud: PointCloud
    fruit_centers: np.ndarray
    recipe: SceneRecipe

    @property
    def fruit_fraction(self) -> float:
        return float(np.mean(self.cloud.labels == FRUIT)) if len(self.cloud) else 0.0


def expected_fruit_fraction(recipe: SceneRecipe) -> float:
    """Share of fruit points implied by the recipe's surface areas (before leaf clipping)."""
    fruit = recipe.fruit_count * 4.0 * np.pi * recipe.fruit_radius**2
    other = recipe.leaf_area + 2.0 * np.pi * TRUNK_RADIUS * recipe.trunk_height
    if recipe.include_ground:
        other += recipe.extent[0] * recipe.extent[2]
    # branches reach roughly the canopy radius
    other += recipe.branch_count * 2.0 * np.pi * BRANCH_RADIUS * float(recipe.canopy_semi_axes.mean())
    total = fruit + other
    return float(fruit / total) if total > 0 else 0.0


def rgbd_sigma(distance: float) -> float:
    return RGBD_SIGMA0 * distance**2


def _unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return v / norms


def _inside_ellipsoid(rng: np.random.Generator, center: np.ndarray, semi: np.ndarray, n: int) -> np.ndarray:
    radii = rng.uniform(size=n) ** (1.0 / 3.0)
    return center + semi * _unit_vectors(rng, n) * radii[:, None]


def _perpendicular_basis(axes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two unit vectors orthogonal to each (unit) axis row and to each other."""
    helper = np.where(np.abs(axes[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    a = np.cross(axes, helper)
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b = np.cross(axes, a)
    return a, b


def _cylinder_surface(rng, start: np.ndarray, end: np.ndarray, radius: float, n: int) -> np.ndarray:
    axis = end - start
    length = float(np.linalg.norm(axis))
    unit = (axis / length)[None, :]
    a, b = _perpendicular_basis(unit)
    t = rng.uniform(0.0, length, size=n)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    return start + t[:, None] * unit + radius * (np.cos(theta)[:, None] * a + np.sin(theta)[:, None] * b)


def _place_fruits(rng: np.random.Generator, recipe: SceneRecipe) -> np.ndarray:
    """Non-overlapping fruit centers inside the canopy, by rejection."""
    r = recipe.fruit_radius
    semi = np.maximum(recipe.canopy_semi_axes - r, r)
    min_gap = 2.1 * r
    centers: list[np.ndarray] = []
    attempts = 0
    while len(centers) < recipe.fruit_count:
        attempts += 1
        if attempts > 200 * max(recipe.fruit_count, 1):
            raise ConfigError(f"could not place {recipe.fruit_count} fruits of radius {r} in the canopy")
        candidate = _inside_ellipsoid(rng, recipe.canopy_center, semi, 1)[0]
        if all(np.linalg.norm(candidate - c) >= min_gap for c in centers):
            centers.append(candidate)
    return np.array(centers).reshape(-1, 3)


def _count(area: float, density: float) -> int:
    return int(round(area * density))


def build_scene(recipe: SceneRecipe) -> SyntheticScene:
    """Generate the scene and keep the fruit centers for geometric checks."""
    geometry = np.random.default_rng([recipe.seed, 0])
    palette_rng = np.random.default_rng([recipe.seed, 1])
    noise_rng = np.random.default_rng([recipe.seed, 2])
    width, height, depth = recipe.extent
    density = recipe.point_density

    # skeleton first, so the size check happens before any sampling
    trunk_top = np.array([0.0, 0.0, recipe.trunk_height])
    branch_ends = _inside_ellipsoid(geometry, recipe.canopy_center, recipe.canopy_semi_axes, recipe.branch_count)
    fruit_centers = _place_fruits(geometry, recipe)
    n_leaves = int(round(recipe.leaf_area / (np.pi * LEAF_RADIUS**2)))
    per_leaf = _count(np.pi * LEAF_RADIUS**2, density)

    counts = {
        "ground": _count(width * depth, density) if recipe.include_ground else 0,
        "trunk": _count(2.0 * np.pi * TRUNK_RADIUS * recipe.trunk_height, density),
        "branches": sum(
            _count(2.0 * np.pi * BRANCH_RADIUS * float(np.linalg.norm(end - trunk_top)), density)
            for end in branch_ends
        ),
        "leaves": n_leaves * per_leaf,
        "fruits": recipe.fruit_count * _count(4.0 * np.pi * recipe.fruit_radius**2, density),
    }
    total = sum(counts.values())
    if total > MAX_POINTS:
        raise ConfigError(f"recipe would produce {total} points (limit {MAX_POINTS})")

    parts: list[tuple[str, np.ndarray]] = []
    if recipe.include_ground:
        ground = np.column_stack([
            geometry.uniform(-width / 2, width / 2, counts["ground"]),
            geometry.uniform(-depth / 2, depth / 2, counts["ground"]),
            np.zeros(counts["ground"]),
        ])
        parts.append(("ground", ground))
    parts.append(("bark", _cylinder_surface(geometry, np.zeros(3), trunk_top, TRUNK_RADIUS, counts["trunk"])))
    for end in branch_ends:
        n = _count(2.0 * np.pi * BRANCH_RADIUS * float(np.linalg.norm(end - trunk_top)), density)
        if n:
            parts.append(("bark", _cylinder_surface(geometry, trunk_top, end, BRANCH_RADIUS, n)))

    if n_leaves and per_leaf:
        leaf_centers = _inside_ellipsoid(geometry, recipe.canopy_center, recipe.canopy_semi_axes, n_leaves)
        a, b = _perpendicular_basis(_unit_vectors(geometry, n_leaves))
        owner = np.repeat(np.arange(n_leaves), per_leaf)
        rho = LEAF_RADIUS * np.sqrt(geometry.uniform(size=len(owner)))
        theta = geometry.uniform(0.0, 2.0 * np.pi, size=len(owner))
        leaves = leaf_centers[owner] + rho[:, None] * (np.cos(theta)[:, None] * a[owner] + np.sin(theta)[:, None] * b[owner])
        parts.append(("leaf", leaves))

    per_fruit = _count(4.0 * np.pi * recipe.fruit_radius**2, density)
    fruit_points = np.concatenate(
        [c + recipe.fruit_radius * _unit_vectors(geometry, per_fruit) for c in fruit_centers]
    ) if recipe.fruit_count and per_fruit else np.empty((0, 3))

    # nothing else may pass through a fruit
    if len(fruit_centers):
        tree = cKDTree(fruit_centers)
        clipped = []
        for name, points in parts:
            dist, _ = tree.query(points, k=1)
            clipped.append((name, points[dist >= recipe.fruit_radius]))
        parts = clipped

    positions = np.concatenate([p for _, p in parts] + [fruit_points])
    labels = np.concatenate(
        [np.full(len(p), BACKGROUND, dtype=np.int64) for _, p in parts]
        + [np.full(len(fruit_points), FRUIT, dtype=np.int64)]
    )
    colors = _colorize(palette_rng, recipe, parts, fruit_centers, per_fruit)
    positions = positions + _truncated_noise(noise_rng, len(positions), recipe.noise_sigma)

    cloud = PointCloud(positions, colors, labels)
    scene = SyntheticScene(cloud, fruit_centers, recipe)
    logger.info(f"Generated scene seed={recipe.seed}: {len(cloud)} points, fruit fraction {scene.fruit_fraction:.3f}")
    return scene


def _colorize(
    rng: np.random.Generator,
    recipe: SceneRecipe,
    parts: list[tuple[str, np.ndarray]],
    fruit_centers: np.ndarray,
    per_fruit: int,
) -> np.ndarray:
    def jittered(base, n: int) -> np.ndarray:
        return np.clip(np.asarray(base) + rng.normal(0.0, COLOR_JITTER, size=(n, 3)), 0.0, 1.0)

    if recipe.color_mode == "geometry-only":
        # one distribution for every point, so only shape separates the classes
        n = sum(len(p) for _, p in parts) + len(fruit_centers) * per_fruit
        return jittered(PALETTE["leaf"], n) if n else np.empty((0, 3))

    chunks = [jittered(PALETTE[name], len(points)) for name, points in parts]
    leaf, fruit = np.asarray(PALETTE["leaf"]), np.asarray(PALETTE["fruit"])
    for _ in range(len(fruit_centers)):
        if recipe.color_mode == "ambiguous":
            # unripe fruit: somewhere between leaf green and ripe red
            ripeness = rng.uniform(0.0, 1.0)
            base = leaf + ripeness * (fruit - leaf)
        else:
            base = fruit + rng.normal(0.0, 0.03, size=3)
        chunks.append(jittered(base, per_fruit))
    return np.concatenate(chunks) if chunks else np.empty((0, 3))


def _truncated_noise(rng: np.random.Generator, n: int, sigma: float) -> np.ndarray:
    """Isotropic Gaussian offsets, each shortened to at most 3 sigma."""
    if sigma == 0 or n == 0:
        return np.zeros((n, 3))
    noise = rng.normal(0.0, sigma, size=(n, 3))
    norms = np.linalg.norm(noise, axis=1, keepdims=True)
    limit = 3.0 * sigma
    return np.where(norms > limit, noise * (limit / norms), noise)


def generate_scene(recipe: SceneRecipe) -> PointCloud:
    """Labeled, colorized scene; bit-identical for the same recipe."""
    return build_scene(recipe).cloud


def generate_rgbd_like(recipe: SceneRecipe, distance: float) -> PointCloud:
    """The recipe's scene with the noise of a depth camera at the given distance."""
    if distance < 0:
        raise DataError(f"distance must be non-negative, got {distance}")
    return generate_scene(recipe.model_copy(update={"noise_sigma": rgbd_sigma(distance)}))


def write_manifest(path: str | Path, recipes: list[SceneRecipe], files: list[str]) -> None:
    """JSON list of {file, recipe} entries."""
    entries = [{"file": name, "recipe": json.loads(r.model_dump_json())} for name, r in zip(files, recipes)]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"scenes": entries}, indent=2) + "\n", encoding="utf-8")
