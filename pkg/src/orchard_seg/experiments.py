"""Ablation runs on synthetic scenes: color fusion, class imbalance handling and depth-camera noise."""

import csv
import io
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .autodiff import ParameterStore
from .cloud import PointCloud
from .inference import infer_scene
from .kernels import knn_query
from .metrics import ConfusionMatrix, miou
from .octree import PartitionSpec
from .segnet import ColorBranchSpec, Fusion, NetworkSpec
from .synth import ColorMode, SceneRecipe, generate_rgbd_like, generate_scene
from .training import (
    TrainConfig,
    TrainingSample,
    evaluate_samples,
    make_dataset,
    split_scenes,
    train,
)

logger = logging.getLogger(__name__)

RGBD_DISTANCES = (0.8, 1.2, 1.6, 2.0)

# desk-scale scene: roughly 28k points, about 7% fruit
DESK_RECIPE = SceneRecipe(
    extent=(1.2, 1.5, 1.0),
    fruit_count=15,
    leaf_area=2.5,
    branch_count=4,
    point_density=6000.0,
)

# grouping radii for the desk recipe's ~1.3 cm point spacing
DESK_RADII = (0.03, 0.06, 0.12, 0.24)

# per-point RGB only, so geometry-only scenes give late fusion nothing to use
DESK_COLOR_BRANCH = ColorBranchSpec(mode="pointwise", mlp_channels=(8,), channels=16)


class ExperimentConfig(BaseModel):
    """Shared setup of every ablation run."""

    model_config = ConfigDict(frozen=True)

    n_scenes: int = Field(default=8, ge=4)
    recipe: SceneRecipe = DESK_RECIPE
    radii: tuple[float, float, float, float] = DESK_RADII
    color_branch: ColorBranchSpec = DESK_COLOR_BRANCH
    train: TrainConfig = TrainConfig(
        class_weights=(0.75, 1.25),
        min_object_points=100,
        seeds_per_scene=150,
        lr0=0.003,
        epochs=20,
        batch_size=8,
        samples_per_epoch=64,
    )
    # share of the training scenes kept back for checkpoint selection
    validation_fraction: float = Field(default=0.25, gt=0, lt=1)
    validation_seeds: int = Field(default=50, ge=1)
    eval_seeds: int = Field(default=100, ge=1)
    # each variant is trained n_runs times; the best validation run is scored
    n_runs: int = Field(default=3, ge=1)
    # held-out crops (under-sampled like the training data) or whole held-out scenes
    evaluation: Literal["blocks", "scenes"] = "blocks"
    seed: int = 0


@dataclass(frozen=True)
class AblationRow:
    experiment: str
    variant: str
    miou: float


def synthetic_split(cfg: ExperimentConfig, color_mode: ColorMode) -> tuple[list[SceneRecipe], list[SceneRecipe]]:
    """Scene recipes split half/half into training and held-out."""
    recipes = [
        cfg.recipe.model_copy(update={"seed": cfg.seed + i, "color_mode": color_mode})
        for i in range(cfg.n_scenes)
    ]
    return split_scenes(recipes, 0.5, cfg.seed)


def network_spec(cfg: ExperimentConfig, fusion: Fusion) -> NetworkSpec:
    """Reduced network with the experiment's grouping radii and color branch."""
    return NetworkSpec.reduced(fusion=fusion, radii=cfg.radii, color_branch=cfg.color_branch)


def scenes_miou(scenes: Sequence[PointCloud], spec: NetworkSpec, params, seed: int = 0) -> float:
    """mIoU of partitioned inference over whole labeled scenes."""
    cm = ConfusionMatrix(spec.n_classes)
    partition = PartitionSpec(capacity=spec.block_size)
    for scene in scenes:
        cm.update(scene.labels, infer_scene(scene, spec, params, partition, seed))
    return miou(cm)[1]


def evaluation_blocks(scenes: Sequence[PointCloud], spec: NetworkSpec, cfg: ExperimentConfig) -> list[TrainingSample]:
    """Held-out crops, thresholded like the training crops of the reference configuration."""
    return make_dataset(scenes, spec.block_size, cfg.eval_seeds, cfg.train.min_object_points, cfg.seed + 2)


def recrop(
    samples: Sequence[TrainingSample],
    clean: Sequence[PointCloud],
    noisy: Sequence[PointCloud],
) -> list[TrainingSample]:
    """The same point indices as each clean crop, taken from the noisy version of its scene."""
    out = []
    for sample in samples:
        scene = clean[sample.scene]
        crop = knn_query(scene.positions, scene.positions[[sample.seed_point]], len(sample.block))[0]
        out.append(TrainingSample(noisy[sample.scene].subset(crop), sample.scene, sample.seed_point))
    return out


def held_out_miou(
    scenes: Sequence[PointCloud],
    spec: NetworkSpec,
    params: ParameterStore,
    cfg: ExperimentConfig,
    blocks: Sequence[TrainingSample] | None = None,
) -> float:
    if cfg.evaluation == "scenes":
        return scenes_miou(scenes, spec, params, cfg.seed)
    blocks = evaluation_blocks(scenes, spec, cfg) if blocks is None else blocks
    if not blocks:
        logger.warning("No held-out crop reaches the fruit threshold; scoring whole scenes instead")
        return scenes_miou(scenes, spec, params, cfg.seed)
    return evaluate_samples(blocks, spec, params)


def train_variant(
    train_scenes: Sequence[PointCloud],
    spec: NetworkSpec,
    train_cfg: TrainConfig,
    cfg: ExperimentConfig,
) -> ParameterStore:
    """
    Train cfg.n_runs times and keep the run with the best validation mIoU.

    Validation crops come from a share of the training scenes, so the
    held-out scenes are never seen before scoring.
    """
    fit, val = split_scenes(train_scenes, 1.0 - cfg.validation_fraction, cfg.seed)
    dataset = make_dataset(
        fit, spec.block_size, train_cfg.seeds_per_scene, train_cfg.min_object_points, train_cfg.seed
    )
    validation = make_dataset(
        val, spec.block_size, cfg.validation_seeds, cfg.train.min_object_points, train_cfg.seed + 1
    )

    best: ParameterStore | None = None
    best_score = -np.inf
    for run in range(cfg.n_runs):
        run_cfg = train_cfg.model_copy(update={"seed": train_cfg.seed + run})
        params, history = train(dataset, spec, run_cfg, validation or None)
        scores = [row.val_miou for row in history if row.val_miou is not None]
        # without validation crops the lowest final loss wins
        score = max(scores) if scores else -history[-1].train_loss
        logger.info(f"Run {run + 1}/{cfg.n_runs}: selection score {score:.4f}")
        if score > best_score:
            best, best_score = params, score
    return best


def fusion_ablation(
    cfg: ExperimentConfig,
    fusions: Sequence[Fusion] = ("none", "late"),
    color_modes: Sequence[ColorMode] = ("separable", "geometry-only"),
) -> list[AblationRow]:
    """Held-out mIoU per (color mode, fusion) pair."""
    rows = []
    for mode in color_modes:
        train_recipes, test_recipes = synthetic_split(cfg, mode)
        train_scenes = [generate_scene(r) for r in train_recipes]
        test_scenes = [generate_scene(r) for r in test_recipes]
        for fusion in fusions:
            spec = network_spec(cfg, fusion)
            params = train_variant(train_scenes, spec, cfg.train, cfg)
            score = held_out_miou(test_scenes, spec, params, cfg)
            logger.info(f"fusion ablation {mode}/{fusion}: mIoU {score:.4f}")
            rows.append(AblationRow("fusion", f"{mode}/{fusion}", score))
    return rows


def imbalance_ablation(
    cfg: ExperimentConfig,
    fusion: Fusion = "late",
    color_mode: ColorMode = "ambiguous",
) -> list[AblationRow]:
    """
    Without under-sampling, with under-sampling, and with under-sampling plus weighted loss.

    Every variant draws the same number of crops per epoch, so they differ
    only in which crops they learn from and how the loss weighs the classes.
    Unripe (ambiguous) fruit colors keep geometry in play.
    """
    train_recipes, test_recipes = synthetic_split(cfg, color_mode)
    train_scenes = [generate_scene(r) for r in train_recipes]
    test_scenes = [generate_scene(r) for r in test_recipes]
    spec = network_spec(cfg, fusion)
    variants = {
        "no-us/ce": cfg.train.model_copy(update={"min_object_points": 0, "class_weights": (1.0, 1.0)}),
        "us/ce": cfg.train.model_copy(update={"class_weights": (1.0, 1.0)}),
        "us/wce": cfg.train,
    }
    blocks = evaluation_blocks(test_scenes, spec, cfg)
    rows = []
    for name, train_cfg in variants.items():
        params = train_variant(train_scenes, spec, train_cfg, cfg)
        score = held_out_miou(test_scenes, spec, params, cfg, blocks)
        logger.info(f"imbalance ablation {name}: mIoU {score:.4f}")
        rows.append(AblationRow("imbalance", name, score))
    return rows


def rgbd_sweep(
    cfg: ExperimentConfig,
    distances: Sequence[float] = RGBD_DISTANCES,
    fusions: Sequence[Fusion] = ("none", "late"),
) -> list[AblationRow]:
    """
    Train on noise-free scenes, score held-out scenes with depth-camera noise at each distance.

    Every distance is scored on the same crops (same point indices), so
    only the noise level changes between rows.
    """
    train_recipes, test_recipes = synthetic_split(cfg, "separable")
    train_scenes = [generate_scene(r.model_copy(update={"noise_sigma": 0.0})) for r in train_recipes]
    clean_test = [generate_scene(r.model_copy(update={"noise_sigma": 0.0})) for r in test_recipes]
    noisy_tests = {d: [generate_rgbd_like(r, d) for r in test_recipes] for d in distances}
    rows = []
    for fusion in fusions:
        spec = network_spec(cfg, fusion)
        params = train_variant(train_scenes, spec, cfg.train, cfg)
        clean_blocks = evaluation_blocks(clean_test, spec, cfg) if cfg.evaluation == "blocks" else []
        for distance in distances:
            noisy = noisy_tests[distance]
            blocks = recrop(clean_blocks, clean_test, noisy) if clean_blocks else None
            score = held_out_miou(noisy, spec, params, cfg, blocks)
            logger.info(f"rgbd sweep {fusion} @ {distance} m: mIoU {score:.4f}")
            rows.append(AblationRow("rgbd", f"{fusion}@{distance:g}", score))
    return rows


def rows_to_csv(rows: Sequence[AblationRow]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["experiment", "variant", "miou"])
    for row in rows:
        writer.writerow([row.experiment, row.variant, f"{row.miou:.6f}"])
    return buffer.getvalue()
