"""Training data preparation, augmentation, weighted cross-entropy and the training loop."""

import csv
import json
import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.spatial.transform import Rotation

from .autodiff import ParameterStore, Tensor, adam_step, log_softmax, mul, no_grad, sum_axis
from .cloud import FRUIT, PointCloud
from .cloud_io import read_cloud, write_cloud
from .config import settings
from .errors import ConfigError, DataError, NumericError, ParseError
from .kernels import knn_query
from .metrics import ConfusionMatrix, miou
from .segnet import NetworkSpec, forward, init_params

logger = logging.getLogger(__name__)

AUGMENT_NOISE = 0.003
HSV_JITTER = (0.8, 1.2)


class TrainConfig(BaseModel):
    """Loss weights, under-sampling threshold and optimizer schedule."""

    model_config = ConfigDict(frozen=True)

    class_weights: tuple[float, ...] = (1.0, 1.0)
    min_object_points: int = Field(default=1000, ge=0)
    seeds_per_scene: int = Field(default=150, ge=100, le=200)
    lr0: float = Field(default=0.001, gt=0)
    lr_decay: float = Field(default=0.95, gt=0, le=1)
    lr_min: float = Field(default=0.0001, ge=0)
    epochs: int = Field(default=100, ge=1)
    batch_size: int = Field(default=16, ge=1)
    # fixed number of samples drawn per epoch (cycling reshuffled passes); None = one pass
    samples_per_epoch: int | None = Field(default=None, ge=1)
    # best checkpoint taken from the last N epochs only; None = any epoch
    checkpoint_window: int | None = Field(default=None, ge=1)
    augment: bool = True
    seed: int = 0

    @field_validator("class_weights")
    @classmethod
    def _weights_in_range(cls, value):
        if not value or any(not 0.0 <= a <= 2.0 for a in value):
            raise ValueError(f"class weights must lie in [0, 2], got {value}")
        return value

    @classmethod
    def small(cls, **kwargs) -> "TrainConfig":
        """Settings for 4096-point blocks."""
        return cls(**{"class_weights": (0.75, 1.25), "min_object_points": 1000, "batch_size": 16, **kwargs})

    @classmethod
    def large(cls, **kwargs) -> "TrainConfig":
        """Settings for 8192-point blocks."""
        return cls(**{"class_weights": (0.5, 1.5), "min_object_points": 1500, "batch_size": 4, **kwargs})

    @classmethod
    def for_block_size(cls, block_size: int, **kwargs) -> "TrainConfig":
        """Preset matching a block size; other sizes scale the fruit threshold of the 4096 preset."""
        if block_size == 8192:
            return cls.large(**kwargs)
        if block_size == 4096:
            return cls.small(**kwargs)
        return cls.small(**{"min_object_points": round(block_size * 1000 / 4096), **kwargs})

    def lr_at(self, epoch: int) -> float:
        return max(self.lr_min, self.lr0 * self.lr_decay**epoch)


@dataclass(frozen=True)
class TrainingSample:
    """A labeled, colored crop of exactly block_size points."""

    block: PointCloud
    scene: int
    seed_point: int

    @property
    def fruit_points(self) -> int:
        return int(np.count_nonzero(self.block.labels == FRUIT))


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    val_miou: float | None


def split_scenes(scenes: Sequence, fraction: float = 0.5, seed: int = 0) -> tuple[list, list]:
    """Shuffle scenes and split them into (training, held-out) by fraction."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"split fraction must be in (0, 1), got {fraction}")
    order = np.random.default_rng(seed).permutation(len(scenes))
    n_train = int(round(fraction * len(scenes)))
    return [scenes[i] for i in order[:n_train]], [scenes[i] for i in order[n_train:]]


def _crop_scene(
    index: int,
    scene: PointCloud,
    block_size: int,
    seeds_per_scene: int,
    min_object_points: int,
    seed: int,
) -> list[TrainingSample]:
    if not scene.has_labels:
        raise DataError(f"scene {index} has no labels")
    if len(scene) < block_size:
        raise DataError(f"scene {index} has {len(scene)} points, fewer than the block size {block_size}")

    rng = np.random.default_rng([seed, index])
    count = min(seeds_per_scene, len(scene))
    # seeds are drawn from x-y-z sorted order so the crops do not depend on point order
    canonical = np.lexsort(scene.positions.T[::-1])
    seed_points = canonical[rng.choice(len(scene), size=count, replace=False)]
    samples = []
    for start in range(0, count, 16):
        chunk = seed_points[start : start + 16]
        crops = knn_query(scene.positions, scene.positions[chunk], block_size)
        for seed_point, crop in zip(chunk, crops):
            fruit = int(np.count_nonzero(scene.labels[crop] == FRUIT))
            if fruit >= min_object_points:
                samples.append(TrainingSample(scene.subset(crop), index, int(seed_point)))
    return samples


def make_dataset(
    scenes: Sequence[PointCloud],
    block_size: int,
    seeds_per_scene: int = 150,
    min_object_points: int = 1000,
    seed: int = 0,
) -> list[TrainingSample]:
    """
    Crop block_size nearest neighbours around random seed points of every scene.

    A crop is kept only if it holds at least min_object_points fruit points.
    Output order is scene order, then seed order, for any thread count.
    """
    if min_object_points >= block_size:
        raise ConfigError(f"min_object_points {min_object_points} must be below the block size {block_size}")

    def crop(item):
        index, scene = item
        return _crop_scene(index, scene, block_size, seeds_per_scene, min_object_points, seed)

    workers = min(settings.threads, max(len(scenes), 1))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_scene = list(pool.map(crop, enumerate(scenes)))
    else:
        per_scene = [crop(item) for item in enumerate(scenes)]

    samples = [s for group in per_scene for s in group]
    tried = sum(min(seeds_per_scene, len(s)) for s in scenes)
    logger.info(f"Kept {len(samples)} of {tried} crops (>= {min_object_points} fruit points)")
    return samples


def augment(sample: TrainingSample, seed: int, noise_sigma: float = AUGMENT_NOISE) -> TrainingSample:
    """Random rotation about z, Gaussian position noise and HSV saturation/value jitter."""
    rng = np.random.default_rng(seed)
    block = sample.block
    center = block.positions.mean(axis=0)
    rotation = Rotation.from_euler("z", rng.uniform(0.0, 2.0 * np.pi))
    positions = rotation.apply(block.positions - center) + center
    if noise_sigma > 0:
        positions = positions + rng.normal(0.0, noise_sigma, size=positions.shape)

    colors = block.colors
    if colors is not None:
        hsv = rgb_to_hsv(colors)
        hsv[:, 1] = np.clip(hsv[:, 1] * rng.uniform(*HSV_JITTER), 0.0, 1.0)
        hsv[:, 2] = np.clip(hsv[:, 2] * rng.uniform(*HSV_JITTER), 0.0, 1.0)
        colors = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)

    return TrainingSample(PointCloud(positions, colors, block.labels), sample.scene, sample.seed_point)


def wce_loss(logits: Tensor, labels, alpha: Sequence[float]) -> Tensor:
    """Weighted cross-entropy: -(1/N) * sum_i alpha[y_i] * log softmax(logits_i)[y_i]."""
    labels = np.asarray(labels, dtype=np.int64)
    n, n_classes = logits.shape
    if len(alpha) != n_classes:
        raise DataError(f"{len(alpha)} class weights for {n_classes} classes")
    if labels.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"label out of range for {n_classes} classes")

    weights = np.zeros((n, n_classes), dtype=logits.dtype)
    weights[np.arange(n), labels] = np.asarray(alpha, dtype=logits.dtype)[labels]
    picked = mul(log_softmax(logits), Tensor(weights, dtype=logits.dtype))
    return mul(sum_axis(picked), -1.0 / max(n, 1))


def predict_block(block: PointCloud, spec: NetworkSpec, params: ParameterStore) -> np.ndarray:
    with no_grad():
        return forward(block, spec, params, training=False).numpy().argmax(axis=1)


def evaluate_samples(samples: Sequence[TrainingSample], spec: NetworkSpec, params: ParameterStore) -> float:
    """mIoU over a set of labeled blocks."""
    cm = ConfusionMatrix(spec.n_classes)
    for sample in samples:
        cm.update(sample.block.labels, predict_block(sample.block, spec, params))
    return miou(cm)[1]


def epoch_order(rng: np.random.Generator, n: int, samples_per_epoch: int | None = None) -> np.ndarray:
    """Sample indices for one epoch: a permutation, or enough concatenated permutations cut to length."""
    if samples_per_epoch is None:
        return rng.permutation(n)
    passes = -(-samples_per_epoch // n)
    return np.concatenate([rng.permutation(n) for _ in range(passes)])[:samples_per_epoch]


def train(
    dataset: Sequence[TrainingSample],
    spec: NetworkSpec,
    cfg: TrainConfig,
    validation: Sequence[TrainingSample] | None = None,
    params: ParameterStore | None = None,
) -> tuple[ParameterStore, list[EpochMetrics]]:
    """
    Adam over shuffled mini-batches with an exponentially decayed learning rate.

    Returns the parameters of the epoch with the best validation mIoU
    (the final epoch when there is no validation set) and one metrics row
    per epoch.
    """
    if not dataset:
        raise DataError("training dataset is empty")
    if len(cfg.class_weights) != spec.n_classes:
        raise ConfigError(f"{len(cfg.class_weights)} class weights for {spec.n_classes} classes")
    for sample in dataset:
        sample.block.check_classes(spec.n_classes)

    params = params if params is not None else init_params(spec, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    best: ParameterStore | None = None
    best_miou = -np.inf
    history: list[EpochMetrics] = []

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = epoch_order(rng, len(dataset), cfg.samples_per_epoch)
        losses = []
        for batch_number, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = order[start : start + cfg.batch_size]
            aug_seeds = rng.integers(0, 2**32, size=len(batch))
            params.zero_grad()
            batch_loss = 0.0
            for index, aug_seed in zip(batch, aug_seeds):
                sample = augment(dataset[index], int(aug_seed)) if cfg.augment else dataset[index]
                logits = forward(sample.block, spec, params, training=True)
                loss = wce_loss(logits, sample.block.labels, cfg.class_weights)
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericError("non-finite training loss", epoch=epoch, batch=batch_number, lr=lr)
                mul(loss, 1.0 / len(batch)).backward()
                batch_loss += value / len(batch)
            adam_step(params, lr=lr)
            losses.append(batch_loss)

        train_loss = float(np.mean(losses))
        val_miou = evaluate_samples(validation, spec, params) if validation else None
        history.append(EpochMetrics(epoch, lr, train_loss, val_miou))
        logger.info(
            f"Epoch {epoch + 1}/{cfg.epochs}: lr={lr:.6g} loss={train_loss:.5f}"
            + (f" val_miou={val_miou:.4f}" if val_miou is not None else "")
        )

        in_window = cfg.checkpoint_window is None or epoch >= cfg.epochs - cfg.checkpoint_window
        if val_miou is not None and in_window and val_miou > best_miou:
            best_miou = val_miou
            best = params.copy()

    if best is None:
        return params, history
    logger.info(f"Best validation mIoU {best_miou:.4f}")
    return best, history


def write_metrics_csv(path: str | Path, history: Sequence[EpochMetrics]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "lr", "train_loss", "val_miou"])
        for row in history:
            writer.writerow([
                row.epoch,
                f"{row.lr:.8g}",
                f"{row.train_loss:.8g}",
                "" if row.val_miou is None else f"{row.val_miou:.6f}",
            ])


def save_dataset(samples: Sequence[TrainingSample], out_dir: str | Path) -> Path:
    """Write every block as a PLY plus a manifest.json describing where it came from."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for number, sample in enumerate(samples):
        name = f"block_{number:05d}.ply"
        write_cloud(sample.block, out_dir / name)
        entries.append({"file": name, "scene": sample.scene, "seed_point": sample.seed_point})
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"samples": entries}, indent=2) + "\n", encoding="utf-8")
    logger.info(f"Wrote {len(samples)} blocks to {out_dir}")
    return manifest


def load_dataset(directory: str | Path) -> list[TrainingSample]:
    """Read a directory written by save_dataset."""
    directory = Path(directory)
    manifest = directory / "manifest.json"
    try:
        entries = json.loads(manifest.read_text(encoding="utf-8"))["samples"]
    except FileNotFoundError as e:
        raise DataError(f"no dataset manifest at {manifest}") from e
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise ParseError(f"bad dataset manifest: {e}", path=str(manifest)) from e

    samples = []
    for entry in entries:
        block = read_cloud(directory / entry["file"])
        if not block.has_labels:
            raise DataError(f"dataset block {entry['file']} has no labels")
        samples.append(TrainingSample(block, int(entry.get("scene", 0)), int(entry.get("seed_point", 0))))
    return samples
