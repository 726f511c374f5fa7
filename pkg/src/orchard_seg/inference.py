"""Partitioned whole-scene inference: octree blocks, padding, per-block forward, reassembly."""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .autodiff import ParameterStore, no_grad
from .cloud import PointCloud
from .config import settings
from .errors import DataError
from .octree import OctreeBlock, PartitionSpec, assemble_predictions, build_partition
from .segnet import NetworkSpec, forward

logger = logging.getLogger(__name__)


@dataclass
class InferenceResult:
    """Per-point class ids plus what produced them."""

    labels: np.ndarray
    blocks: list[OctreeBlock]
    seconds: float

    def class_counts(self, n_classes: int) -> list[int]:
        return np.bincount(self.labels, minlength=n_classes).tolist()


def pad_block(block: PointCloud, target: int, seed: int = 0) -> tuple[PointCloud, np.ndarray]:
    """
    Resample a block to exactly target points.

    Every original point is kept once; the remainder is drawn with
    replacement. Returns the padded cloud and, per row, the index of the
    original point it came from.
    """
    n = len(block)
    if n == 0:
        raise DataError("cannot pad an empty block")
    if n > target:
        raise DataError(f"block of {n} points exceeds the network block size {target}")
    if n == target:
        return block, np.arange(n, dtype=np.int64)

    rng = np.random.default_rng(seed)
    origin = np.concatenate([np.arange(n, dtype=np.int64), rng.choice(n, size=target - n, replace=True)])
    return block.subset(origin), origin


def _leaf_blocks(cloud: PointCloud, spec: NetworkSpec, partition: PartitionSpec) -> list[OctreeBlock]:
    if partition.capacity > spec.block_size:
        raise DataError(f"partition capacity {partition.capacity} exceeds block size {spec.block_size}")
    blocks = []
    for leaf in build_partition(cloud, partition):
        blocks.extend(leaf.chunks(spec.block_size) if leaf.oversized else [leaf])
    return blocks


def run_partitioned_inference(
    cloud: PointCloud,
    spec: NetworkSpec,
    params: ParameterStore,
    partition: PartitionSpec | None = None,
    seed: int = 0,
) -> InferenceResult:
    """Label every point of a scene; deterministic for a fixed seed and any thread count."""
    if spec.uses_colors and not cloud.has_colors:
        raise DataError(f"fusion={spec.fusion!r} needs a colored scene")
    partition = partition or PartitionSpec(capacity=spec.block_size)
    started = time.perf_counter()
    blocks = _leaf_blocks(cloud, spec, partition)

    def predict(item: tuple[int, OctreeBlock]) -> tuple[np.ndarray, np.ndarray]:
        number, leaf = item
        padded, origin = pad_block(cloud.subset(leaf.indices), spec.block_size, seed + number)
        with no_grad():
            logits = forward(padded, spec, params, training=False)
        return logits.numpy(), origin

    workers = min(settings.threads, max(len(blocks), 1))
    logger.info(f"Running {len(blocks)} blocks on {workers} thread(s)")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(predict, enumerate(blocks)))
    else:
        outputs = [predict(item) for item in enumerate(blocks)]

    labels = assemble_predictions(len(cloud), blocks, [o[0] for o in outputs], [o[1] for o in outputs])
    seconds = time.perf_counter() - started
    logger.info(f"Labeled {len(cloud)} points in {seconds:.2f}s")
    return InferenceResult(labels=labels, blocks=blocks, seconds=seconds)


def infer_scene(
    cloud: PointCloud,
    spec: NetworkSpec,
    params: ParameterStore,
    partition: PartitionSpec | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Per-point class ids for a whole scene."""
    return run_partitioned_inference(cloud, spec, params, partition, seed).labels
