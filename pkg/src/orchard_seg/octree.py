"""Octree partitioning of a scene into bounded leaf blocks, and reassembly of block predictions."""

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .cloud import PointCloud
from .errors import AssemblyError, DataError, ShapeError

logger = logging.getLogger(__name__)

ROOT_MARGIN = 1e-6


class PartitionSpec(BaseModel):
    """Leaf capacity and depth bound for the octree."""

    model_config = ConfigDict(frozen=True)

    capacity: int = Field(default=4096, ge=1)
    max_depth: int = Field(default=12, ge=0)


@dataclass(frozen=True)
class OctreeBlock:
    """A leaf region of the scene and the scene indices it owns."""

    aabb_min: np.ndarray
    aabb_max: np.ndarray
    indices: np.ndarray
    depth: int
    # octant codes from the root down, e.g. (3, 0, 7)
    path: tuple[int, ...] = ()
    oversized: bool = False
    # set on the pieces of an oversized leaf split by chunks()
    chunk: int | None = None

    @property
    def leaf_id(self) -> str:
        name = "root" if not self.path else "-".join(str(code) for code in self.path)
        return name if self.chunk is None else f"{name}.{self.chunk}"

    def __len__(self) -> int:
        return len(self.indices)

    def chunks(self, size: int) -> list["OctreeBlock"]:
        """Split a leaf into consecutive index chunks of at most size points."""
        if len(self.indices) <= size:
            return [self]
        return [
            OctreeBlock(
                self.aabb_min,
                self.aabb_max,
                self.indices[start : start + size],
                self.depth,
                self.path,
                oversized=True,
                chunk=number,
            )
            for number, start in enumerate(range(0, len(self.indices), size))
        ]


def root_box(positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Tight bounding box grown by ROOT_MARGIN per side, cubified to its longest axis."""
    lo = positions.min(axis=0) - ROOT_MARGIN
    hi = positions.max(axis=0) + ROOT_MARGIN
    side = float((hi - lo).max())
    return lo, lo + side


def octant_codes(positions: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Octant code per point: bit 0 = x, bit 1 = y, bit 2 = z; points on a plane go to the higher side."""
    upper = positions >= center
    return upper[:, 0].astype(np.int64) | (upper[:, 1].astype(np.int64) << 1) | (upper[:, 2].astype(np.int64) << 2)


def build_partition(cloud: PointCloud, spec: PartitionSpec) -> list[OctreeBlock]:
    """
    Subdivide the scene until every leaf holds at most spec.capacity points.

    Leaves come back depth-first in octant-code order. Leaves still above
    capacity at max_depth are emitted with oversized=True.
    """
    if len(cloud) == 0:
        raise DataError("build_partition needs a non-empty cloud")

    positions = cloud.positions
    lo, hi = root_box(positions)
    leaves: list[OctreeBlock] = []

    def visit(indices: np.ndarray, box_lo: np.ndarray, box_hi: np.ndarray, depth: int, path: tuple[int, ...]):
        if len(indices) <= spec.capacity:
            leaves.append(OctreeBlock(box_lo, box_hi, indices, depth, path))
            return
        if depth >= spec.max_depth:
            logger.warning(f"Leaf {'-'.join(map(str, path)) or 'root'} holds {len(indices)} points at max depth {depth}")
            leaves.append(OctreeBlock(box_lo, box_hi, indices, depth, path, oversized=True))
            return
        center = (box_lo + box_hi) / 2.0
        codes = octant_codes(positions[indices], center)
        for code in range(8):
            members = indices[codes == code]
            if len(members) == 0:
                continue
            bits = np.array([code & 1, (code >> 1) & 1, (code >> 2) & 1], dtype=bool)
            child_lo = np.where(bits, center, box_lo)
            child_hi = np.where(bits, box_hi, center)
            visit(members, child_lo, child_hi, depth + 1, path + (code,))

    visit(np.arange(len(cloud), dtype=np.int64), lo, hi, 0, ())
    logger.info(f"Partitioned {len(cloud)} points into {len(leaves)} leaves (capacity {spec.capacity})")
    return leaves


def partition_stats(blocks: Sequence[OctreeBlock]) -> dict[str, float]:
    """Block count, point-count spread and oversized leaf count."""
    sizes = np.array([len(b) for b in blocks], dtype=np.int64)
    return {
        "blocks": len(blocks),
        "mean_points": float(sizes.mean()) if len(sizes) else 0.0,
        "min_points": int(sizes.min()) if len(sizes) else 0,
        "max_points": int(sizes.max()) if len(sizes) else 0,
        "max_depth": max((b.depth for b in blocks), default=0),
        "oversized": sum(b.oversized for b in blocks),
    }


def assemble_predictions(
    scene_size: int,
    blocks: Sequence[OctreeBlock],
    block_logits: Sequence[np.ndarray],
    origin_maps: Sequence[np.ndarray] | None = None,
) -> np.ndarray:
    """
    Scatter per-block logits back onto the scene and take the argmax.

    origin_maps[b][r] is the position inside blocks[b].indices that logit
    row r was computed for (padding repeats positions); identity when omitted.
    Duplicate rows are averaged before the argmax.
    """
    if len(block_logits) != len(blocks):
        raise DataError(f"{len(blocks)} blocks but {len(block_logits)} logit arrays")
    if origin_maps is not None and len(origin_maps) != len(blocks):
        raise DataError(f"{len(blocks)} blocks but {len(origin_maps)} origin maps")

    coverage = np.zeros(scene_size, dtype=np.int64)
    for block in blocks:
        if len(block.indices) and (block.indices.min() < 0 or block.indices.max() >= scene_size):
            bad = block.indices[(block.indices < 0) | (block.indices >= scene_size)]
            raise AssemblyError("block indices outside the scene", bad.tolist())
        np.add.at(coverage, block.indices, 1)
    if np.any(coverage == 0):
        raise AssemblyError("points not covered by any block", np.flatnonzero(coverage == 0).tolist())
    if np.any(coverage > 1):
        raise AssemblyError("points covered by several blocks", np.flatnonzero(coverage > 1).tolist())

    if scene_size == 0:
        return np.empty(0, dtype=np.int64)

    n_classes = None
    sums = None
    counts = np.zeros(scene_size, dtype=np.int64)
    for b, (block, logits) in enumerate(zip(blocks, block_logits)):
        logits = np.asarray(logits, dtype=np.float64)
        if logits.ndim != 2:
            raise ShapeError("assemble_predictions", logits.shape)
        if n_classes is None:
            n_classes = logits.shape[1]
            sums = np.zeros((scene_size, n_classes))
        elif logits.shape[1] != n_classes:
            raise ShapeError("assemble_predictions", (logits.shape[0], n_classes), logits.shape)

        origin = np.arange(len(block.indices)) if origin_maps is None else np.asarray(origin_maps[b], dtype=np.int64)
        if len(origin) != len(logits):
            raise ShapeError("assemble_predictions", (len(origin), n_classes), logits.shape)
        if len(origin) and (origin.min() < 0 or origin.max() >= len(block.indices)):
            raise DataError(f"origin map of block {b} points outside the block")
        targets = block.indices[origin]
        np.add.at(sums, targets, logits)
        np.add.at(counts, targets, 1)

    if np.any(counts == 0):
        raise AssemblyError("points without any logit row", np.flatnonzero(counts == 0).tolist())
    return (sums / counts[:, None]).argmax(axis=1).astype(np.int64)
