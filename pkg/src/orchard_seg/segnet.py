"""
Point segmentation network.

Four set-abstraction (SA) blocks encode the block, four feature-propagation
(FP) blocks decode it back to every input point, and an optional color
branch is fused either at the input (early), right before the classification
head (late), or both.
"""

import logging
from collections.abc import Sequence
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .autodiff import (
    ParameterStore,
    Tensor,
    add,
    batch_norm,
    concat,
    gather_rows,
    matmul,
    max_axis,
    mul,
    relu,
    reshape,
    sum_axis,
)
from .cloud import PointCloud
from .config import settings
from .errors import DataError, ShapeError
from .kernels import GroupingSpec, SamplingSpec, group, sample, three_nn_interpolate_weights

logger = logging.getLogger(__name__)

Fusion = Literal["none", "early", "late", "early+late"]

DEFAULT_RADII = (0.01, 0.02, 0.04, 0.08)
DEFAULT_GROUP_SIZE = 24


class SABlockSpec(BaseModel):
    """One set-abstraction level."""

    model_config = ConfigDict(frozen=True)

    sampling: SamplingSpec
    grouping: GroupingSpec
    mlp_channels: tuple[int, ...] = Field(min_length=1)

    @property
    def n_centroids(self) -> int:
        return self.sampling.n_centroids


class FPBlockSpec(BaseModel):
    """One feature-propagation level."""

    model_config = ConfigDict(frozen=True)

    mlp_channels: tuple[int, ...] = Field(min_length=1)


class ColorBranchSpec(BaseModel):
    """
    Color-only branch used by late fusion.

    grouped: SA-style block centred on every point, rows are recentered xyz
        plus neighbour RGB, max-pooled over the group.
    pointwise: shared MLP over each point's own RGB.
    raw: the RGB values themselves (3 channels).
    """

    model_config = ConfigDict(frozen=True)

    mode: Literal["grouped", "pointwise", "raw"] = "grouped"
    grouping: GroupingSpec = GroupingSpec(method="ball", k=DEFAULT_GROUP_SIZE, radius=0.02)
    mlp_channels: tuple[int, ...] = (16,)
    channels: int = Field(default=32, ge=1)

    @property
    def layer_channels(self) -> tuple[int, ...]:
        return (*self.mlp_channels, self.channels)

    @property
    def out_channels(self) -> int:
        return 3 if self.mode == "raw" else self.channels


class NetworkSpec(BaseModel):
    """Full network description; serialized next to checkpoints as JSON."""

    model_config = ConfigDict(frozen=True)

    sa_blocks: tuple[SABlockSpec, ...] = Field(min_length=1)
    # applied deepest level first
    fp_blocks: tuple[FPBlockSpec, ...] = Field(min_length=1)
    color_branch: ColorBranchSpec | None = ColorBranchSpec()
    fusion: Fusion = "late"
    n_classes: int = Field(default=2, ge=2)
    block_size: int = Field(default=4096, ge=1)
    head_channels: tuple[int, ...] = (128,)
    batch_norm: bool = True
    normalize_scale: bool = False

    @model_validator(mode="after")
    def _check_layout(self):
        if len(self.sa_blocks) != len(self.fp_blocks):
            raise ValueError(f"{len(self.sa_blocks)} SA blocks but {len(self.fp_blocks)} FP blocks")
        radii = [b.grouping.radius for b in self.sa_blocks if b.grouping.method == "ball"]
        if any(later <= earlier for earlier, later in zip(radii, radii[1:])):
            raise ValueError(f"grouping radii must increase strictly across levels, got {radii}")
        if self.late_fusion and self.color_branch is None:
            raise ValueError(f"fusion={self.fusion!r} needs a color branch")
        return self

    @property
    def early_fusion(self) -> bool:
        return self.fusion in ("early", "early+late")

    @property
    def late_fusion(self) -> bool:
        return self.fusion in ("late", "early+late")

    @property
    def uses_colors(self) -> bool:
        return self.fusion != "none"

    @classmethod
    def build(
        cls,
        block_size: int,
        centroids: Sequence[int],
        sa_channels: Sequence[Sequence[int]],
        fp_channels: Sequence[Sequence[int]],
        radii: Sequence[float] = DEFAULT_RADII,
        group_size: int = DEFAULT_GROUP_SIZE,
        **kwargs,
    ) -> "NetworkSpec":
        """Assemble a NetworkSpec from per-level ladders (FPS sampling, ball grouping)."""
        if not len(centroids) == len(sa_channels) == len(radii):
            raise ValueError("centroids, sa_channels and radii need one entry per level")
        sa_blocks = tuple(
            SABlockSpec(
                sampling=SamplingSpec(method="fps", n_centroids=n),
                grouping=GroupingSpec(method="ball", k=group_size, radius=r),
                mlp_channels=tuple(channels),
            )
            for n, r, channels in zip(centroids, radii, sa_channels)
        )
        fp_blocks = tuple(FPBlockSpec(mlp_channels=tuple(channels)) for channels in fp_channels)
        return cls(sa_blocks=sa_blocks, fp_blocks=fp_blocks, block_size=block_size, **kwargs)

    @classmethod
    def small(cls, **kwargs) -> "NetworkSpec":
        """4096-point blocks."""
        return cls.build(
            4096,
            (1024, 256, 64, 16),
            ((32, 64), (64, 128), (128, 256), (256, 512)),
            ((256, 256), (256, 256), (256, 128), (128, 128)),
            **kwargs,
        )

    @classmethod
    def large(cls, **kwargs) -> "NetworkSpec":
        """8192-point blocks."""
        return cls.build(
            8192,
            (2048, 512, 128, 32),
            ((32, 64), (64, 128), (128, 256), (256, 512)),
            ((256, 256), (256, 256), (256, 128), (128, 128)),
            **kwargs,
        )

    @classmethod
    def reduced(cls, **kwargs) -> "NetworkSpec":
        """Desk-scale variant: 1024-point blocks, every width halved."""
        kwargs.setdefault("color_branch", ColorBranchSpec(mlp_channels=(8,), channels=16))
        kwargs.setdefault("head_channels", (64,))
        return cls.build(
            1024,
            (256, 64, 32, 16),
            ((16, 32), (32, 64), (64, 128), (128, 256)),
            ((128, 128), (128, 128), (128, 64), (64, 64)),
            **kwargs,
        )


def layer_plan(spec: NetworkSpec) -> list[tuple[str, int, tuple[int, ...]]]:
    """(prefix, input channels, layer widths) for every shared MLP, in creation order."""
    plan = []
    level_channels = [3 if spec.early_fusion else 0]
    for level, block in enumerate(spec.sa_blocks, start=1):
        plan.append((f"sa{level}", 3 + level_channels[-1], block.mlp_channels))
        level_channels.append(block.mlp_channels[-1])

    depth = len(spec.sa_blocks)
    current = level_channels[-1]
    for j, block in enumerate(spec.fp_blocks):
        level = depth - j
        plan.append((f"fp{level}", current + level_channels[level - 1], block.mlp_channels))
        current = block.mlp_channels[-1]

    if spec.late_fusion and spec.color_branch.mode != "raw":
        color = spec.color_branch
        in_channels = 6 if color.mode == "grouped" else 3
        plan.append(("color", in_channels, color.layer_channels))
        current += color.out_channels
    elif spec.late_fusion:
        current += 3

    plan.append(("head", current, spec.head_channels))
    return plan


def init_params(spec: NetworkSpec, seed: int = 0, dtype=None) -> ParameterStore:
    """He-initialized weights, zero biases, unit batch-norm scale and statistics."""
    rng = np.random.default_rng(seed)
    params = ParameterStore(settings.dtype if dtype is None else dtype)

    def linear(name: str, fan_in: int, fan_out: int):
        std = np.sqrt(2.0 / max(fan_in, 1))
        params.add(f"{name}.weight", rng.normal(0.0, std, size=(fan_in, fan_out)))
        params.add(f"{name}.bias", np.zeros(fan_out))

    head_in = None
    for prefix, in_channels, widths in layer_plan(spec):
        for i, width in enumerate(widths):
            name = f"{prefix}.mlp{i}"
            linear(name, in_channels, width)
            if spec.batch_norm:
                params.add(f"{name}.bn.gamma", np.ones(width))
                params.add(f"{name}.bn.beta", np.zeros(width))
                params.add(f"{name}.bn.mean", np.zeros(width), "buffer")
                params.add(f"{name}.bn.var", np.ones(width), "buffer")
            in_channels = width
        head_in = in_channels
    linear("head.out", head_in, spec.n_classes)

    logger.debug(f"Initialized {len(params.names('param'))} parameter tensors (seed {seed})")
    return params


def shared_mlp(
    x: Tensor,
    params: ParameterStore,
    prefix: str,
    widths: Sequence[int],
    training: bool = False,
    use_batch_norm: bool = True,
) -> Tensor:
    """Per-row linear -> batch norm -> ReLU, once per width."""
    for i in range(len(widths)):
        name = f"{prefix}.mlp{i}"
        x = add(matmul(x, params[f"{name}.weight"]), params[f"{name}.bias"])
        if use_batch_norm:
            x = batch_norm(
                x,
                params[f"{name}.bn.gamma"],
                params[f"{name}.bn.beta"],
                params[f"{name}.bn.mean"],
                params[f"{name}.bn.var"],
                training,
            )
        x = relu(x)
    return x


def sa_forward(
    positions: np.ndarray,
    features: Tensor | None,
    spec: SABlockSpec,
    params: ParameterStore,
    prefix: str = "sa1",
    training: bool = False,
    use_batch_norm: bool = True,
) -> tuple[np.ndarray, Tensor]:
    """
    Sample centroids, group their neighbours and max-pool a shared MLP.

    Group rows are the neighbour's coordinates relative to its centroid,
    followed by the neighbour's features when present.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if len(positions) == 0:
        raise DataError("sa_forward needs at least one point")
    if features is not None and features.shape[0] != len(positions):
        raise ShapeError(prefix, positions.shape, features.shape)

    centers = positions[sample(positions, spec.sampling)]
    groups = group(positions, centers, spec.grouping)
    n, k = groups.shape
    local = (positions[groups] - centers[:, None, :]).reshape(n * k, 3)
    rows = Tensor(local, dtype=params.dtype)
    if features is not None:
        rows = concat([rows, gather_rows(features, groups.reshape(-1))], axis=1)

    hidden = shared_mlp(rows, params, prefix, spec.mlp_channels, training, use_batch_norm)
    pooled = max_axis(reshape(hidden, (n, k, spec.mlp_channels[-1])), axis=1)
    return centers, pooled


def fp_forward(
    query_positions: np.ndarray,
    source_positions: np.ndarray,
    source_features: Tensor,
    skip_features: Tensor | None,
    spec: FPBlockSpec,
    params: ParameterStore,
    prefix: str = "fp1",
    training: bool = False,
    use_batch_norm: bool = True,
) -> Tensor:
    """Interpolate source features onto the queries (3-NN), append skip features, apply the MLP."""
    query_positions = np.asarray(query_positions, dtype=np.float64)
    source_positions = np.asarray(source_positions, dtype=np.float64)
    if len(source_positions) == 0:
        raise DataError("fp_forward needs at least one source point")
    if source_features.ndim != 2 or source_features.shape[0] != len(source_positions):
        raise ShapeError(prefix, source_positions.shape, source_features.shape)
    if skip_features is not None and skip_features.shape[0] != len(query_positions):
        raise ShapeError(prefix, query_positions.shape, skip_features.shape)

    indices, weights = three_nn_interpolate_weights(query_positions, source_positions)
    channels = source_features.shape[1]
    gathered = gather_rows(source_features, indices)
    spread = Tensor(np.repeat(weights[:, :, None], channels, axis=2), dtype=params.dtype)
    interpolated = sum_axis(mul(gathered, spread), axis=1)
    if skip_features is not None:
        interpolated = concat([interpolated, skip_features], axis=1)
    return shared_mlp(interpolated, params, prefix, spec.mlp_channels, training, use_batch_norm)


def color_branch_forward(
    positions: np.ndarray,
    colors: np.ndarray,
    spec: ColorBranchSpec,
    params: ParameterStore,
    training: bool = False,
    use_batch_norm: bool = True,
) -> Tensor:
    """Per-point color features, (M, spec.out_channels)."""
    if spec.mode == "raw":
        return Tensor(colors, dtype=params.dtype)
    if spec.mode == "pointwise":
        return shared_mlp(Tensor(colors, dtype=params.dtype), params, "color", spec.layer_channels, training, use_batch_norm)

    groups = group(positions, positions, spec.grouping)
    m, k = groups.shape
    local = positions[groups] - positions[:, None, :]
    rows = np.concatenate([local, colors[groups]], axis=2).reshape(m * k, 6)
    hidden = shared_mlp(Tensor(rows, dtype=params.dtype), params, "color", spec.layer_channels, training, use_batch_norm)
    return max_axis(reshape(hidden, (m, k, spec.channels)), axis=1)


def normalized_positions(positions: np.ndarray) -> np.ndarray:
    """Center on the centroid and scale the farthest point to unit distance."""
    centered = positions - positions.mean(axis=0)
    radius = float(np.sqrt((centered**2).sum(axis=1)).max())
    return centered / radius if radius > 0 else centered


def forward(block: PointCloud, spec: NetworkSpec, params: ParameterStore, training: bool = False) -> Tensor:
    """Per-point logits (block_size, n_classes) for one fixed-size block."""
    if len(block) != spec.block_size:
        raise DataError(f"block has {len(block)} points, network expects {spec.block_size}")
    if spec.uses_colors and not block.has_colors:
        raise DataError(f"fusion={spec.fusion!r} needs a colored block")

    positions = normalized_positions(block.positions) if spec.normalize_scale else block.positions
    bn = spec.batch_norm

    features = Tensor(block.colors, dtype=params.dtype) if spec.early_fusion else None
    level_positions = [positions]
    level_features = [features]
    for level, sa in enumerate(spec.sa_blocks, start=1):
        positions, features = sa_forward(positions, features, sa, params, f"sa{level}", training, bn)
        level_positions.append(positions)
        level_features.append(features)

    depth = len(spec.sa_blocks)
    hidden = level_features[-1]
    for j, fp in enumerate(spec.fp_blocks):
        level = depth - j
        hidden = fp_forward(
            level_positions[level - 1],
            level_positions[level],
            hidden,
            level_features[level - 1],
            fp,
            params,
            f"fp{level}",
            training,
            bn,
        )

    if spec.late_fusion:
        color = color_branch_forward(level_positions[0], block.colors, spec.color_branch, params, training, bn)
        hidden = concat([hidden, color], axis=1)

    hidden = shared_mlp(hidden, params, "head", spec.head_channels, training, bn)
    return add(matmul(hidden, params["head.out.weight"]), params["head.out.bias"])
