"""Pytest configuration and fixtures."""

import os

import hypothesis
import numpy as np
import pytest

# Set test environment before importing package modules
os.environ["ORCHARD_SEG_THREADS"] = "1"
os.environ["ORCHARD_SEG_PRECISION"] = "float64"

hypothesis.settings.register_profile("fast", max_examples=20, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=200, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "fast"))

from orchard_seg.cloud import PointCloud  # noqa: E402
from orchard_seg.kernels import GroupingSpec, SamplingSpec  # noqa: E402
from orchard_seg.segnet import ColorBranchSpec, FPBlockSpec, NetworkSpec, SABlockSpec  # noqa: E402


def make_tiny_spec(fusion: str = "late", block_size: int = 64, grouping: str = "knn", **kwargs) -> NetworkSpec:
    """A 2-level network small enough for finite-difference checks."""
    if grouping == "knn":
        groupings = [GroupingSpec(method="knn", k=4, radius=None), GroupingSpec(method="knn", k=4, radius=None)]
    else:
        groupings = [GroupingSpec(method="ball", k=4, radius=0.3), GroupingSpec(method="ball", k=4, radius=0.6)]
    fields = {
        "color_branch": ColorBranchSpec(
            mode="grouped",
            grouping=GroupingSpec(method="knn", k=4, radius=None),
            mlp_channels=(4,),
            channels=6,
        ),
        "head_channels": (8,),
        **kwargs,
    }
    return NetworkSpec(
        sa_blocks=(
            SABlockSpec(sampling=SamplingSpec(n_centroids=16), grouping=groupings[0], mlp_channels=(8,)),
            SABlockSpec(sampling=SamplingSpec(n_centroids=4), grouping=groupings[1], mlp_channels=(8, 12)),
        ),
        fp_blocks=(FPBlockSpec(mlp_channels=(8,)), FPBlockSpec(mlp_channels=(8,))),
        fusion=fusion,
        block_size=block_size,
        **fields,
    )


def make_block(n: int = 64, seed: int = 0, labeled: bool = True) -> PointCloud:
    """Random colored block inside the unit cube, about a quarter labeled fruit."""
    rng = np.random.default_rng(seed)
    positions = rng.uniform(0.0, 1.0, size=(n, 3))
    colors = rng.uniform(0.0, 1.0, size=(n, 3))
    labels = (rng.uniform(size=n) < 0.25).astype(np.int64) if labeled else None
    return PointCloud(positions, colors, labels)


@pytest.fixture
def tiny_spec():
    """Late-fusion two-level network over 64-point blocks."""
    return make_tiny_spec()


@pytest.fixture
def block():
    """64-point colored, labeled block."""
    return make_block()


@pytest.fixture
def unit_cube_cloud():
    """The 8 corners of the unit cube, labeled by z."""
    corners = np.array([[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)], dtype=np.float64)
    return PointCloud(corners, np.full((8, 3), 0.5), (corners[:, 2] > 0).astype(np.int64))


@pytest.fixture
def spec_factory():
    """make_tiny_spec, for tests that need variants."""
    return make_tiny_spec


@pytest.fixture
def block_factory():
    """make_block, for tests that need several blocks."""
    return make_block
