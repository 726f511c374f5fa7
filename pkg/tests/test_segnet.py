"""Tests for the segmentation network."""

import numpy as np
import pytest
from pydantic import ValidationError

from orchard_seg.autodiff import Tensor, softmax
from orchard_seg.cloud import PointCloud
from orchard_seg.errors import DataError
from orchard_seg.kernels import GroupingSpec, SamplingSpec
from orchard_seg.segnet import (
    ColorBranchSpec,
    FPBlockSpec,
    NetworkSpec,
    SABlockSpec,
    fp_forward,
    forward,
    init_params,
    layer_plan,
    sa_forward,
)
from orchard_seg.training import wce_loss


def logits_of(block, spec, params, training=False) -> np.ndarray:
    return forward(block, spec, params, training=training).numpy()


class TestNetworkSpec:
    """Test NetworkSpec validation and presets."""

    def test_presets(self):
        """Test the block-size presets and their centroid ladders."""
        small, large, reduced = NetworkSpec.small(), NetworkSpec.large(), NetworkSpec.reduced()
        assert small.block_size == 4096
        assert [b.n_centroids for b in small.sa_blocks] == [1024, 256, 64, 16]
        assert large.block_size == 8192
        assert [b.n_centroids for b in large.sa_blocks] == [2048, 512, 128, 32]
        assert reduced.block_size == 1024
        assert reduced.color_branch.out_channels == 16
        assert [b.grouping.radius for b in small.sa_blocks] == [0.01, 0.02, 0.04, 0.08]

    def test_unequal_levels(self, tiny_spec):
        """Test SA and FP counts must match."""
        with pytest.raises(ValidationError):
            NetworkSpec(sa_blocks=tiny_spec.sa_blocks, fp_blocks=tiny_spec.fp_blocks[:1])

    def test_radii_must_increase(self):
        """Test non-increasing ball radii are rejected."""
        with pytest.raises(ValidationError):
            NetworkSpec.build(64, (16, 4), ((8,), (8,)), ((8,), (8,)), radii=(0.2, 0.2))

    def test_late_fusion_needs_branch(self, tiny_spec):
        """Test late fusion without a color branch is rejected."""
        with pytest.raises(ValidationError):
            NetworkSpec(
                sa_blocks=tiny_spec.sa_blocks,
                fp_blocks=tiny_spec.fp_blocks,
                color_branch=None,
                fusion="late",
            )

    def test_json_round_trip(self, tiny_spec):
        """Test the network.json written next to checkpoints reads back equal."""
        assert NetworkSpec.model_validate_json(tiny_spec.model_dump_json()) == tiny_spec


class TestInitParams:
    """Test parameter layout."""

    def test_input_channels_follow_fusion(self, spec_factory):
        """Test early fusion widens the first SA layer by the RGB channels."""
        assert init_params(spec_factory("none"))["sa1.mlp0.weight"].shape == (3, 8)
        assert init_params(spec_factory("early"))["sa1.mlp0.weight"].shape == (6, 8)

    def test_late_fusion_widens_head(self, spec_factory):
        """Test the color branch output is concatenated before the head."""
        plan = dict((prefix, channels) for prefix, channels, _ in layer_plan(spec_factory("late")))
        assert plan["color"] == 6
        assert plan["head"] == 8 + 6

    def test_kinds(self, tiny_spec):
        """Test running statistics are buffers, everything else trainable."""
        params = init_params(tiny_spec)
        assert params.kind("sa1.mlp0.bn.mean") == "buffer"
        assert params.kind("sa1.mlp0.bn.gamma") == "param"
        assert params["head.out.weight"].shape == (8, 2)

    def test_seeded(self, tiny_spec):
        """Test the same seed gives the same weights."""
        a, b = init_params(tiny_spec, seed=3), init_params(tiny_spec, seed=3)
        np.testing.assert_array_equal(a["sa2.mlp1.weight"].data, b["sa2.mlp1.weight"].data)


class TestForward:
    """Test the full forward pass."""

    @pytest.mark.parametrize("fusion", ["none", "early", "late", "early+late"])
    def test_output_shape(self, spec_factory, block, fusion):
        """Test logits are (block_size, n_classes) for every fusion mode."""
        spec = spec_factory(fusion)
        logits = logits_of(block, spec, init_params(spec))
        assert logits.shape == (64, 2)
        assert np.isfinite(logits).all()

    @pytest.mark.parametrize("mode", ["grouped", "pointwise", "raw"])
    def test_color_branch_modes(self, spec_factory, block, mode):
        """Test every color branch variant runs."""
        branch = ColorBranchSpec(
            mode=mode, grouping=GroupingSpec(method="knn", k=4, radius=None), mlp_channels=(4,), channels=6
        )
        spec = spec_factory("late", color_branch=branch)
        assert logits_of(block, spec, init_params(spec)).shape == (64, 2)

    def test_ball_grouping(self, spec_factory, block):
        """Test the ball-query variant runs."""
        spec = spec_factory(grouping="ball")
        assert logits_of(block, spec, init_params(spec)).shape == (64, 2)

    def test_zero_head_is_uniform(self, tiny_spec, block):
        """Test a zeroed output layer gives 0.5/0.5 everywhere."""
        params = init_params(tiny_spec)
        params.assign("head.out.weight", np.zeros((8, 2)))
        params.assign("head.out.bias", np.zeros(2))
        probabilities = softmax(Tensor(logits_of(block, tiny_spec, params))).numpy()
        np.testing.assert_allclose(probabilities, 0.5)

    def test_no_fusion_ignores_colors(self, spec_factory, block):
        """Test fusion none gives the same logits for any colors, or none."""
        spec = spec_factory("none")
        params = init_params(spec)
        recolored = block.with_colors(1.0 - block.colors)
        expected = logits_of(block, spec, params)
        np.testing.assert_array_equal(logits_of(recolored, spec, params), expected)
        np.testing.assert_array_equal(logits_of(block.with_colors(None), spec, params), expected)

    def test_colors_required(self, spec_factory, block):
        """Test color fusion refuses an uncolored block."""
        spec = spec_factory("early")
        with pytest.raises(DataError):
            forward(block.with_colors(None), spec, init_params(spec))

    def test_wrong_block_size(self, tiny_spec, block_factory):
        """Test the block must match the network size."""
        with pytest.raises(DataError):
            forward(block_factory(n=32), tiny_spec, init_params(tiny_spec))

    def test_permutation(self, tiny_spec, block):
        """Test permuting points permutes logits (first point kept as the sampling start)."""
        params = init_params(tiny_spec)
        perm = np.concatenate([[0], 1 + np.random.default_rng(5).permutation(63)])
        np.testing.assert_allclose(
            logits_of(block.subset(perm), tiny_spec, params),
            logits_of(block, tiny_spec, params)[perm],
            rtol=0,
            atol=1e-9,
        )

    def test_translation(self, tiny_spec, block):
        """Test translating the block leaves logits unchanged."""
        params = init_params(tiny_spec)
        np.testing.assert_allclose(
            logits_of(block.translated((1.0, -2.0, 0.5)), tiny_spec, params),
            logits_of(block, tiny_spec, params),
            rtol=0,
            atol=1e-8,
        )

    def test_scale_normalization(self, spec_factory, block):
        """Test normalize_scale makes the network blind to uniform scaling."""
        spec = spec_factory(normalize_scale=True)
        params = init_params(spec)
        scaled = PointCloud(block.positions * 2.5, block.colors, block.labels)
        np.testing.assert_allclose(logits_of(scaled, spec, params), logits_of(block, spec, params), rtol=0, atol=1e-8)

    def test_training_mode_updates_buffers(self, tiny_spec, block):
        """Test a training pass moves the running statistics."""
        params = init_params(tiny_spec)
        forward(block, tiny_spec, params, training=True)
        assert not np.allclose(params["sa1.mlp0.bn.mean"].data, 0.0)

    def test_loss_gradient_matches_finite_differences(self, tiny_spec, block):
        """Test backward through the whole network against central differences."""
        params = init_params(tiny_spec, seed=1)
        alpha = (0.75, 1.25)

        def loss_value() -> float:
            return wce_loss(forward(block, tiny_spec, params, training=True), block.labels, alpha).item()

        params.zero_grad()
        wce_loss(forward(block, tiny_spec, params, training=True), block.labels, alpha).backward()

        rng = np.random.default_rng(0)
        step = 1e-6
        for name in ("head.out.weight", "head.mlp0.weight", "color.mlp0.weight", "fp1.mlp0.weight", "sa1.mlp0.weight"):
            tensor = params[name]
            analytic = tensor.grad.copy()
            for _ in range(4):
                idx = tuple(rng.integers(0, s) for s in tensor.shape)
                saved = tensor.data[idx]
                tensor.data[idx] = saved + step
                hi = loss_value()
                tensor.data[idx] = saved - step
                lo = loss_value()
                tensor.data[idx] = saved
                numeric = (hi - lo) / (2 * step)
                assert abs(analytic[idx] - numeric) <= 1e-3 * max(abs(numeric), abs(analytic[idx])) + 1e-7, name


class TestBlocks:
    """Test single SA and FP blocks on degenerate inputs."""

    def test_sa_single_point(self, spec_factory):
        """Test one input point fills every centroid and group."""
        spec = spec_factory("none")
        params = init_params(spec)
        point = np.array([[0.3, 0.2, 0.1]])
        centers, pooled = sa_forward(point, None, spec.sa_blocks[0], params, "sa1")
        np.testing.assert_array_equal(centers, np.repeat(point, 16, axis=0))
        assert pooled.shape == (16, 8)
        assert np.allclose(pooled.numpy(), pooled.numpy()[0])

    def test_sa_empty(self, tiny_spec):
        """Test an empty input is rejected."""
        with pytest.raises(DataError):
            sa_forward(np.empty((0, 3)), None, tiny_spec.sa_blocks[0], init_params(tiny_spec))

    def test_fp_single_source(self, spec_factory):
        """Test one source point spreads the same features to every query."""
        spec = spec_factory("none")
        params = init_params(spec)
        queries = np.random.default_rng(0).uniform(size=(5, 3))
        source = Tensor(np.random.default_rng(1).normal(size=(1, 12)))
        out = fp_forward(queries, np.zeros((1, 3)), source, Tensor(np.zeros((5, 8))), spec.fp_blocks[0], params, "fp2")
        assert out.shape == (5, 8)
        assert np.allclose(out.numpy(), out.numpy()[0])

    def test_custom_block_spec(self, block_factory):
        """Test a hand-assembled one-level network."""
        spec = NetworkSpec(
            sa_blocks=(SABlockSpec(sampling=SamplingSpec(method="random", n_centroids=8), grouping=GroupingSpec(method="knn", k=3, radius=None), mlp_channels=(4,)),),
            fp_blocks=(FPBlockSpec(mlp_channels=(4,)),),
            color_branch=None,
            fusion="none",
            block_size=16,
            head_channels=(4,),
            batch_norm=False,
        )
        assert logits_of(block_factory(n=16), spec, init_params(spec)).shape == (16, 2)
