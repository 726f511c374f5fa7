"""Tests for dataset building, augmentation, the weighted loss and the training loop."""

from unittest.mock import patch

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.special import log_softmax as log_softmax_oracle

from orchard_seg.autodiff import Tensor
from orchard_seg.cloud import PointCloud
from orchard_seg.errors import ConfigError, DataError, NumericError
from orchard_seg.kernels import knn_query
from orchard_seg.segnet import init_params
from orchard_seg.training import (
    TrainConfig,
    TrainingSample,
    augment,
    epoch_order,
    load_dataset,
    make_dataset,
    save_dataset,
    split_scenes,
    train,
    wce_loss,
    write_metrics_csv,
)


def striped_scene(n: int = 400, seed: int = 0) -> PointCloud:
    """Colored scene whose points with x < 0.3 are fruit."""
    rng = np.random.default_rng(seed)
    positions = rng.uniform(0.0, 1.0, size=(n, 3))
    labels = (positions[:, 0] < 0.3).astype(np.int64)
    return PointCloud(positions, rng.uniform(size=(n, 3)), labels)


def sample_of(block: PointCloud) -> TrainingSample:
    return TrainingSample(block, scene=0, seed_point=0)


class TestTrainConfig:
    """Test configuration and the learning-rate schedule."""

    def test_schedule(self):
        """Test exponential decay with a floor."""
        cfg = TrainConfig()
        assert cfg.lr_at(0) == pytest.approx(0.001)
        assert cfg.lr_at(1) == pytest.approx(0.00095)
        assert cfg.lr_at(60) == 0.0001

    def test_weights_range(self):
        """Test class weights outside [0, 2] are rejected."""
        with pytest.raises(ValidationError):
            TrainConfig(class_weights=(0.5, 2.5))

    def test_presets(self):
        """Test the per-block-size presets."""
        assert TrainConfig.for_block_size(4096).class_weights == (0.75, 1.25)
        assert TrainConfig.for_block_size(4096).min_object_points == 1000
        assert TrainConfig.for_block_size(8192).class_weights == (0.5, 1.5)
        assert TrainConfig.for_block_size(8192).min_object_points == 1500
        assert TrainConfig.for_block_size(1024).min_object_points == 250
        assert TrainConfig.for_block_size(1024, min_object_points=7).min_object_points == 7

    def test_seeds_per_scene_bounds(self):
        """Test 100 to 200 seeds per scene are accepted, nothing outside."""
        assert TrainConfig(seeds_per_scene=100).seeds_per_scene == 100
        assert TrainConfig(seeds_per_scene=200).seeds_per_scene == 200
        for bad in (99, 201):
            with pytest.raises(ValidationError):
                TrainConfig(seeds_per_scene=bad)


class TestWceLoss:
    """Test the weighted cross-entropy."""

    def test_hand_evaluated(self):
        """Test two points with known true-class probabilities."""
        logits = Tensor(np.log(np.array([[0.2, 0.8], [0.6, 0.4]])))
        loss = wce_loss(logits, [1, 0], (0.75, 1.25)).item()
        assert loss == pytest.approx(-0.5 * (1.25 * np.log(0.8) + 0.75 * np.log(0.6)), rel=1e-12)
        assert loss == pytest.approx(0.33103, abs=1e-5)

    def test_unit_weights_are_cross_entropy(self):
        """Test alpha = 1 matches an independent cross-entropy."""
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(50, 2)) * 3
        labels = rng.integers(0, 2, 50)
        expected = -log_softmax_oracle(logits, axis=1)[np.arange(50), labels].mean()
        assert wce_loss(Tensor(logits), labels, (1.0, 1.0)).item() == pytest.approx(expected, rel=0, abs=1e-12)

    def test_confident_and_correct(self):
        """Test near one-hot correct predictions cost nothing."""
        assert wce_loss(Tensor(np.array([[0.0, 60.0], [60.0, 0.0]])), [1, 0], (0.5, 1.5)).item() < 1e-12

    def test_gradient(self):
        """Test d loss / d logits against central differences."""
        rng = np.random.default_rng(1)
        data = rng.normal(size=(6, 2))
        labels = rng.integers(0, 2, 6)
        logits = Tensor(data.copy(), requires_grad=True)
        wce_loss(logits, labels, (0.75, 1.25)).backward()
        step = 1e-6
        for idx in np.ndindex(data.shape):
            hi, lo = data.copy(), data.copy()
            hi[idx] += step
            lo[idx] -= step
            numeric = (
                wce_loss(Tensor(hi), labels, (0.75, 1.25)).item() - wce_loss(Tensor(lo), labels, (0.75, 1.25)).item()
            ) / (2 * step)
            assert abs(logits.grad[idx] - numeric) <= 1e-4 * abs(numeric) + 1e-9

    def test_linear_in_alpha(self):
        """Test scaling every weight scales the loss and its gradient."""
        rng = np.random.default_rng(2)
        data, labels = rng.normal(size=(8, 2)), rng.integers(0, 2, 8)
        base, doubled = Tensor(data, requires_grad=True), Tensor(data.copy(), requires_grad=True)
        loss = wce_loss(base, labels, (0.5, 0.75))
        loss_doubled = wce_loss(doubled, labels, (1.0, 1.5))
        assert loss_doubled.item() == pytest.approx(2 * loss.item())
        loss.backward()
        loss_doubled.backward()
        np.testing.assert_allclose(doubled.grad, 2 * base.grad, rtol=1e-12)

    def test_weight_count(self):
        """Test one weight per class is required."""
        with pytest.raises(DataError):
            wce_loss(Tensor(np.zeros((2, 2))), [0, 1], (1.0,))


class TestMakeDataset:
    """Test seeded KNN cropping with fruit under-sampling."""

    def test_no_fruit(self):
        """Test a fruitless scene yields nothing above a positive threshold."""
        scene = striped_scene().with_labels(np.zeros(400, dtype=np.int64))
        assert make_dataset([scene], 64, seeds_per_scene=20, min_object_points=1) == []

    def test_threshold_filters_crops(self):
        """Test thresholding keeps exactly the crops with enough fruit."""
        scene = striped_scene()
        everything = make_dataset([scene], 64, seeds_per_scene=30, min_object_points=0, seed=5)
        assert len(everything) == 30
        kept = make_dataset([scene], 64, seeds_per_scene=30, min_object_points=20, seed=5)
        assert [s.seed_point for s in kept] == [s.seed_point for s in everything if s.fruit_points >= 20]

    def test_crops_are_knn_blocks(self):
        """Test every crop is the block_size nearest neighbours of its seed and meets the threshold."""
        scene = striped_scene()
        for sample in make_dataset([scene], 64, seeds_per_scene=10, min_object_points=10, seed=1):
            assert len(sample.block) == 64
            assert sample.fruit_points >= 10
            crop = knn_query(scene.positions, scene.positions[[sample.seed_point]], 64)[0]
            np.testing.assert_array_equal(sample.block.positions, scene.positions[crop])

    def test_point_order_invariance(self):
        """Test shuffling the scene points yields the same crops around the same seed positions."""
        scene = striped_scene(seed=4)
        order = np.random.default_rng(9).permutation(len(scene))
        shuffled = scene.subset(order)
        original = make_dataset([scene], 64, seeds_per_scene=12, min_object_points=5, seed=2)
        reordered = make_dataset([shuffled], 64, seeds_per_scene=12, min_object_points=5, seed=2)
        assert len(original) == len(reordered) > 0
        for a, b in zip(original, reordered):
            np.testing.assert_array_equal(scene.positions[a.seed_point], shuffled.positions[b.seed_point])
            np.testing.assert_array_equal(a.block.positions, b.block.positions)
            np.testing.assert_array_equal(a.block.labels, b.block.labels)

    def test_threads_do_not_change_output(self):
        """Test threaded building keeps scene and seed order."""
        scenes = [striped_scene(seed=s) for s in range(3)]
        serial = make_dataset(scenes, 64, seeds_per_scene=8, min_object_points=5)
        with patch("orchard_seg.training.settings") as mock_settings:
            mock_settings.threads = 3
            threaded = make_dataset(scenes, 64, seeds_per_scene=8, min_object_points=5)
        assert [(s.scene, s.seed_point) for s in threaded] == [(s.scene, s.seed_point) for s in serial]

    def test_errors(self):
        """Test threshold, scene size and label preconditions."""
        with pytest.raises(ConfigError):
            make_dataset([striped_scene()], 64, min_object_points=64)
        with pytest.raises(DataError):
            make_dataset([striped_scene(n=50)], 64, min_object_points=0)
        with pytest.raises(DataError):
            make_dataset([striped_scene().with_labels(None)], 64, min_object_points=0)

    def test_split_scenes(self):
        """Test scenes split into disjoint halves."""
        train_part, held_out = split_scenes(list(range(6)), 0.5, seed=0)
        assert len(train_part) == 3 and len(held_out) == 3
        assert sorted(train_part + held_out) == list(range(6))
        with pytest.raises(ConfigError):
            split_scenes([1, 2], 1.0)


class TestAugment:
    """Test training-time augmentation."""

    def test_deterministic(self, block):
        """Test a fixed seed reproduces the augmentation."""
        a, b = augment(sample_of(block), 9), augment(sample_of(block), 9)
        np.testing.assert_array_equal(a.block.positions, b.block.positions)
        np.testing.assert_array_equal(a.block.colors, b.block.colors)

    def test_rotation_is_an_isometry(self, block):
        """Test without noise xy distances and heights are preserved."""
        out = augment(sample_of(block), 4, noise_sigma=0.0).block

        def xy_distances(p):
            delta = p[:, None, :2] - p[None, :, :2]
            return np.sqrt((delta**2).sum(axis=-1))

        np.testing.assert_allclose(xy_distances(out.positions), xy_distances(block.positions), atol=1e-9)
        np.testing.assert_allclose(out.positions[:, 2], block.positions[:, 2], atol=1e-12)

    def test_labels_and_color_range(self, block):
        """Test labels are untouched and colors stay in [0, 1]."""
        out = augment(sample_of(block), 2).block
        np.testing.assert_array_equal(out.labels, block.labels)
        assert out.colors.min() >= 0.0 and out.colors.max() <= 1.0


class TestTrain:
    """Test the training loop."""

    def test_one_sample_one_epoch(self, tiny_spec, block):
        """Test a single sample in one epoch makes one optimizer step."""
        params, history = train([sample_of(block)], tiny_spec, TrainConfig(epochs=1, min_object_points=0))
        assert int(params["adam.step"].data) == 1
        assert len(history) == 1
        assert history[0].val_miou is None
        assert np.isfinite(history[0].train_loss)

    def test_steps_per_epoch(self, tiny_spec, block_factory):
        """Test three samples in batches of two make two steps per epoch."""
        dataset = [sample_of(block_factory(seed=s)) for s in range(3)]
        params, _ = train(dataset, tiny_spec, TrainConfig(epochs=2, batch_size=2, augment=False))
        assert int(params["adam.step"].data) == 4

    def test_samples_per_epoch(self, tiny_spec, block_factory):
        """Test a fixed per-epoch budget cycles the data: five draws of three samples in batches of two."""
        dataset = [sample_of(block_factory(seed=s)) for s in range(3)]
        cfg = TrainConfig(epochs=2, batch_size=2, samples_per_epoch=5, augment=False)
        params, _ = train(dataset, tiny_spec, cfg)
        assert int(params["adam.step"].data) == 6

    def test_epoch_order_covers_every_sample(self):
        """Test each full pass of the epoch order is a permutation."""
        order = epoch_order(np.random.default_rng(0), 4, 10)
        assert len(order) == 10
        assert sorted(order[:4]) == sorted(order[4:8]) == [0, 1, 2, 3]
        np.testing.assert_array_equal(epoch_order(np.random.default_rng(1), 4), np.random.default_rng(1).permutation(4))

    def test_deterministic(self, tiny_spec, block_factory):
        """Test a fixed seed reproduces the trained weights."""
        dataset = [sample_of(block_factory(seed=s)) for s in range(2)]
        cfg = TrainConfig(epochs=1, batch_size=1, seed=3)
        a, _ = train(dataset, tiny_spec, cfg)
        b, _ = train(dataset, tiny_spec, cfg)
        np.testing.assert_array_equal(a["head.out.weight"].data, b["head.out.weight"].data)

    def test_validation_picks_a_checkpoint(self, tiny_spec, block_factory):
        """Test validation mIoU is logged every epoch."""
        dataset = [sample_of(block_factory(seed=s)) for s in range(2)]
        validation = [sample_of(block_factory(seed=10))]
        params, history = train(dataset, tiny_spec, TrainConfig(epochs=2, batch_size=2), validation)
        assert [row.epoch for row in history] == [0, 1]
        assert all(0.0 <= row.val_miou <= 1.0 for row in history)
        assert "head.out.weight" in params

    def test_non_finite_loss(self, tiny_spec, block):
        """Test a NaN loss stops training with its position."""
        with patch("orchard_seg.training.wce_loss", return_value=Tensor(np.array(np.nan))):
            with pytest.raises(NumericError) as exc:
                train([sample_of(block)], tiny_spec, TrainConfig(epochs=1))
        assert (exc.value.epoch, exc.value.batch, exc.value.lr) == (0, 0, 0.001)

    def test_empty_dataset(self, tiny_spec):
        """Test training needs data."""
        with pytest.raises(DataError):
            train([], tiny_spec, TrainConfig())

    def test_weight_count(self, tiny_spec, block):
        """Test class weights must match the network classes."""
        with pytest.raises(ConfigError):
            train([sample_of(block)], tiny_spec, TrainConfig(class_weights=(1.0, 1.0, 1.0)))

    def test_warm_start(self, tiny_spec, block):
        """Test given parameters are trained in place of fresh ones."""
        start = init_params(tiny_spec, seed=8)
        params, _ = train([sample_of(block)], tiny_spec, TrainConfig(epochs=1), params=start)
        assert params is start


class TestFiles:
    """Test dataset and metrics files."""

    def test_save_and_load_dataset(self, tmp_path, block_factory):
        """Test blocks and their provenance come back from disk."""
        samples = [TrainingSample(block_factory(seed=s), scene=s, seed_point=10 + s) for s in range(2)]
        manifest = save_dataset(samples, tmp_path / "ds")
        assert manifest.name == "manifest.json"
        loaded = load_dataset(tmp_path / "ds")
        assert [(s.scene, s.seed_point) for s in loaded] == [(0, 10), (1, 11)]
        for before, after in zip(samples, loaded):
            np.testing.assert_allclose(after.block.positions, before.block.positions, atol=1e-9)
            np.testing.assert_allclose(after.block.colors, before.block.colors, atol=1 / 255)
            np.testing.assert_array_equal(after.block.labels, before.block.labels)

    def test_missing_manifest(self, tmp_path):
        """Test a directory without a manifest is reported."""
        with pytest.raises(DataError):
            load_dataset(tmp_path)

    def test_metrics_csv(self, tmp_path, tiny_spec, block):
        """Test the per-epoch log has a header and one row per epoch."""
        _, history = train([sample_of(block)], tiny_spec, TrainConfig(epochs=2))
        write_metrics_csv(tmp_path / "metrics.csv", history)
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0] == "epoch,lr,train_loss,val_miou"
        assert len(lines) == 3
        assert lines[1].startswith("0,0.001,")
        assert lines[1].endswith(",")
