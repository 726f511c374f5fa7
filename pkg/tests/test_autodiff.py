"""Tests for the reverse-mode autodiff engine and parameter store."""

import numpy as np
import pytest
from scipy.special import log_softmax as log_softmax_oracle

from orchard_seg import autodiff as ad
from orchard_seg.autodiff import ParameterStore, Tensor, adam_step, no_grad
from orchard_seg.errors import DataError, MissingGradientError, ParseError, ShapeError

FD_STEP = 1e-6


def numeric_grad(fn, array: np.ndarray) -> np.ndarray:
    """Central differences of a scalar function of one array."""
    grad = np.zeros_like(array)
    for idx in np.ndindex(array.shape):
        saved = array[idx]
        array[idx] = saved + FD_STEP
        hi = fn()
        array[idx] = saved - FD_STEP
        lo = fn()
        array[idx] = saved
        grad[idx] = (hi - lo) / (2 * FD_STEP)
    return grad


def check_grads(build, *arrays: np.ndarray, rtol: float = 1e-5, atol: float = 1e-7):
    """Compare backward() against finite differences for every input array."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*leaves)
    weights = np.random.default_rng(7).normal(size=out.shape)
    ad.sum_axis(out * Tensor(weights)).backward()

    def scalar():
        return float((build(*[Tensor(a) for a in arrays]).data * weights).sum())

    for leaf, array in zip(leaves, arrays):
        np.testing.assert_allclose(leaf.grad, numeric_grad(scalar, array), rtol=rtol, atol=atol)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class TestGradients:
    """Test every op against finite differences."""

    def test_matmul(self, rng):
        """Test matmul gradients."""
        check_grads(ad.matmul, rng.normal(size=(4, 3)), rng.normal(size=(3, 5)))

    def test_bias_add(self, rng):
        """Test broadcasting bias addition sums over rows."""
        check_grads(ad.add, rng.normal(size=(2, 4, 3)), rng.normal(size=3))

    def test_sub_and_mul(self, rng):
        """Test elementwise sub and mul."""
        check_grads(lambda a, b: ad.mul(ad.sub(a, b), a), rng.normal(size=(3, 3)), rng.normal(size=(3, 3)))

    def test_relu(self, rng):
        """Test relu away from the kink."""
        x = rng.normal(size=(5, 4))
        x[np.abs(x) < 0.1] = 0.5
        check_grads(ad.relu, x)

    def test_max_axis(self, rng):
        """Test max pooling over the group axis."""
        check_grads(lambda x: ad.max_axis(x, 1), rng.normal(size=(3, 6, 2)))

    def test_sum_and_mean(self, rng):
        """Test reductions."""
        check_grads(lambda x: ad.mean_axis(x, 0), rng.normal(size=(4, 3)))
        check_grads(lambda x: ad.sum_axis(x, 1), rng.normal(size=(4, 3)))

    def test_concat(self, rng):
        """Test channel concatenation."""
        check_grads(lambda a, b: ad.concat([a, b], axis=-1), rng.normal(size=(4, 2)), rng.normal(size=(4, 3)))

    def test_gather_rows_with_repeats(self, rng):
        """Test repeated gathers accumulate."""
        idx = np.array([[0, 2, 2], [1, 1, 0]])
        check_grads(lambda x: ad.gather_rows(x, idx), rng.normal(size=(3, 4)))

    def test_reshape(self, rng):
        """Test reshape passes gradients through."""
        check_grads(lambda x: ad.reshape(x, (6, 2)), rng.normal(size=(3, 4)))

    def test_softmax_and_log_softmax(self, rng):
        """Test softmax and its log."""
        check_grads(ad.softmax, rng.normal(size=(4, 3)))
        check_grads(ad.log_softmax, rng.normal(size=(4, 3)))

    def test_log_softmax_with_extreme_logits(self):
        """Test log_softmax and log(softmax) stay finite and exact at logits of +-50."""
        logits = np.array([[50.0, -50.0, 0.0], [-50.0, -50.0, 50.0], [50.0, 50.0, -50.0]])
        onehot = np.eye(3)[[1, 0, 2]]
        expected = log_softmax_oracle(logits, axis=-1)
        for build in (ad.log_softmax, lambda t: ad.log(ad.softmax(t))):
            x = Tensor(logits, requires_grad=True)
            out = build(x)
            np.testing.assert_allclose(out.data, expected, rtol=1e-12, atol=1e-12)
            ad.sum_axis(out * Tensor(-onehot)).backward()
            assert np.all(np.isfinite(x.grad))
            np.testing.assert_allclose(x.grad, np.exp(expected) - onehot, atol=1e-12)

    def test_log(self, rng):
        """Test log on positive inputs."""
        check_grads(ad.log, rng.uniform(0.5, 2.0, size=(3, 3)))

    def test_batch_norm_training(self, rng):
        """Test batch norm with batch statistics."""
        mean, var = Tensor(np.zeros(3)), Tensor(np.ones(3))
        check_grads(
            lambda x, g, b: ad.batch_norm(x, g, b, mean, var, training=True),
            rng.normal(size=(6, 3)),
            rng.normal(size=3),
            rng.normal(size=3),
            rtol=1e-4,
            atol=1e-6,
        )

    def test_batch_norm_eval(self, rng):
        """Test batch norm with running statistics."""
        mean, var = Tensor(rng.normal(size=3)), Tensor(rng.uniform(0.5, 2.0, size=3))
        check_grads(
            lambda x, g, b: ad.batch_norm(x, g, b, mean, var, training=False),
            rng.normal(size=(2, 4, 3)),
            rng.normal(size=3),
            rng.normal(size=3),
        )

    def test_shared_leaf_accumulates(self):
        """Test a leaf used twice gets both contributions."""
        x = Tensor(np.array([3.0]), requires_grad=True)
        ad.sum_axis(x * x + x).backward()
        assert x.grad.tolist() == [7.0]


class TestGraph:
    """Test graph bookkeeping."""

    def test_no_grad_builds_nothing(self):
        """Test results inside no_grad do not track parents."""
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad
        assert (x * 2.0).requires_grad

    def test_backward_without_grad(self):
        """Test backward on a constant is an error."""
        with pytest.raises(DataError):
            Tensor(np.ones(2)).backward()

    def test_shape_errors(self):
        """Test mismatched shapes raise ShapeError."""
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(ShapeError):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))

    def test_log_of_zero(self):
        """Test log refuses non-positive input."""
        with pytest.raises(DataError):
            ad.log(Tensor(np.array([0.0, 1.0])))

    def test_batch_norm_updates_running_stats(self):
        """Test the running statistics move toward the batch ones."""
        mean, var = Tensor(np.zeros(1)), Tensor(np.ones(1))
        x = Tensor(np.array([[1.0], [3.0]]))
        ad.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), mean, var, training=True)
        assert mean.data[0] == pytest.approx(0.2)
        assert var.data[0] == pytest.approx(0.9 + 0.1 * 1.0)


class TestParameterStore:
    """Test named parameters and the FPN1 container."""

    def make_store(self) -> ParameterStore:
        store = ParameterStore()
        store.add("layer.weight", np.arange(6.0).reshape(2, 3))
        store.add("layer.bn.mean", np.zeros(3), "buffer")
        return store

    def test_duplicate_name(self):
        """Test names are unique."""
        store = self.make_store()
        with pytest.raises(DataError):
            store.add("layer.weight", np.zeros(1))

    def test_assign_keeps_shape(self):
        """Test assign refuses a new shape."""
        store = self.make_store()
        with pytest.raises(ShapeError):
            store.assign("layer.weight", np.zeros(6))

    def test_save_and_load(self, tmp_path):
        """Test names, kinds, dtypes and values survive the container."""
        store = self.make_store()
        store["layer.weight"].grad = np.ones((2, 3))
        adam_step(store)
        store.save(tmp_path / "model.fpn")
        loaded = ParameterStore.load(tmp_path / "model.fpn")
        assert loaded.names() == store.names()
        assert [loaded.kind(n) for n in loaded] == [store.kind(n) for n in store]
        for name in store:
            np.testing.assert_array_equal(loaded[name].data, store[name].data)
        assert loaded["adam.step"].data.dtype == np.int64

    def test_float32_store(self, tmp_path):
        """Test single precision is kept on disk."""
        store = ParameterStore(np.float32)
        store.add("w", np.ones(4))
        store.save(tmp_path / "m.fpn")
        assert ParameterStore.load(tmp_path / "m.fpn")["w"].dtype == np.float32

    def test_bad_magic(self, tmp_path):
        """Test foreign files are rejected."""
        path = tmp_path / "m.fpn"
        path.write_bytes(b"NOPE")
        with pytest.raises(ParseError):
            ParameterStore.load(path)

    def test_truncated(self, tmp_path):
        """Test a cut-off container is rejected."""
        self.make_store().save(tmp_path / "m.fpn")
        data = (tmp_path / "m.fpn").read_bytes()
        (tmp_path / "m.fpn").write_bytes(data[:-5])
        with pytest.raises(ParseError):
            ParameterStore.load(tmp_path / "m.fpn")

    def test_copy_is_independent(self):
        """Test copies do not share storage."""
        store = self.make_store()
        clone = store.copy()
        store.assign("layer.weight", np.zeros((2, 3)))
        assert clone["layer.weight"].data[0, 1] == 1.0


class TestAdam:
    """Test the Adam update."""

    def test_first_step_moves_by_lr(self):
        """Test the bias-corrected first step is lr * sign(grad)."""
        store = ParameterStore()
        w = store.add("w", np.array([1.0, -2.0]))
        w.grad = np.array([0.5, -3.0])
        adam_step(store, lr=0.001)
        np.testing.assert_allclose(w.data, [1.0 - 0.001, -2.0 + 0.001], rtol=0, atol=1e-10)
        assert int(store["adam.step"].data) == 1

    def test_explicit_grads(self):
        """Test gradients can be passed by name."""
        store = ParameterStore()
        w = store.add("w", np.zeros(1))
        adam_step(store, {"w": np.array([2.0])}, lr=0.01)
        assert w.data[0] == pytest.approx(-0.01)

    def test_missing_gradient(self):
        """Test a parameter without a gradient stops the step."""
        store = ParameterStore()
        store.add("w", np.zeros(1))
        with pytest.raises(MissingGradientError):
            adam_step(store)
        assert "adam.step" not in store

    def test_buffers_untouched(self):
        """Test buffers are not optimized."""
        store = ParameterStore()
        store.add("w", np.zeros(1)).grad = np.ones(1)
        store.add("bn.mean", np.full(1, 5.0), "buffer")
        adam_step(store)
        assert store["bn.mean"].data[0] == 5.0
