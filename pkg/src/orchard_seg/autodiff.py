"""
Minimal reverse-mode automatic differentiation over dense numpy arrays.

Only the operations the segmentation network needs are provided. Broadcasting
is limited to bias addition and the per-channel affine of batch normalization.
"""

import logging
import struct
import threading
from collections.abc import Callable, Iterator, Mapping, Sequence
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .errors import DataError, MissingGradientError, ParseError, ShapeError

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class Tensor:
    """A dense array node in the computation graph."""

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        dtype=None,
        _parents: tuple["Tensor", ...] = (),
        _op: str = "",
    ):
        if dtype is None:
            array = np.asarray(data)
            if not np.issubdtype(array.dtype, np.floating):
                array = array.astype(np.float64)
        else:
            array = np.asarray(data, dtype=dtype)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of this tensor into every leaf that requires them."""
        if not self.requires_grad:
            raise DataError("backward() on a tensor that does not require grad")
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.dtype)
        if seed.shape != self.shape:
            raise ShapeError("backward", self.shape, seed.shape)

        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        _accumulate(self, seed)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            if node._parents:
                # free intermediate gradients; leaves keep theirs
                node.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.broadcast_to(np.asarray(value, dtype=like.dtype), like.shape).copy())


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=tensor.dtype, copy=True)
    else:
        tensor.grad = tensor.grad + grad


_grad_mode = threading.local()


def grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad():
    """Build no graph inside this block (per thread)."""
    previous = grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


def _result(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward: Callable[[np.ndarray], None]) -> Tensor:
    requires = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, _parents=parents if requires else (), _op=op)
    if requires:
        out._backward = backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(n, k) @ (k, m)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), "matmul", backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may also be a 1-D bias matching a's last axis."""
    if a.shape == b.shape:
        def backward(g):
            _accumulate(a, g)
            _accumulate(b, g)
    elif b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        def backward(g):
            _accumulate(a, g)
            _accumulate(b, g.reshape(-1, b.shape[0]).sum(axis=0))
    else:
        raise ShapeError("add", a.shape, b.shape)
    return _result(a.data + b.data, (a, b), "add", backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("sub", a.shape, b.shape)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(a.data - b.data, (a, b), "sub", backward)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product of equal shapes, or scaling by a python number."""
    if not isinstance(b, Tensor):
        scale = float(b)

        def backward_scalar(g):
            _accumulate(a, g * scale)

        return _result(a.data * scale, (a,), "scale", backward_scalar)

    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _result(a.data * b.data, (a, b), "mul", backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        _accumulate(x, g * mask)

    return _result(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), "relu", backward)


def max_axis(x: Tensor, axis: int, return_indices: bool = False):
    """Max over one axis; the gradient goes to the first maximal entry only."""
    axis = axis % x.ndim
    indices = np.argmax(x.data, axis=axis)
    values = np.take_along_axis(x.data, np.expand_dims(indices, axis), axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(indices, axis), np.expand_dims(g, axis), axis=axis)
        _accumulate(x, full)

    out = _result(values, (x,), "max", backward)
    return (out, indices) if return_indices else out


def sum_axis(x: Tensor, axis: int | None = None) -> Tensor:
    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.shape))
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _result(np.asarray(x.data.sum(axis=axis)), (x,), "sum", backward)


def mean_axis(x: Tensor, axis: int | None = None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return mul(sum_axis(x, axis), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise DataError("concat of nothing")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or t.shape[:axis] != tensors[0].shape[:axis] or t.shape[axis + 1 :] != tensors[0].shape[axis + 1 :]:
            raise ShapeError("concat", tensors[0].shape, t.shape)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                _accumulate(t, np.take(g, np.arange(lo, hi), axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat", backward)


def gather_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """x[indices] along the first axis; indices may have any shape."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= x.shape[0]):
        raise DataError(f"gather_rows index out of range for {x.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, indices.reshape(-1), g.reshape((-1,) + x.shape[1:]))
        _accumulate(x, full)

    return _result(x.data[indices], (x,), "gather", backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), "reshape", backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accumulate(x, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _result(s, (x,), "softmax", backward)


def log_softmax(x: Tensor) -> Tensor:
    """Numerically stable log of the softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - log_norm

    def backward(g):
        _accumulate(x, g - np.exp(out) * g.sum(axis=-1, keepdims=True))

    return _result(out, (x,), "log_softmax", backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DataError("log of a non-positive value")

    def backward(g):
        _accumulate(x, g / x.data)

    return _result(np.log(x.data), (x,), "log", backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """
    Per-channel normalization over every leading axis of x (..., C).

    Training mode uses batch statistics and updates the running ones as
    running = momentum * running + (1 - momentum) * batch; eval mode uses
    the running statistics.
    """
    channels = x.shape[-1]
    for t in (gamma, beta, running_mean, running_var):
        if t.shape != (channels,):
            raise ShapeError("batch_norm", x.shape, t.shape)

    flat = x.data.reshape(-1, channels)
    if training:
        mean = flat.mean(axis=0)
        var = flat.var(axis=0)
        running_mean.data[...] = momentum * running_mean.data + (1.0 - momentum) * mean
        running_var.data[...] = momentum * running_var.data + (1.0 - momentum) * var
    else:
        mean = running_mean.data
        var = running_var.data
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (flat - mean) * inv_std
    out = (xhat * gamma.data + beta.data).reshape(x.shape)
    n = flat.shape[0]

    def backward(g):
        gflat = g.reshape(-1, channels)
        _accumulate(gamma, (gflat * xhat).sum(axis=0))
        _accumulate(beta, gflat.sum(axis=0))
        if not x.requires_grad:
            return
        dxhat = gflat * gamma.data
        if training:
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv_std
        _accumulate(x, dx.reshape(x.shape))

    return _result(out, (x, gamma, beta), "batch_norm", backward)


# --- parameters -----------------------------------------------------------

KINDS = ("param", "buffer", "optim")

_CODE_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}


def _dtype_code(dtype: np.dtype) -> int:
    if dtype.kind == "f":
        return 1 if dtype.itemsize == 4 else 0
    return 2


MAGIC = b"FPN1"


class ParameterStore:
    """
    Named tensors of a model.

    Kinds: "param" (trainable), "buffer" (normalization statistics) and
    "optim" (optimizer state). Names are unique and shapes fixed once created.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._tensors: dict[str, Tensor] = {}
        self._kinds: dict[str, str] = {}

    def add(self, name: str, value, kind: str = "param") -> Tensor:
        if kind not in KINDS:
            raise DataError(f"unknown parameter kind {kind!r}")
        if name in self._tensors:
            raise DataError(f"duplicate parameter name {name!r}")
        dtype = np.int64 if kind == "optim" and np.issubdtype(np.asarray(value).dtype, np.integer) else self.dtype
        tensor = Tensor(np.array(value, dtype=dtype, copy=True), requires_grad=(kind == "param"), dtype=dtype)
        self._tensors[name] = tensor
        self._kinds[name] = kind
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError as e:
            raise DataError(f"no parameter named {name!r}") from e

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def kind(self, name: str) -> str:
        return self._kinds[name]

    def names(self, kind: str | None = None) -> list[str]:
        return [n for n in self._tensors if kind is None or self._kinds[n] == kind]

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, self._tensors[n]) for n in self.names("param")]

    def assign(self, name: str, value) -> None:
        """Overwrite values in place; the shape must not change."""
        tensor = self[name]
        value = np.asarray(value, dtype=tensor.dtype)
        if value.shape != tensor.shape:
            raise ShapeError(f"assign {name}", tensor.shape, value.shape)
        tensor.data[...] = value

    def zero_grad(self) -> None:
        for _, tensor in self.parameters():
            tensor.grad = None

    def copy(self) -> "ParameterStore":
        clone = ParameterStore(self.dtype)
        for name, tensor in self._tensors.items():
            clone.add(name, tensor.data, self._kinds[name])
        return clone

    def save(self, path: str | Path) -> None:
        """Write the FPN1 container: magic, then per entry name/dtype/rank/dims/values (little-endian)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        chunks = [MAGIC]
        for name, tensor in self._tensors.items():
            key = f"{self._kinds[name]}:{name}".encode("utf-8")
            array = tensor.data
            code = _dtype_code(array.dtype)
            dtype = _CODE_DTYPES[code]
            chunks.append(struct.pack("<I", len(key)) + key)
            chunks.append(struct.pack("<BI", code, array.ndim))
            chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
            chunks.append(np.ascontiguousarray(array, dtype=dtype).tobytes())
        path.write_bytes(b"".join(chunks))
        logger.debug(f"Saved {len(self)} tensors to {path}")

    @classmethod
    def load(cls, path: str | Path) -> "ParameterStore":
        try:
            data = Path(path).read_bytes()
        except FileNotFoundError as e:
            raise DataError(f"no such checkpoint: {path}") from e
        if not data.startswith(MAGIC):
            raise ParseError("not an FPN1 parameter container", path=str(path))

        entries: list[tuple[str, str, np.ndarray]] = []
        pos = len(MAGIC)
        try:
            while pos < len(data):
                (name_len,) = struct.unpack_from("<I", data, pos)
                pos += 4
                key = data[pos : pos + name_len].decode("utf-8")
                pos += name_len
                code, rank = struct.unpack_from("<BI", data, pos)
                pos += struct.calcsize("<BI")
                dims = struct.unpack_from(f"<{rank}I", data, pos)
                pos += 4 * rank
                dtype = _CODE_DTYPES[code]
                count = int(np.prod(dims, dtype=np.int64))
                nbytes = count * dtype.itemsize
                if pos + nbytes > len(data):
                    raise ParseError(f"truncated values for {key}", path=str(path))
                values = np.frombuffer(data, dtype=dtype, count=count, offset=pos).reshape(dims)
                pos += nbytes
                kind, _, name = key.partition(":")
                entries.append((kind, name, values))
        except (struct.error, KeyError, UnicodeDecodeError) as e:
            raise ParseError(f"corrupt parameter container: {e}", path=str(path)) from e

        float_dtypes = {v.dtype for k, _, v in entries if k != "optim" or np.issubdtype(v.dtype, np.floating)}
        store = cls(float_dtypes.pop() if len(float_dtypes) == 1 else np.float64)
        for kind, name, values in entries:
            store.add(name, values, kind)
        return store


def adam_step(
    params: ParameterStore,
    grads: Mapping[str, np.ndarray] | None = None,
    lr: float = 0.001,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """
    One Adam update with bias correction over every trainable parameter.

    Gradients default to each parameter's accumulated .grad. Moments and
    the step counter live in the store as "optim" entries.
    """
    updates = {}
    for name, tensor in params.parameters():
        grad = tensor.grad if grads is None else grads.get(name)
        if grad is None:
            raise MissingGradientError(f"no gradient for parameter {name!r}")
        updates[name] = np.asarray(grad, dtype=tensor.dtype)

    if "adam.step" not in params:
        params.add("adam.step", np.array(0, dtype=np.int64), "optim")
    step_tensor = params["adam.step"]
    step = int(step_tensor.data) + 1
    step_tensor.data[...] = step

    correction1 = 1.0 - beta1**step
    correction2 = 1.0 - beta2**step
    for name, grad in updates.items():
        tensor = params[name]
        m_name, v_name = f"adam.m.{name}", f"adam.v.{name}"
        if m_name not in params:
            params.add(m_name, np.zeros_like(tensor.data), "optim")
            params.add(v_name, np.zeros_like(tensor.data), "optim")
        m = params[m_name].data
        v = params[v_name].data
        m[...] = beta1 * m + (1.0 - beta1) * grad
        v[...] = beta2 * v + (1.0 - beta2) * grad * grad
        tensor.data[...] -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
