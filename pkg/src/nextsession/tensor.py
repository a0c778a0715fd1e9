"""numpy-backed tensors with reverse-mode automatic differentiation.

The op set is deliberately small: matrix multiply, broadcast add/mul, a
few activations, layer normalization, row-wise softmax, softmax
cross-entropy, segment reductions, and gather. Everything else the
model needs is composed from these, not added.

Each op records its parents and a closure that pushes the output
gradient back to them. ``Tensor.backward`` replays the reachable nodes
in reverse creation order; because ops execute eagerly, creation order
is a valid topological order of the computation record.

Training runs in float32; verification (gradient checks) constructs the
same graphs in float64. Ops never promote dtypes on their own.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np

_node_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; forwards still compute values."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_nid")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._nid = next(_node_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse sweep from a scalar output through the recorded graph."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar output, got shape {self.shape}")
        nodes: list[Tensor] = []
        seen = {id(self)}
        stack = [self]
        while stack:
            t = stack.pop()
            nodes.append(t)
            for p in t._parents:
                if id(p) not in seen:
                    seen.add(id(p))
                    stack.append(p)
        self._accumulate(np.ones_like(self.data))
        # creation order is topological; visit in exact reverse
        for t in sorted(nodes, key=lambda n: n._nid, reverse=True):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar over the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, dtype=np.float32) -> Tensor:
    """Trainable leaf tensor; float32 unless a verification dtype is forced."""
    return Tensor(data, requires_grad=True, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        data = a.data + b

        def backward(g):
            a._accumulate(_unbroadcast(g, a.shape))

        return _result(data, (a,), backward)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        data = a.data * b

        def backward(g):
            a._accumulate(_unbroadcast(g * b, a.shape))

        return _result(data, (a,), backward)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2D x 2D product, or 2D x 1D matrix-vector product."""
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    data = a.data @ b.data
    if b.ndim == 2:

        def backward(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

    else:

        def backward(g):
            if a.requires_grad:
                a._accumulate(np.outer(g, b.data))
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

    return _result(data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {a.shape}")

    def backward(g):
        a._accumulate(g.T)

    return _result(a.data.T, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape

    def backward(g):
        a._accumulate(g.reshape(orig))

    return _result(a.data.reshape(shape), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _result(data, tuple(tensors), backward)


def gather(a: Tensor, indices) -> Tensor:
    """Select rows (2D input) or elements (1D input) along axis 0."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("gather indices must be one-dimensional")
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather index out of range for axis of size {n}")
    data = a.data[idx]

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        a._accumulate(buf)

    return _result(data, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(np.full_like(a.data, g))

    return _result(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return _result(data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - data * data))

    return _result(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # split by sign to avoid exp overflow
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    data = data.astype(x.dtype, copy=False)

    def backward(g):
        a._accumulate(g * data * (1.0 - data))

    return _result(data, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate((dxhat - m1 - xhat * m2) * inv)

    return _result(data, (x, gain, bias), backward)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax; entries where mask is False get probability 0.

    Every row must keep at least one entry.
    """
    s = x.data
    if mask is not None:
        if not mask.any(axis=-1).all():
            raise ValueError("softmax_rows: some row is fully masked")
        s = np.where(mask, s, -np.inf)
    m = s.max(axis=-1, keepdims=True)
    e = np.exp(s - m)
    y = e / e.sum(axis=-1, keepdims=True)
    y = y.astype(x.dtype, copy=False)

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        x._accumulate(y * (g - inner))

    return _result(y, (x,), backward)


def softmax_xent_with_logits(logits: Tensor, target_index: int) -> Tensor:
    """-log softmax(logits)[target], computed with max subtraction."""
    if logits.ndim != 1 or logits.shape[0] < 2:
        raise ValueError(f"need a logit vector of length >= 2, got shape {logits.shape}")
    if not 0 <= target_index < logits.shape[0]:
        raise ValueError(f"target index {target_index} out of range for {logits.shape[0]} logits")
    z = logits.data
    m = z.max()
    e = np.exp(z - m)
    total = e.sum()
    p = e / total
    loss = np.asarray(np.log(total) + m - z[target_index], dtype=z.dtype)

    def backward(g):
        d = p * g
        d[target_index] -= g
        logits._accumulate(d.astype(z.dtype, copy=False))

    return _result(loss, (logits,), backward)


def _segment_starts(segment_ids, n_rows: int):
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.shape[0] != n_rows:
        raise ValueError(f"segment_ids must have one id per row ({n_rows}), got shape {ids.shape}")
    if ids.size == 0:
        raise ValueError("segment_ids must be non-empty")
    if np.any(np.diff(ids) < 0):
        raise ValueError("segment_ids must be non-decreasing")
    starts = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]])
    counts = np.diff(np.r_[starts, ids.shape[0]])
    return starts, counts


def segment_reduce(values: Tensor, segment_ids, mode: str) -> Tensor:
    """Per-segment mean or max over contiguous runs of equal segment ids.

    mean splits the gradient uniformly over a segment's rows; max routes
    it to the first row attaining the maximum in each column.
    """
    if values.ndim != 2:
        raise ValueError(f"segment_reduce expects an n x d matrix, got shape {values.shape}")
    starts, counts = _segment_starts(segment_ids, values.shape[0])
    if mode == "mean":
        sums = np.add.reduceat(values.data, starts, axis=0)
        data = sums / counts[:, None].astype(values.dtype)

        def backward(g):
            values._accumulate(np.repeat(g / counts[:, None], counts, axis=0))

    elif mode == "max":
        data = np.maximum.reduceat(values.data, starts, axis=0)
        cols = np.arange(values.shape[1])

        def backward(g):
            buf = np.zeros_like(values.data)
            for s, (lo, c) in enumerate(zip(starts, counts)):
                seg = values.data[lo : lo + c]
                first_arg = np.argmax(seg == data[s], axis=0)
                buf[lo + first_arg, cols] += g[s]
            values._accumulate(buf)

    else:
        raise ValueError(f"unknown segment_reduce mode {mode!r}")
    return _result(data, (values,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the mask is a constant, so this is just a mul."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / (1.0 - rate)
    return mul(x, Tensor(mask))
