"""Minimal reverse-mode differentiation over dense float64 arrays.

Every operator returns a new :class:`Tensor` that remembers its parents and a
closure propagating the output gradient back to them.  :func:`backward` walks
the recorded graph in reverse creation order and then releases it, so each
training step builds a fresh graph.

Only same-shape elementwise algebra is supported (plus python scalars); there
is no general broadcasting.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_ids = itertools.count()


class _Mode(threading.local):
    """Per-thread recording switches, so concurrent inference cannot flip them for training."""

    grad_enabled = True
    # argmax choices of global_max_pool, recorded or replayed by argmax_trace()
    trace: list[np.ndarray] | None = None
    replay: Iterator[np.ndarray] | None = None


_mode = _Mode()


class ContractError(ValueError):
    """Raised when an operator receives arguments violating its shape contract."""


class Tensor:
    __slots__ = ("data", "_grad", "requires_grad", "_parents", "_backward", "_id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self._grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = None if value is None else np.asarray(value, dtype=DTYPE)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self._grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self._grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # elementwise algebra -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, _neg_operand(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


class Parameter(Tensor):
    """Named leaf tensor owned by a model."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    prev, _mode.grad_enabled = _mode.grad_enabled, False
    try:
        yield
    finally:
        _mode.grad_enabled = prev


@contextlib.contextmanager
def argmax_trace(replay: Sequence[np.ndarray] | None = None):
    """Record (or, given a previous recording, replay) every global_max_pool argmax.

    Replaying keeps the piecewise-linear pooling on one smooth piece, which
    is what finite-difference checks of a whole model need near ties.
    Yields the list being recorded.
    """
    prev = _mode.trace, _mode.replay
    recorded: list[np.ndarray] = []
    _mode.trace, _mode.replay = recorded, (iter(list(replay)) if replay is not None else None)
    try:
        yield recorded
    finally:
        _mode.trace, _mode.replay = prev


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _mode.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _neg_operand(other):
    if isinstance(other, Tensor):
        return neg(other)
    return -np.asarray(other, dtype=DTYPE)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ContractError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# pointwise operators


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        c = float(b)
        return _make(a.data + c, (a,), lambda g: a._accumulate(g))
    b = as_tensor(b)
    _check_same_shape(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: a._accumulate(-g))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        c = float(b)
        return _make(a.data * c, (a,), lambda g: a._accumulate(g * c))
    b = as_tensor(b)
    _check_same_shape(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: a._accumulate(2.0 * a.data * g))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    return _make(y, (x,), lambda g: x._accumulate(g * y * (1.0 - y)))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: x._accumulate(g * (1.0 - y * y)))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ContractError("log of non-positive value")
    return _make(np.log(x.data), (x,), lambda g: x._accumulate(g / x.data))


# ---------------------------------------------------------------------------
# reductions and reshaping


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _make(np.array(x.data.sum()), (x,), lambda g: x._accumulate(np.full(x.shape, float(g))))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _make(np.array(x.data.mean()), (x,), lambda g: x._accumulate(np.full(x.shape, float(g) / n)))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: x._accumulate(g.reshape(x.shape)))


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Stack tensors ``[C_i, h, w]`` along the channel axis."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat_channels: no parts")
    spatial = parts[0].shape[1:]
    for p in parts:
        if p.data.ndim != 3 or p.shape[1:] != spatial:
            raise ContractError(f"concat_channels: spatial extent {p.shape[1:]} != {spatial}")
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p._accumulate(g[lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=0), parts, backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        x._accumulate(full)

    return _make(x.data[start:stop], (x,), backward)


def stack_scalars(items: Sequence[Tensor]) -> Tensor:
    """Gather scalar tensors into one vector."""
    items = [as_tensor(t) for t in items]

    def backward(g):
        for i, t in enumerate(items):
            if t.requires_grad:
                t._accumulate(np.full(t.shape, g[i]))

    return _make(np.array([t.item() for t in items]), items, backward)


def global_max_pool(x: Tensor) -> Tensor:
    """Per-channel maximum of ``[C, h, w]``; gradient goes to the first argmax."""
    if x.data.ndim != 3 or x.shape[1] < 1 or x.shape[2] < 1:
        raise ContractError(f"global_max_pool: bad shape {x.shape}")
    flat = x.data.reshape(x.shape[0], -1)
    idx = np.argmax(flat, axis=1) if _mode.replay is None else next(_mode.replay)
    if _mode.trace is not None:
        _mode.trace.append(idx)
    chans = np.arange(x.shape[0])

    def backward(g):
        gx = np.zeros_like(flat)
        gx[chans, idx] = g
        x._accumulate(gx.reshape(x.shape))

    return _make(flat[chans, idx].copy(), (x,), backward)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if weight.data.ndim != 2 or x.shape != (weight.shape[1],) or bias.shape != (weight.shape[0],):
        raise ContractError(f"dense: x{x.shape} weight{weight.shape} bias{bias.shape}")

    def backward(g):
        if x.requires_grad:
            x._accumulate(weight.data.T @ g)
        if weight.requires_grad:
            weight._accumulate(np.outer(g, x.data))
        if bias.requires_grad:
            bias._accumulate(g)

    return _make(weight.data @ x.data + bias.data, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    p = (k - 1) // 2
    c, h, w = x.shape
    if k == 1:
        return x.reshape(c, h * w)
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # c, h, w, k, k
    return win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, h * w)


def _col2im(cols: np.ndarray, c: int, h: int, w: int, k: int) -> np.ndarray:
    if k == 1:
        return cols.reshape(c, h, w)
    p = (k - 1) // 2
    out = np.zeros((c, h + 2 * p, w + 2 * p), dtype=DTYPE)
    blocks = cols.reshape(c, k, k, h, w)
    for a in range(k):
        for b in range(k):
            out[:, a:a + h, b:b + w] += blocks[:, a, b]
    return out[:, p:p + h, p:p + w]


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: int | None = None) -> Tensor:
    """Stride-1 same-padded 2-D convolution (cross-correlation).

    ``x`` is ``[C_in, h, w]``, ``kernel`` is ``[C_out, C_in, k, k]`` with odd
    ``k``; the output is ``[C_out, h, w]``.
    """
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ContractError(f"conv2d: input {x.shape}, kernel {kernel.shape}")
    c_out, c_in, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ContractError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if padding is not None and padding != (k - 1) // 2:
        raise ContractError("conv2d: only same padding is supported")
    if x.shape[0] != c_in:
        raise ContractError(f"conv2d: kernel expects {c_in} input channels, got {x.shape[0]}")
    if bias is not None and bias.shape != (c_out,):
        raise ContractError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    _, h, w = x.shape
    cols = _im2col(x.data, k)
    wmat = kernel.data.reshape(c_out, -1)
    y = wmat @ cols
    if bias is not None:
        y += bias.data[:, None]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g2 = g.reshape(c_out, h * w)
        if kernel.requires_grad:
            kernel._accumulate((g2 @ cols.T).reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=1))
        if x.requires_grad:
            x._accumulate(_col2im(wmat.T @ g2, c_in, h, w, k))

    return _make(y.reshape(c_out, h, w), parents, backward)


# ---------------------------------------------------------------------------
# graph traversal


def _topological(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen.add(node._id)
        nodes.append(node)
        stack.extend(p for p in node._parents if p.requires_grad)
    # creation order is a valid topological order of the DAG
    nodes.sort(key=lambda t: t._id, reverse=True)
    return nodes


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    The recorded graph is released afterwards unless ``retain_graph`` is set.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes = _topological(loss)
    # interior nodes accumulate into private buffers so leaves keep
    # the only persistent gradients
    for node in nodes:
        if node._backward is not None:
            node._grad = None
    loss._accumulate(np.ones(loss.shape))
    for node in nodes:
        if node._backward is not None and node._grad is not None:
            g = node._grad
            node._backward(g)
            node._grad = None
    if not retain_graph:
        for node in nodes:
            node._parents = ()
            node._backward = None


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
