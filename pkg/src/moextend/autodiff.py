"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. Node ids increase
monotonically with creation, so sorting the reachable nodes by id gives a
valid topological order; ``backward`` walks it in reverse.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels

_ids = itertools.count()
_state = threading.local()

GELU_MODES = ("tanh", "erf")
LAYERNORM_EPS = 1e-5


class ShapeError(ValueError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def set_requires_grad(self, flag: bool) -> None:
        self.requires_grad = bool(flag)
        self.grad = np.zeros_like(self.data) if flag else None

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad: np.ndarray | None = None) -> "Tape":
        tape = Tape.record(self)
        tape.run(self, grad)
        return tape

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


@dataclass
class Tape:
    """Nodes reachable from a root, in creation (topological) order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [root]
        while stack:
            node = stack.pop()
            if node._id in seen:
                continue
            seen.add(node._id)
            found.append(node)
            stack.extend(node._parents)
        found.sort(key=lambda t: t._id)
        return cls(found)

    def run(self, root: Tensor, grad: np.ndarray | None = None) -> None:
        if not root.requires_grad:
            raise RuntimeError("backward called on a tensor that does not require grad")
        if grad is None:
            if root.size != 1:
                raise ShapeError(f"implicit gradient needs a scalar root, got shape {root.shape}")
            grad = np.ones_like(root.data)
        root.grad = np.array(grad, dtype=np.float64).reshape(root.shape)
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # intermediates are not kept once consumed
                if node._parents:
                    node._backward = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
        if t.grad.shape != t.shape:
            t.grad = np.broadcast_to(t.grad, t.shape).copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), bw)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: _accum(x, g * y))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: _accum(x, g / x.data))


def gelu(x: Tensor, approximate: str = "tanh") -> Tensor:
    """GELU; ``approximate`` is ``"tanh"`` (default) or ``"erf"`` (exact)."""
    if approximate not in GELU_MODES:
        raise ValueError(f"unknown gelu mode {approximate!r}")
    y = _kernels.gelu(x.data, approximate)
    return _make(y, (x,), lambda g: _accum(x, g * _kernels.gelu_grad(x.data, approximate)))


# ------------------------------------------------------------ reductions / shape


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))

    return _make(np.asarray(y), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: _accum(x, g.reshape(x.shape)))


def transpose(x: Tensor, axes=None) -> Tensor:
    y = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(y, (x,), lambda g: _accum(x, np.transpose(g, inv)))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, cuts, axis=axis)):
            _accum(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


# ------------------------------------------------------------ linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    try:
        y = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}") from exc

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(y, (a, b), bw)


def ordered_matmul(a, b) -> Tensor:
    """2-D product whose entries do not depend on the other columns of ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"ordered_matmul shape mismatch: {a.shape} x {b.shape}")
    y = _kernels.ordered_matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(y, (a, b), bw)


# ------------------------------------------------------------ nn primitives


def softmax(x: Tensor, axis: int = -1, ordered: bool = False) -> Tensor:
    """Softmax along ``axis``.

    ``ordered`` sums the denominator left to right, so appending a column can
    only grow it; pairwise summation may regroup terms and round the other way.
    """
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError("softmax received non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    if ordered:
        den = np.take(np.cumsum(e, axis=axis), [-1], axis=axis)
    else:
        den = e.sum(axis=axis, keepdims=True)
    y = e / den

    def bw(g):
        _accum(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (x,), bw)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm affine shapes {gamma.shape}/{beta.shape} do not match width {d}")
    x2 = x.data.reshape(-1, d)
    xhat, rstd = _kernels.layernorm_fwd(x2, eps)
    y = xhat * gamma.data + beta.data

    def bw(g):
        g2 = g.reshape(-1, d)
        if gamma.requires_grad:
            _accum(gamma, (g2 * xhat).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g2.sum(axis=0))
        if x.requires_grad:
            _accum(x, _kernels.layernorm_bwd(g2 * gamma.data, xhat, rstd).reshape(x.shape))

    return _make(y.reshape(x.shape), (x, gamma, beta), bw)


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row softmax."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects B x V logits, got {logits.shape}")
    b, v = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != b:
        raise ShapeError(f"{t.shape[0]} targets for {b} logit rows")
    if np.any(t < 0) or np.any(t >= v):
        raise IndexError(f"target out of range [0, {v})")
    lsm = log_softmax_np(logits.data)
    rows = np.arange(b)
    loss = -lsm[rows, t].mean()

    def bw(g):
        p = np.exp(lsm)
        p[rows, t] -= 1.0
        _accum(logits, p * (float(g) / b))

    return _make(np.asarray(loss), (logits,), bw)


# ------------------------------------------------------------ indexing


def take_rows(x: Tensor, rows) -> Tensor:
    """``x[rows]`` along axis 0 of a 2-D tensor; duplicates accumulate in backward."""
    rows = np.asarray(rows, dtype=np.int64)

    def bw(g):
        gx = np.zeros_like(x.data)
        _kernels.index_add_rows(gx, rows, g)
        _accum(x, gx)

    return _make(x.data[rows], (x,), bw)


def scatter_rows(src: Tensor, rows, n: int) -> Tensor:
    """Zero ``n x D`` tensor with ``src[i]`` added into row ``rows[i]``."""
    rows = np.asarray(rows, dtype=np.int64)
    out = np.zeros((n,) + src.shape[1:])
    _kernels.index_add_rows(out, rows, src.data)
    return _make(out, (src,), lambda g: _accum(src, g[rows]))


def gather_cols(x: Tensor, idx: np.ndarray) -> Tensor:
    """Row-wise pick: ``out[r, s] = x[r, idx[r, s]]`` for 2-D ``x``."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.shape[0])[:, None]

    def bw(g):
        gx = np.zeros_like(x.data)
        for s in range(idx.shape[1]):
            gx[rows[:, 0], idx[:, s]] += g[:, s]
        _accum(x, gx)

    return _make(x.data[rows, idx], (x,), bw)


def topk_indices(x, k: int) -> list[int] | np.ndarray:
    """Indices of the ``k`` largest values, lower index first on ties.

    A 1-D input returns a list; a 2-D input is handled row-wise and returns
    an ``n x k`` int array. Not differentiable.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    n = arr.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} values")
    if arr.ndim == 1:
        return [int(i) for i in _kernels.topk_rows(arr[None, :], k)[0]]
    return _kernels.topk_rows(arr, k)
