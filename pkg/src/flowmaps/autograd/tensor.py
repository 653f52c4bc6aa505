"""Dense tensors with tape-free reverse-mode differentiation.

Each non-leaf tensor remembers its parents and a closure mapping the
upstream gradient to one gradient per parent.  ``Tensor.backward`` walks
the graph in reverse topological order and accumulates gradients, so a
tensor used twice receives the sum of both contributions.

Only the operations the FlowMaps networks need are provided.  Broadcasting
follows numpy and is undone in the backward pass by summing over the
broadcast axes.
"""

from __future__ import annotations

import contextlib
from typing import Sequence

import numpy as np

from ..errors import ContractError, DimensionError, DomainError
from . import _backend

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- differentiation ---------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise ContractError("backward already ran on this graph; rebuild the forward pass first")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires grad")
        self._consumed = True

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ----------------------------------------------------
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --------------------------------------------------------------------------
# Elementwise arithmetic
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


# --------------------------------------------------------------------------
# Shape manipulation
# --------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=()) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (slice/integer) indexing; fancy indexing is not supported."""
    src_shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _result(a.data[idx], (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, backward, "concat")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / float(n))


def permute_rows(a: Tensor, order: np.ndarray) -> Tensor:
    """Reorder axis 1 of a (B, S, ...) tensor per batch row.

    ``order`` has shape (B, S) and each row must be a permutation.
    """
    if order.shape != a.shape[:2]:
        raise DimensionError(f"permute_rows: order {order.shape} does not match {a.shape[:2]}")
    idx = order.reshape(order.shape + (1,) * (a.ndim - 2))
    inv = np.argsort(order, axis=1).reshape(idx.shape)
    return _result(np.take_along_axis(a.data, idx, axis=1), (a,), lambda g: (np.take_along_axis(g, inv, axis=1),), "permute")


# --------------------------------------------------------------------------
# Neural-network primitives
# --------------------------------------------------------------------------


def embedding(table: Tensor, idx) -> Tensor:
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise DomainError("embedding indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DomainError(f"embedding index out of range [0, {table.shape[0]})")
    dim = table.shape[1]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, dim))
        return (gt,)

    return _result(table.data[idx], (table,), backward, "embedding")


def layer_norm(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, no learnable affine."""
    shape = a.shape
    x2 = np.ascontiguousarray(a.data.reshape(-1, shape[-1]))
    y, rstd = _backend.kernels.layer_norm_fwd(x2, eps)

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(-1, shape[-1]), dtype=y.dtype)
        return (_backend.kernels.layer_norm_bwd(g2, y, rstd).reshape(shape),)

    return _result(y.reshape(shape), (a,), backward, "layer_norm")


def softmax(a: Tensor, keep=None) -> Tensor:
    """Softmax over the last axis.

    ``keep`` (broadcastable boolean) marks positions allowed to receive
    weight; the rest get exactly zero.  A row with nothing kept is all zeros.
    """
    shape = a.shape
    x2 = np.ascontiguousarray(a.data.reshape(-1, shape[-1]))
    if keep is None:
        k2 = np.ones(x2.shape, dtype=np.uint8)
    else:
        try:
            k = np.broadcast_to(np.asarray(keep, dtype=np.uint8), shape)
        except ValueError:
            raise DimensionError(f"softmax: mask {np.shape(keep)} does not broadcast to {shape}") from None
        k2 = np.ascontiguousarray(k.reshape(-1, shape[-1]))
    p = _backend.kernels.masked_softmax_fwd(x2, k2)

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(-1, shape[-1]), dtype=p.dtype)
        return (_backend.kernels.masked_softmax_bwd(g2, p).reshape(shape),)

    return _result(p.reshape(shape), (a,), backward, "softmax")


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    return _result(_backend.kernels.gelu_fwd(x), (a,), lambda g: (_backend.kernels.gelu_bwd(g, x),), "gelu")


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    return _result(x * sig, (a,), lambda g: (g * sig * (1.0 + x * (1.0 - sig)),), "silu")


def dropout(a: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity when not training or when p == 0."""
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ContractError("dropout in training mode needs a random generator")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return _result(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


def mean_square_error(pred: Tensor, target) -> Tensor:
    """Squared Euclidean error over the last axis, averaged over the rest."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"mean_square_error: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target
    n = max(1, diff.size // diff.shape[-1]) if diff.ndim else 1
    value = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)
    return _result(value, (pred,), lambda g: (g * (2.0 / n) * diff,), "mse")
