"""Layers shared by the map encoder, the CDiT stack and the MLP baseline."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .autograd import Tensor
from .autograd import tensor as T


class Module:
    """Parameter container walked in attribute-definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)}, unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float64, zero: bool = False):
        bound = 1.0 / math.sqrt(d_in)
        w = np.zeros((d_in, d_out)) if zero else rng.uniform(-bound, bound, (d_in, d_out))
        self.weight = param(w, dtype)
        self.bias = param(np.zeros(d_out), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator, dtype=np.float64, std: float = 1.0):
        self.table = param(rng.normal(0.0, std, (n, dim)), dtype)

    def __call__(self, idx) -> Tensor:
        return T.embedding(self.table, idx)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng, dtype=np.float64, dropout: float = 0.0):
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)
        self.p = dropout

    def __call__(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        h = T.dropout(T.gelu(self.fc1(x)), self.p, training, rng)
        return self.fc2(h)


class TimeEmbedder(Module):
    """Sinusoidal features of a scalar followed by Linear-SiLU-Linear."""

    def __init__(self, dim: int, rng, dtype=np.float64, freq_dim: int = 64, scale: float = 1.0):
        self.fc1 = Linear(freq_dim, dim, rng, dtype)
        self.fc2 = Linear(dim, dim, rng, dtype)
        self.freq_dim = freq_dim
        self.scale = scale

    def __call__(self, values) -> Tensor:
        feats = sinusoidal(np.asarray(values, dtype=np.float64) * self.scale, self.freq_dim)
        h = Tensor(feats.astype(self.fc1.weight.dtype))
        return self.fc2(T.silu(self.fc1(h)))


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng, dtype=np.float64):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.q = Linear(dim, dim, rng, dtype)
        self.k = Linear(dim, dim, rng, dtype)
        self.v = Linear(dim, dim, rng, dtype)
        self.o = Linear(dim, dim, rng, dtype)
        self.heads = heads

    def _split(self, x: Tensor) -> Tensor:
        B, L, D = x.shape
        return x.reshape(B, L, self.heads, D // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, xq: Tensor, xkv: Tensor, keep: np.ndarray) -> Tensor:
        """``xq`` (B, Lq, D) attends to ``xkv`` (B, Lk, D); ``keep`` is (B, Lk)."""
        B, Lq, D = xq.shape
        q = self._split(self.q(xq))
        k = self._split(self.k(xkv))
        v = self._split(self.v(xkv))
        scores = T.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(D // self.heads))
        attn = T.softmax(scores, keep[:, None, None, :])
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, Lq, D)
        return self.o(out)


def sinusoidal(values, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Standard sin/cos features of shape values.shape + (dim,)."""
    values = np.asarray(values, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = values[..., None] * freqs
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(values.shape + (1,))], axis=-1)
    return emb


def canonical_order(x: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Content-defined ordering of the rows of each (S, D) slice of ``x``.

    Valid rows come first, sorted lexicographically by value; identical rows
    keep their relative order.  Feeding a set through this ordering before
    any reduction over it makes the reduction independent of how the caller
    listed the elements, down to the last bit.
    """
    B, S, D = x.shape
    keys = np.empty((D + 1, B, S), dtype=x.dtype)
    keys[:D] = np.moveaxis(x, -1, 0)[::-1]
    keys[D] = ~keep.astype(bool)
    return np.lexsort(keys, axis=-1)


def modulate(x: Tensor, shift: Tensor, scale_: Tensor) -> Tensor:
    return x * (scale_ + 1.0) + shift
