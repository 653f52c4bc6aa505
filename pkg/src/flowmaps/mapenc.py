"""Map Encoder: scene snapshot -> masked sequence of context embeddings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import Tensor
from .autograd import tensor as T
from .errors import CapacityError, DomainError
from .nn import Embedding, FeedForward, Linear, Module, MultiHeadAttention, canonical_order, sinusoidal
from .sim import MapSnapshot

KIND_FURNITURE = 0
KIND_OBJECT = 1


@dataclass(frozen=True)
class SceneToken:
    descriptor_id: int
    bbox: tuple[float, float, float, float]
    kind: int
    valid: bool


PAD_TOKEN = SceneToken(0, (0.0, 0.0, 0.0, 0.0), KIND_FURNITURE, False)


@dataclass
class TokenBatch:
    """Stacked tokens: descriptor (B,S) ints, bbox (B,S,4), kind (B,S), valid (B,S) bools."""

    descriptor: np.ndarray
    bbox: np.ndarray
    kind: np.ndarray
    valid: np.ndarray

    def __len__(self):
        return self.descriptor.shape[0]

    def take(self, idx) -> "TokenBatch":
        return TokenBatch(self.descriptor[idx], self.bbox[idx], self.kind[idx], self.valid[idx])


@dataclass
class ContextEmbedding:
    values: Tensor  # (B, S, D)
    mask: np.ndarray  # (B, S) bool
    state_time: np.ndarray  # (B,)


def tokenize_map(snapshot: MapSnapshot, S: int = 16) -> list[SceneToken]:
    n = len(snapshot.furniture) + len(snapshot.objects)
    if n > S:
        raise CapacityError(f"scene has {n} elements but the token budget is S={S}")
    tokens = [SceneToken(f.descriptor, f.bbox.as_tuple(), KIND_FURNITURE, True) for f in snapshot.furniture]
    tokens += [SceneToken(o.descriptor, o.bbox.as_tuple(), KIND_OBJECT, True) for o in snapshot.objects]
    return tokens + [PAD_TOKEN] * (S - n)


def stack_tokens(token_lists: Sequence[Sequence[SceneToken]]) -> TokenBatch:
    return TokenBatch(
        descriptor=np.array([[t.descriptor_id for t in ts] for ts in token_lists], dtype=np.int64),
        bbox=np.array([[t.bbox for t in ts] for ts in token_lists], dtype=np.float64),
        kind=np.array([[t.kind for t in ts] for ts in token_lists], dtype=np.int64),
        valid=np.array([[t.valid for t in ts] for ts in token_lists], dtype=bool),
    )


class EncoderLayer(Module):
    """Pre-norm transformer encoder layer with key-padding mask."""

    def __init__(self, dim: int, heads: int, rng, dtype, dropout: float):
        self.attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.ffn = FeedForward(dim, 4 * dim, rng, dtype, dropout)
        self.p = dropout

    def __call__(self, h: Tensor, keep: np.ndarray, training=False, rng=None) -> Tensor:
        x = T.layer_norm(h)
        h = h + T.dropout(self.attn(x, x, keep), self.p, training, rng)
        h = h + T.dropout(self.ffn(T.layer_norm(h), training, rng), self.p, training, rng)
        return h


class MapEncoder(Module):
    def __init__(
        self,
        dim: int,
        layers: int,
        heads: int,
        palette_size: int,
        tau_max: int,
        rng: np.random.Generator,
        dtype=np.float64,
        dropout: float = 0.0,
    ):
        self.descriptor_emb = Embedding(palette_size, dim, rng, dtype)
        self.box_proj = Linear(4, dim, rng, dtype)
        self.kind_emb = Embedding(2, dim, rng, dtype)
        self.layers = [EncoderLayer(dim, heads, rng, dtype, dropout) for _ in range(layers)]
        self.dim = dim
        self.tau_max = tau_max
        self.dtype = dtype

    def embed(self, tokens: TokenBatch, tau) -> Tensor:
        """Summed token embeddings before any encoder layer; padded rows are zero."""
        tau = np.asarray(tau)
        if np.any(tau < 0) or np.any(tau > self.tau_max):
            raise DomainError(f"state time must lie in [0, {self.tau_max}], got {tau}")
        time = sinusoidal(tau, self.dim).astype(self.dtype)[:, None, :]
        h = (
            self.descriptor_emb(tokens.descriptor)
            + self.box_proj(Tensor(tokens.bbox.astype(self.dtype)))
            + self.kind_emb(tokens.kind)
            + time
        )
        return h * tokens.valid[..., None].astype(self.dtype)

    def __call__(self, tokens: TokenBatch, tau, training: bool = False, rng=None) -> ContextEmbedding:
        keep = tokens.valid
        h = self.embed(tokens, tau)
        order = canonical_order(h.data, keep)
        h = T.permute_rows(h, order)
        keep_sorted = np.take_along_axis(keep, order, axis=1)
        for layer in self.layers:
            h = layer(h, keep_sorted, training, rng)
        h = T.layer_norm(h) * keep_sorted[..., None].astype(self.dtype)
        h = T.permute_rows(h, np.argsort(order, axis=1))
        return ContextEmbedding(h, keep, np.asarray(tau))


def encode_map(tokens: Sequence[SceneToken], tau: int, encoder: MapEncoder) -> ContextEmbedding:
    """Encode a single tokenized snapshot (batch of one)."""
    return encoder(stack_tokens([tokens]), np.array([tau]))
