"""CDiT velocity field: a query box cross-attends the scene context.

Blocks follow the DiT AdaLN-Zero recipe minus self-attention: the query
side is a single token per example (or one row per sample at inference),
so every row is processed independently and can share its context.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autograd import Tensor
from .autograd import tensor as T
from .errors import ContractError, DomainError
from .mapenc import ContextEmbedding, MapEncoder, TokenBatch
from .nn import Embedding, FeedForward, Linear, Module, MultiHeadAttention, TimeEmbedder, canonical_order, modulate, sinusoidal


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    cdit_blocks: int = 2
    enc_layers: int = 2
    heads: int = 4
    palette_size: int = 12
    tau_max: int = 20
    tokens: int = 16
    dropout: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)


def check_box_input(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != 4:
        raise DomainError(f"boxes need 4 components, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DomainError("box input contains non-finite values")
    return x


def _sort_context(context: Tensor, keep: np.ndarray) -> tuple[Tensor, np.ndarray]:
    if not np.all(keep.any(axis=1)):
        raise ContractError("context has an example with no valid rows")
    order = canonical_order(context.data, keep)
    return T.permute_rows(context, order), np.take_along_axis(keep, order, axis=1)


class CDiTBlock(Module):
    def __init__(self, dim: int, heads: int, rng, dtype, dropout: float):
        self.ada = Linear(dim, 6 * dim, rng, dtype, zero=True)
        self.attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.ffn = FeedForward(dim, 4 * dim, rng, dtype, dropout)
        self.p = dropout
        self.dim = dim

    def modulation(self, cond: Tensor) -> list[Tensor]:
        """(shift1, scale1, gate1, shift2, scale2, gate2), each (B, 1, D)."""
        m = self.ada(T.silu(cond))
        D = self.dim
        return [m[:, None, i * D : (i + 1) * D] for i in range(6)]

    def __call__(
        self,
        query: Tensor,
        cond: Tensor,
        context: Tensor,
        keep: np.ndarray,
        training: bool = False,
        rng=None,
        presorted: bool = False,
    ) -> Tensor:
        if not presorted:
            context, keep = _sort_context(context, keep)
        shift1, scale1, gate1, shift2, scale2, gate2 = self.modulation(cond)
        x = modulate(T.layer_norm(query), shift1, scale1)
        query = query + gate1 * T.dropout(self.attn(x, context, keep), self.p, training, rng)
        x = modulate(T.layer_norm(query), shift2, scale2)
        query = query + gate2 * T.dropout(self.ffn(x, training, rng), self.p, training, rng)
        return query


class FlowMapsModel(Module):
    """Map Encoder + CDiT stack producing the velocity u_t(x_t) in R^4."""

    kind = "flowmaps"

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float64):
        D = config.dim
        self.config = config
        self.dtype = dtype
        self.encoder = MapEncoder(D, config.enc_layers, config.heads, config.palette_size, config.tau_max, rng, dtype, config.dropout)
        self.query_lift = Linear(4, D, rng, dtype)
        self.tau_q_emb = TimeEmbedder(D, rng, dtype)
        self.descriptor_emb = Embedding(config.palette_size, D, rng, dtype)
        self.t_emb = TimeEmbedder(D, rng, dtype, scale=1000.0)
        self.blocks = [CDiTBlock(D, config.heads, rng, dtype, config.dropout) for _ in range(config.cdit_blocks)]
        self.final_ada = Linear(D, 2 * D, rng, dtype, zero=True)
        self.out = Linear(D, 4, rng, dtype, zero=True)
        self.query_pos = sinusoidal(np.zeros(1), D).astype(dtype)  # position 0 of a length-1 query sequence

    # -- pieces -------------------------------------------------------------
    def build_query_token(self, x_t) -> Tensor:
        x_t = check_box_input(x_t).astype(self.dtype)
        return self.query_lift(Tensor(x_t)) + self.query_pos

    def build_conditioning(self, tau_q, descriptor, t) -> Tensor:
        tau_q = np.asarray(tau_q)
        t = np.asarray(t, dtype=np.float64)
        if np.any(tau_q < 0) or np.any(tau_q > self.config.tau_max):
            raise DomainError(f"query time must lie in [0, {self.config.tau_max}], got {tau_q}")
        if np.any(t < 0) or np.any(t > 1):
            raise DomainError("flow time t must lie in [0, 1]")
        return self.tau_q_emb(tau_q) + self.descriptor_emb(np.asarray(descriptor)) + self.t_emb(t)

    def encode(self, tokens: TokenBatch, tau, training=False, rng=None) -> ContextEmbedding:
        return self.encoder(tokens, tau, training, rng)

    def velocity(
        self,
        x_t,
        t,
        tau_q,
        descriptor,
        context: ContextEmbedding,
        training: bool = False,
        rng=None,
    ) -> Tensor:
        """``x_t`` is (B, L, 4): L query rows share the example's context."""
        x_t = np.asarray(x_t)
        if x_t.ndim == 2:
            x_t = x_t[:, None, :]
        query = self.build_query_token(x_t)
        cond = self.build_conditioning(tau_q, descriptor, t)
        ctx, keep = _sort_context(context.values, context.mask)
        for block in self.blocks:
            query = block(query, cond, ctx, keep, training, rng, presorted=True)
        m = self.final_ada(T.silu(cond))
        D = self.config.dim
        x = modulate(T.layer_norm(query), m[:, None, :D], m[:, None, D:])
        return self.out(x)

    # -- training / sampling --------------------------------------------------
    def loss(self, batch: dict, x0: np.ndarray, t: np.ndarray, training=False, rng=None) -> Tensor:
        from .flow import cfm_loss, linear_path

        x1 = batch["x1"]
        x_t, u = linear_path(x0, x1, t)
        ctx = self.encode(batch["tokens"], batch["tau"], training, rng)
        pred = self.velocity(x_t[:, None, :], t, batch["tau_q"], batch["descriptor"], ctx, training, rng)
        return cfm_loss(pred[:, 0, :], u.astype(self.dtype))

    def sample(self, batch: dict, n: int, rng, steps: int = 10, method: str = "midpoint", noise=None):
        """n flow samples per example -> (boxes (B, n, 4), ok mask (B, n)).

        ``noise`` supplies the (B, n, 4) starting points; otherwise they are
        drawn from ``rng``.
        """
        from .autograd import no_grad
        from .flow import integrate

        B = len(batch["tau"])
        x0 = rng.standard_normal((B, n, 4)) if noise is None else np.asarray(noise, dtype=np.float64)
        with no_grad():
            ctx = self.encode(batch["tokens"], batch["tau"])

            def field(x, t):
                v = self.velocity(x.astype(self.dtype), np.full(B, t), batch["tau_q"], batch["descriptor"], ctx)
                return v.data.astype(np.float64)

            return integrate(field, x0, steps, method, return_mask=True)


def velocity_forward(model: FlowMapsModel, x_t, t, tau_q, descriptor_id, context: ContextEmbedding) -> np.ndarray:
    """Evaluation-mode velocity for a batch; returns a plain array."""
    return model.velocity(x_t, t, tau_q, descriptor_id, context).data
