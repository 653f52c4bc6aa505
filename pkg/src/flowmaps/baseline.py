"""MLP baseline: shared Map Encoder, mean-pooled context, Gaussian head."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, no_grad
from .autograd import tensor as T
from .cdit import ModelConfig, _sort_context
from .mapenc import MapEncoder, TokenBatch
from .nn import Embedding, Linear, Module, TimeEmbedder

DEFAULT_SIGMA = 0.05


class MLPBaseline(Module):
    kind = "mlp_baseline"

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float64, sigma: float = DEFAULT_SIGMA):
        if not sigma > 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        D = config.dim
        self.config = config
        self.dtype = dtype
        self.sigma = sigma
        self.encoder = MapEncoder(D, config.enc_layers, config.heads, config.palette_size, config.tau_max, rng, dtype, config.dropout)
        self.tau_q_emb = TimeEmbedder(D, rng, dtype)
        self.descriptor_emb = Embedding(config.palette_size, D, rng, dtype)
        hidden = 4 * D
        self.fc1 = Linear(2 * D, hidden, rng, dtype)
        self.fc2 = Linear(hidden, hidden, rng, dtype)
        self.fc3 = Linear(hidden, 4, rng, dtype)

    def mean(self, tokens: TokenBatch, tau, tau_q, descriptor, training=False, rng=None) -> Tensor:
        ctx = self.encoder(tokens, tau, training, rng)
        values, keep = _sort_context(ctx.values, ctx.mask)
        weights = keep / keep.sum(axis=1, keepdims=True)
        pooled = (values * weights[..., None].astype(self.dtype)).sum(axis=1)
        cond = self.tau_q_emb(np.asarray(tau_q)) + self.descriptor_emb(np.asarray(descriptor))
        h = T.concat([pooled, cond], axis=-1)
        h = T.dropout(T.gelu(self.fc1(h)), self.config.dropout, training, rng)
        h = T.dropout(T.gelu(self.fc2(h)), self.config.dropout, training, rng)
        return self.fc3(h)

    def loss(self, batch: dict, x0=None, t=None, training=False, rng=None) -> Tensor:
        pred = self.mean(batch["tokens"], batch["tau"], batch["tau_q"], batch["descriptor"], training, rng)
        return T.mean_square_error(pred, batch["x1"].astype(self.dtype))

    def sample(self, batch: dict, n: int, rng, steps: int = 0, method: str = "", noise=None):
        """n Gaussian draws around the predicted mean; ``steps``/``method`` are unused."""
        with no_grad():
            mu = self.mean(batch["tokens"], batch["tau"], batch["tau_q"], batch["descriptor"]).data.astype(np.float64)
        if noise is None:
            boxes = baseline_sample_batch(mu, self.sigma, rng, n)
        else:
            boxes = mu[:, None, :] + self.sigma * np.asarray(noise, dtype=np.float64)
        return boxes, np.ones(boxes.shape[:2], dtype=bool)


def baseline_forward(model: MLPBaseline, tokens: TokenBatch, tau, tau_q, descriptor) -> np.ndarray:
    """Predicted mean box(es) in evaluation mode."""
    with no_grad():
        return model.mean(tokens, tau, tau_q, descriptor).data


def baseline_sample(mean, sigma: float, rng: np.random.Generator, n: int) -> np.ndarray:
    """n i.i.d. boxes from N(mean, sigma^2 I)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    mean = np.asarray(mean, dtype=np.float64)
    return mean + sigma * rng.standard_normal((n,) + mean.shape)


def baseline_sample_batch(means: np.ndarray, sigma: float, rng: np.random.Generator, n: int) -> np.ndarray:
    """(B, 4) means -> (B, n, 4) samples."""
    return means[:, None, :] + sigma * rng.standard_normal((means.shape[0], n, means.shape[1]))
