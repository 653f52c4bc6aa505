"""Unconditional 2-d flow on a two-component Gaussian mixture.

A sanity check that the flow machinery (path, loss, integrator, autodiff,
optimizer) can represent a multimodal target at all, independent of the
scene model.
"""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, adamw_step, clip_grad_norm, cosine_lr, no_grad
from .autograd import tensor as T
from .autograd.optim import OptimizerState
from .flow import TimeSampler, cfm_loss, integrate, linear_path
from .nn import Linear, Module, sinusoidal


def mixture_sample(rng: np.random.Generator, n: int, center: float = 0.5, sigma: float = 0.05) -> np.ndarray:
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    return sign[:, None] * center + sigma * rng.standard_normal((n, 2))


class ToyField(Module):
    def __init__(self, rng, dim: int = 2, hidden: int = 128, t_features: int = 16, dtype=np.float64):
        self.fc1 = Linear(dim + t_features, hidden, rng, dtype)
        self.fc2 = Linear(hidden, hidden, rng, dtype)
        self.fc3 = Linear(hidden, dim, rng, dtype)
        self.t_features = t_features
        self.dtype = dtype

    def __call__(self, x: np.ndarray, t) -> Tensor:
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), x.shape[:1])
        feats = np.concatenate([x, sinusoidal(t * 100.0, self.t_features)], axis=1).astype(self.dtype)
        h = T.silu(self.fc1(Tensor(feats)))
        h = T.silu(self.fc2(h))
        return self.fc3(h)


def train_toy_flow(
    seed: int = 0, iterations: int = 3000, batch: int = 256, lr: float = 2e-3, sigma: float = 0.05
) -> ToyField:
    rng = np.random.default_rng(seed)
    field = ToyField(rng)
    params = field.parameters()
    opt = OptimizerState.for_params(params, beta1=0.9, weight_decay=0.0)
    sampler = TimeSampler("logit_normal")
    for step in range(iterations):
        x1 = mixture_sample(rng, batch, sigma=sigma)
        x0 = rng.standard_normal(x1.shape)
        t = sampler.sample(rng, batch)
        x_t, u = linear_path(x0, x1, t)
        loss = cfm_loss(field(x_t, t), u)
        field.zero_grad()
        loss.backward()
        clip_grad_norm(params, 1.0)
        adamw_step(params, [p.grad for p in params], opt, cosine_lr(step, iterations, lr))
    return field


def sample_toy_flow(field: ToyField, n: int, rng: np.random.Generator, steps: int = 20) -> np.ndarray:
    with no_grad():
        return integrate(lambda x, t: field(x, t).data, rng.standard_normal((n, 2)), steps, "midpoint")
