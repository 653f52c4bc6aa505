"""AdamW, parameter EMA and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import DomainError, NonFiniteError
from .tensor import Tensor


@dataclass
class OptimizerState:
    beta1: float = 0.95
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "OptimizerState":
        st = cls(**kw)
        st.m = [np.zeros_like(p.data) for p in params]
        st.v = [np.zeros_like(p.data) for p in params]
        return st


def grad_norm(params: Sequence[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return math.sqrt(total)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``."""
    norm = grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * np.asarray(factor, dtype=p.grad.dtype)
    return norm


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: OptimizerState, lr: float) -> None:
    """One AdamW update in place.

    Weight decay is decoupled from the moment estimates and applied only to
    tensors with two or more dimensions (weights and embedding tables).
    Raises NonFiniteError before touching anything if a gradient is not
    finite.
    """
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter #{i} (shape {params[i].shape}); update rejected")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if state.weight_decay and p.data.ndim >= 2:
            p.data *= 1.0 - lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)


@dataclass
class EMAState:
    decay: float
    shadow: list[np.ndarray]

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise DomainError(f"EMA decay must lie in (0, 1), got {self.decay}")

    @classmethod
    def for_params(cls, params: Sequence[Tensor], decay: float) -> "EMAState":
        return cls(decay, [p.data.copy() for p in params])


def ema_update(state: EMAState, params: Sequence[Tensor], decay: float | None = None) -> EMAState:
    d = state.decay if decay is None else decay
    for s, p in zip(state.shadow, params):
        s *= d
        s += (1.0 - d) * p.data
    return state


def ema_warmup_decay(decay: float, updates: int) -> float:
    """Decay used for the ``updates``-th EMA update when warm-up is on."""
    return min(decay, (1.0 + updates) / (10.0 + updates))


def cosine_lr(step: int, total: int, eta0: float, floor: float = 0.0) -> float:
    if total <= 0 or not 0 <= step <= total:
        raise DomainError(f"cosine_lr needs 0 <= step <= total, got step={step}, total={total}")
    return floor + 0.5 * (eta0 - floor) * (1.0 + math.cos(math.pi * step / total))
