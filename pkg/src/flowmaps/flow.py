"""Flow matching: time samplers, the linear path, CFM loss, ODE integration."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autograd import Tensor, mean_square_error
from .errors import ConfigurationError, IntegrationError


@dataclass(frozen=True)
class TimeSampler:
    """Distribution of flow times t on [0, 1].

    kind is "uniform", "beta" (parameters a, b) or "logit_normal"
    (location m, scale s).
    """

    kind: str = "logit_normal"
    a: float = 1.5
    b: float = 1.0
    m: float = 0.0
    s: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "beta", "logit_normal"):
            raise ConfigurationError(f"unknown time sampler {self.kind!r}")
        if self.kind == "beta" and not (self.a > 0 and self.b > 0):
            raise ConfigurationError(f"beta sampler needs a, b > 0, got ({self.a}, {self.b})")
        if self.kind == "logit_normal" and not self.s > 0:
            raise ConfigurationError(f"logit-normal sampler needs s > 0, got {self.s}")

    def sample(self, rng: np.random.Generator, size=None):
        if self.kind == "uniform":
            return rng.random(size)
        if self.kind == "beta":
            return rng.beta(self.a, self.b, size)
        z = rng.normal(self.m, self.s, size)
        return 1.0 / (1.0 + np.exp(-z))


def sample_time(sampler: TimeSampler, rng: np.random.Generator, size=None):
    return sampler.sample(rng, size)


@dataclass(frozen=True)
class PathSample:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    u_target: np.ndarray


def linear_path(x0: np.ndarray, x1: np.ndarray, t) -> tuple[np.ndarray, np.ndarray]:
    """Point on the straight path at time t and its (constant) velocity."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    tt = np.asarray(t, dtype=np.float64)
    if tt.ndim:
        tt = tt.reshape(tt.shape + (1,) * (x1.ndim - tt.ndim))
    return tt * x1 + (1.0 - tt) * x0, x1 - x0


def make_path_sample(x1, rng: np.random.Generator, sampler: TimeSampler | None = None, t=None) -> PathSample:
    """Draw x0 ~ N(0, I) (and t unless given) and place a point on the path."""
    x1 = np.asarray(x1, dtype=np.float64)
    x0 = rng.standard_normal(x1.shape)
    if t is None:
        t = (sampler or TimeSampler()).sample(rng, x1.shape[:-1] or None)
    t = np.asarray(t, dtype=np.float64)
    x_t, u = linear_path(x0, x1, t)
    return PathSample(x0, x1, t, x_t, u)


def cfm_loss(u_pred, u_target):
    """Mean over examples of the squared Euclidean velocity error."""
    if isinstance(u_pred, Tensor):
        return mean_square_error(u_pred, u_target)
    d = np.asarray(u_pred, dtype=np.float64) - np.asarray(u_target, dtype=np.float64)
    d = np.atleast_2d(d)
    return float((d * d).sum(axis=-1).mean())


def integrate(
    field: Callable[[np.ndarray, float], np.ndarray],
    x0,
    steps: int = 10,
    method: str = "midpoint",
    return_mask: bool = False,
):
    """Fixed-step integration of dx/dt = field(x, t) from t=0 to t=1.

    With ``return_mask`` the leading axes of ``x0`` index independent
    trajectories: rows that hit a non-finite velocity are frozen and
    reported in the returned boolean mask instead of raising.
    """
    if steps < 1:
        raise ConfigurationError(f"steps must be >= 1, got {steps}")
    if method not in ("euler", "midpoint"):
        raise ConfigurationError(f"unknown integration method {method!r}")
    x = np.array(x0, dtype=np.float64)
    h = 1.0 / steps
    ok = np.ones(x.shape[:-1] if x.ndim > 1 else (), dtype=bool)

    def evaluate(xv, t):
        v = np.asarray(field(xv, t), dtype=np.float64)
        bad = ~np.isfinite(v)
        if bad.any():
            if not return_mask:
                raise IntegrationError(t)
            v = np.where(bad, 0.0, v)
            row_bad = bad.any(axis=-1) if v.ndim > 1 else bad.any()
            ok[...] &= ~row_bad
        return v

    # x_i = x0 + t_i * mean(k_0..k_{i-1}); the running mean of a constant
    # field is that constant exactly, and t_steps = steps / steps = 1.
    x_start = x.copy()
    vbar = np.zeros_like(x)
    masked = return_mask and x.ndim > 1
    for i in range(steps):
        t = i * h
        k1 = evaluate(x, t)
        k = k1 if method == "euler" else evaluate(x + 0.5 * h * k1, t + 0.5 * h)
        new_vbar = vbar + (k - vbar) / (i + 1)
        new_x = x_start + ((i + 1) / steps) * new_vbar
        if masked:
            keep = ok[..., None]
            vbar, x = np.where(keep, new_vbar, vbar), np.where(keep, new_x, x)
        else:
            vbar, x = new_vbar, new_x
    if return_mask:
        return x, ok
    return x
