"""Pure-numpy reference kernels.

Same signatures and semantics as the compiled ``_kernels`` extension.  All
row-wise kernels take C-contiguous 2-d arrays (rows x features).
"""

import numpy as np

_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def layer_norm_fwd(x, eps):
    # Centering on the first entry keeps constant rows exactly zero.
    xs = x - x[:, :1]
    xc = xs - xs.mean(axis=1, keepdims=True)
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[:, 0]


def layer_norm_bwd(dy, y, rstd):
    m1 = dy.mean(axis=1, keepdims=True)
    m2 = (dy * y).mean(axis=1, keepdims=True)
    return (dy - m1 - y * m2) * rstd[:, None]


def masked_softmax_fwd(x, keep):
    keep = keep.astype(bool, copy=False)
    z = np.where(keep, x, -np.inf)
    zmax = z.max(axis=1, keepdims=True)
    dead = ~np.isfinite(zmax)
    zmax = np.where(dead, 0.0, zmax)
    e = np.where(keep, np.exp(z - zmax), 0.0)
    s = e.sum(axis=1, keepdims=True)
    s = np.where(dead, 1.0, s)
    return (e / s).astype(x.dtype, copy=False)


def masked_softmax_bwd(dp, p):
    dot = (dp * p).sum(axis=1, keepdims=True)
    return p * (dp - dot)


def gelu_fwd(x):
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    return (0.5 * x * (1.0 + np.tanh(inner))).astype(x.dtype, copy=False)


def gelu_bwd(dy, x):
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    th = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return (dy * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner)).astype(x.dtype, copy=False)
