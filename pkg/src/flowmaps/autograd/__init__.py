"""Minimal numpy autodiff engine plus optimizer and schedule math."""

from . import _backend
from .optim import (
    EMAState,
    OptimizerState,
    adamw_step,
    clip_grad_norm,
    cosine_lr,
    ema_update,
    ema_warmup_decay,
    grad_norm,
)
from .tensor import (
    Tensor,
    add,
    concat,
    dropout,
    embedding,
    gelu,
    getitem,
    layer_norm,
    matmul,
    mean_square_error,
    mul,
    no_grad,
    permute_rows,
    reshape,
    scale,
    silu,
    softmax,
    sub,
    transpose,
)


def kernel_backend() -> str:
    """Name of the active kernel implementation ("cython" or "python")."""
    return _backend.name


def use_kernels(name: str) -> str:
    return _backend.use(name)


def available_kernels() -> list[str]:
    return _backend.available()


__all__ = [
    "EMAState",
    "OptimizerState",
    "Tensor",
    "adamw_step",
    "add",
    "available_kernels",
    "clip_grad_norm",
    "concat",
    "cosine_lr",
    "dropout",
    "ema_update",
    "ema_warmup_decay",
    "embedding",
    "gelu",
    "getitem",
    "grad_norm",
    "kernel_backend",
    "layer_norm",
    "matmul",
    "mean_square_error",
    "mul",
    "no_grad",
    "permute_rows",
    "reshape",
    "scale",
    "silu",
    "softmax",
    "sub",
    "transpose",
    "use_kernels",
]
