"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6, resolution=0.0) -> float:
    """Max over entries of max(|a - n| - r, 0) / max(|a|, |n|, floor).

    ``resolution`` (r, scalar or per entry) is the round-off bound of the
    finite-difference estimate; discrepancies below it are not attributable
    to the analytic gradient.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if not a.size:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    excess = np.maximum(np.abs(a - n) - np.asarray(resolution, dtype=np.float64), 0.0)
    return float(np.max(excess / denom))


def numerical_grad(
    loss_fn: Callable[[], float],
    tensor: Tensor,
    step: float = 1e-5,
    indices: Sequence[tuple[int, ...]] | None = None,
    with_resolution: bool = False,
):
    """Central differences of ``loss_fn`` w.r.t. selected entries of ``tensor``.

    With ``with_resolution`` also returns, per entry, the round-off bound
    64 * eps * max(|f+|, |f-|, 1) / step of the difference quotient.
    """
    if indices is None:
        indices = list(np.ndindex(*tensor.shape))
    out = np.empty(len(indices))
    res = np.empty(len(indices))
    eps = np.finfo(tensor.dtype).eps
    for k, idx in enumerate(indices):
        orig = tensor.data[idx]
        tensor.data[idx] = orig + step
        fp = loss_fn()
        tensor.data[idx] = orig - step
        fm = loss_fn()
        tensor.data[idx] = orig
        out[k] = (fp - fm) / (2.0 * step)
        res[k] = 64.0 * eps * max(abs(fp), abs(fm), 1.0) / step
    if with_resolution:
        return out, list(indices), res
    return out, list(indices)


def check_gradients(
    build_loss: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    step: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between backprop and finite differences.

    ``build_loss`` must rebuild the graph from the current tensor values.
    With ``max_entries`` only that many randomly chosen entries per tensor
    are perturbed.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    build_loss().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    def value() -> float:
        return float(build_loss().data)

    worst = 0.0
    for t, ga in zip(tensors, analytic):
        all_idx = list(np.ndindex(*t.shape))
        if max_entries is not None and len(all_idx) > max_entries:
            pick = rng.choice(len(all_idx), size=max_entries, replace=False)
            all_idx = [all_idx[i] for i in sorted(pick)]
        num, idx, res = numerical_grad(value, t, step, all_idx, with_resolution=True)
        worst = max(worst, relative_error(np.array([ga[i] for i in idx]), num, resolution=res))
    return worst
