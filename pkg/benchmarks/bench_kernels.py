"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--quick]

Times each hot kernel at the shapes a desk-scale training step produces,
then one full desk-scale train step, on both backends.
"""

from __future__ import annotations

import argparse
import sys
import timeit

import numpy as np

from flowmaps import autograd, sim
from flowmaps.autograd import EMAState, OptimizerState
from flowmaps.autograd import _kernels_py
from flowmaps.train import EpisodeArrays, TrainConfig, TrainState, build_model, train_step


def kernel_cases(rows: int, dim: int, keys: int):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(rows, dim)).astype(np.float32)
    dy = rng.normal(size=(rows, dim)).astype(np.float32)
    s = rng.normal(size=(rows, keys)).astype(np.float32)
    keep = (rng.random((rows, keys)) < 0.6).astype(np.uint8)
    keep[:, 0] = 1

    def cases(k):
        y, r = k.layer_norm_fwd(x, 1e-6)
        p = k.masked_softmax_fwd(s, keep)
        return {
            "layer_norm_fwd": lambda: k.layer_norm_fwd(x, 1e-6),
            "layer_norm_bwd": lambda: k.layer_norm_bwd(dy, y, r),
            "masked_softmax_fwd": lambda: k.masked_softmax_fwd(s, keep),
            "masked_softmax_bwd": lambda: k.masked_softmax_bwd(s, p),
        }

    return cases


def train_step_case(batch_size: int):
    episodes = sim.make_dataset(0, 50)
    arrays = EpisodeArrays.build(episodes, 16)
    cfg = TrainConfig(batch_size=batch_size)
    model = build_model("flowmaps", cfg.model_config(12, 20), np.random.default_rng(0), np.float32)
    params = model.parameters()
    state = TrainState(model, OptimizerState.for_params(params), EMAState.for_params(params, cfg.ema_decay), cfg)
    rng = np.random.default_rng(1)
    batch = arrays.sample_batch(rng, batch_size)
    x0 = rng.standard_normal((batch_size, 4))
    t = cfg.time_sampler().sample(rng, batch_size)
    drop = np.random.default_rng(2)
    return lambda: train_step(state, batch, x0, t, 1e-4, drop)


def best_of(fn, repeat: int, number: int) -> float:
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="tiny sizes, for smoke testing")
    args = ap.parse_args(argv)

    if "cython" not in autograd.available_kernels():
        print("compiled kernels are not built; only the numpy backend is available")
        return 1
    from flowmaps.autograd import _kernels

    rows, number, batch = (64, 3, 4) if args.quick else (64 * 16 * 4, 50, 64)
    cases = kernel_cases(rows, 64, 16)
    numpy_cases, compiled_cases = cases(_kernels_py), cases(_kernels)
    print(f"{'kernel':<22}{'numpy (us)':>12}{'cython (us)':>13}{'speedup':>9}")
    for name in numpy_cases:
        a = best_of(numpy_cases[name], args.repeat, number) * 1e6
        b = best_of(compiled_cases[name], args.repeat, number) * 1e6
        print(f"{name:<22}{a:>12.1f}{b:>13.1f}{a / b:>8.2f}x")

    start = autograd.kernel_backend()
    timings = {}
    try:
        for backend in ("python", "cython"):
            autograd.use_kernels(backend)
            step = train_step_case(batch)
            step()  # warm-up
            timings[backend] = best_of(step, args.repeat, 1 if args.quick else 3)
    finally:
        autograd.use_kernels(start)
    a, b = timings["python"] * 1e3, timings["cython"] * 1e3
    print(f"{'train_step (ms)':<22}{a:>12.2f}{b:>13.2f}{a / b:>8.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
