"""Compiled and pure-numpy kernels must agree."""

import importlib

import numpy as np
import pytest

from flowmaps import autograd
from flowmaps.autograd import _kernels_py

try:
    compiled = importlib.import_module("flowmaps.autograd._kernels")
except ImportError:  # pragma: no cover - extension not built
    compiled = None

needs_ext = pytest.mark.skipif(compiled is None, reason="compiled kernels not built")
TOL = {np.float64: 1e-13, np.float32: 2e-6}


def _inputs(dtype, rows=37, cols=16, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 2, (rows, cols)).astype(dtype)
    keep = (rng.random((rows, cols)) < 0.7).astype(np.uint8)
    keep[0] = 0  # one fully masked row
    return x, keep, rng.normal(size=(rows, cols)).astype(dtype)


@needs_ext
@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_layer_norm_parity(dtype):
    x, _, dy = _inputs(dtype)
    y_c, r_c = compiled.layer_norm_fwd(x, 1e-6)
    y_p, r_p = _kernels_py.layer_norm_fwd(x, 1e-6)
    assert y_c.dtype == y_p.dtype == dtype
    np.testing.assert_allclose(y_c, y_p, atol=TOL[dtype], rtol=TOL[dtype])
    np.testing.assert_allclose(r_c, r_p, rtol=TOL[dtype])
    np.testing.assert_allclose(
        compiled.layer_norm_bwd(dy, y_c, r_c), _kernels_py.layer_norm_bwd(dy, y_p, r_p), atol=10 * TOL[dtype]
    )


@needs_ext
@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_masked_softmax_parity(dtype):
    x, keep, dp = _inputs(dtype)
    p_c = compiled.masked_softmax_fwd(x, keep)
    p_p = _kernels_py.masked_softmax_fwd(x, keep)
    assert p_c.dtype == p_p.dtype == dtype
    np.testing.assert_allclose(p_c, p_p, atol=TOL[dtype])
    assert np.all(p_c[keep == 0] == 0.0)
    np.testing.assert_allclose(
        compiled.masked_softmax_bwd(dp, p_c), _kernels_py.masked_softmax_bwd(dp, p_p), atol=10 * TOL[dtype]
    )


@needs_ext
def test_constant_rows_normalize_to_exact_zero_in_both_backends():
    x = np.full((3, 9), 455.79099837448075)
    assert np.all(compiled.layer_norm_fwd(x, 1e-6)[0] == 0.0)
    assert np.all(_kernels_py.layer_norm_fwd(x, 1e-6)[0] == 0.0)


def test_backend_switch_round_trips():
    start = autograd.kernel_backend()
    prev = autograd.use_kernels("python")
    assert prev == start and autograd.kernel_backend() == "python"
    autograd.use_kernels(start)
    assert autograd.kernel_backend() == start
    assert "python" in autograd.available_kernels()


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        autograd.use_kernels("fortran")


@needs_ext
def test_model_forward_agrees_across_backends(small_config, scene_batch):
    from flowmaps.cdit import FlowMapsModel

    from conftest import randomize

    model = FlowMapsModel(small_config, np.random.default_rng(0))
    randomize(model, np.random.default_rng(1))
    x0 = np.random.default_rng(2).normal(size=(4, 4))
    t = np.array([0.1, 0.4, 0.6, 0.9])
    start = autograd.kernel_backend()
    try:
        out = {}
        for name in ("python", "cython"):
            autograd.use_kernels(name)
            out[name] = model.loss(scene_batch, x0, t).item()
    finally:
        autograd.use_kernels(start)
    assert abs(out["python"] - out["cython"]) < 1e-10 * max(1.0, abs(out["python"]))
