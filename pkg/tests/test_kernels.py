import os
import subprocess
import sys

import numpy as np
import pytest

from flmm import _fallback, kernels

compiled = pytest.importorskip("flmm._kernels")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.mark.parametrize("order, deriv", [(2, 0), (4, 0), (4, 2), (5, 3)])
def test_bspline_parity(order, deriv):
    knots = np.r_[[0.0] * order, np.linspace(0, 1, 9)[1:-1], [1.0] * order]
    x = np.linspace(0, 1, 257)
    a = compiled.bspline_design(knots, order, x, deriv)
    b = _fallback.bspline_design(knots, order, x, deriv)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-10)


def test_local_linear_1d_parity(rng):
    x = np.sort(rng.uniform(0, 1, 500))
    y = np.sin(3 * x) + rng.normal(0, 0.1, x.size)
    w = rng.uniform(0.5, 1.5, x.size)
    grid = np.linspace(0, 1, 101)
    np.testing.assert_allclose(compiled.local_linear_1d(x, y, w, grid, 0.07),
                               _fallback.local_linear_1d(x, y, w, grid, 0.07), rtol=1e-11, atol=1e-12)


def test_local_linear_2d_parity(rng):
    grid = np.linspace(0, 1, 31)
    s, t = np.meshgrid(grid, grid, indexing="ij")
    keep = s != t
    xs, xt = s[keep].copy(), t[keep].copy()
    z = np.cos(xs - xt) + rng.normal(0, 0.05, xs.size)
    w = rng.integers(1, 5, xs.size).astype(float)
    np.testing.assert_allclose(compiled.local_linear_2d(xs, xt, z, w, grid, 0.12),
                               _fallback.local_linear_2d(xs, xt, z, w, grid, 0.12), rtol=1e-11, atol=1e-12)


def test_local_linear_reproduces_lines(rng):
    x = rng.uniform(0, 1, 200)
    grid = np.linspace(0.1, 0.9, 9)
    for impl in (compiled, _fallback):
        np.testing.assert_allclose(impl.local_linear_1d(x, 2 - 3 * x, np.ones_like(x), grid, 0.1),
                                   2 - 3 * grid, atol=1e-12)


def test_empty_window_is_nan():
    x = np.array([0.0, 0.1])
    out = kernels.local_linear_1d(x, x, np.ones(2), np.array([0.05, 0.9]), 0.08)
    assert np.isfinite(out[0]) and np.isnan(out[1])


def test_backend_selection():
    assert kernels.BACKEND == "compiled"
    code = "import flmm.kernels as k; print(k.BACKEND, k.local_linear_1d.__module__)"
    env = dict(os.environ, FLMM_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["python", "flmm._fallback"]
