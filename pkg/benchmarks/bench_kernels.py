"""Compare the compiled kernels with the pure-Python fallback.

Run ``python benchmarks/bench_kernels.py``; prints one line per kernel with
the median wall time of each backend, the speed-up and the max abs difference.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from flmm import _fallback

try:
    from flmm import _kernels
except ImportError:          # extension not built
    _kernels = None


def _time(fn, repeat):
    out, ts = None, []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        ts.append(time.perf_counter() - t0)
    return statistics.median(ts), out


def cases(rng):
    knots = np.concatenate([[0.0] * 4, np.linspace(0, 1, 33)[1:-1], [1.0] * 4])
    x = np.sort(rng.uniform(0, 1, 2001))
    yield "bspline_design", lambda mod: mod.bspline_design(knots, 4, x, 2)
    t = rng.uniform(0, 1, 5000)
    y = np.sin(2 * np.pi * t) + rng.normal(0, 0.1, t.size)
    w = np.ones_like(t)
    grid = np.linspace(0, 1, 101)
    yield "local_linear_1d", lambda mod: mod.local_linear_1d(t, y, w, grid, 0.05)
    s2, t2 = rng.uniform(0, 1, 20000), rng.uniform(0, 1, 20000)
    z = np.cos(np.pi * (s2 - t2)) + rng.normal(0, 0.1, s2.size)
    w2 = np.ones_like(z)
    g2 = np.linspace(0, 1, 51)
    yield "local_linear_2d", lambda mod: mod.local_linear_2d(s2, t2, z, w2, g2, 0.08)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled extension not available; nothing to compare")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'compiled [s]':>14}{'python [s]':>14}{'speed-up':>10}{'max |diff|':>13}")
    for name, fn in cases(rng):
        tc, oc = _time(lambda: fn(_kernels), args.repeat)
        tp, op = _time(lambda: fn(_fallback), args.repeat)
        diff = float(np.nanmax(np.abs(np.asarray(oc) - np.asarray(op))))
        print(f"{name:<18}{tc:>14.5f}{tp:>14.5f}{tp / tc:>10.1f}{diff:>13.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
