"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Same signatures and semantics; used when the extension is not built or when
``FLMM_PURE_PYTHON`` is set.
"""

import numpy as np


def bspline_design(knots, order, x, deriv):
    knots = np.asarray(knots, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    degree = order - 1
    n_basis = len(knots) - order
    out = np.zeros((len(x), n_basis))
    if deriv > degree:
        return out
    # order-1 indicators on half-open spans, right endpoint folded into the last span
    n_span = len(knots) - 1
    B = np.zeros((len(x), n_span))
    for i in range(n_span):
        if knots[i + 1] > knots[i]:
            B[:, i] = (x >= knots[i]) & (x < knots[i + 1])
    last = np.nonzero(knots[1:] > knots[:-1])[0][-1]
    B[x >= knots[last + 1], last] = 1.0
    B[x <= knots[degree], :] = 0.0
    B[x <= knots[degree], degree] = 1.0

    def _raise(B, k):
        # order k-1 -> order k (Cox-de Boor)
        n = B.shape[1] - 1
        new = np.zeros((len(x), n))
        for i in range(n):
            d1 = knots[i + k - 1] - knots[i]
            d2 = knots[i + k] - knots[i + 1]
            if d1 > 0:
                new[:, i] += (x - knots[i]) / d1 * B[:, i]
            if d2 > 0:
                new[:, i] += (knots[i + k] - x) / d2 * B[:, i + 1]
        return new

    def _diff(B, k):
        # derivative coefficients: order k-1 functions -> order k derivative
        n = B.shape[1] - 1
        new = np.zeros((len(x), n))
        for i in range(n):
            d1 = knots[i + k - 1] - knots[i]
            d2 = knots[i + k] - knots[i + 1]
            if d1 > 0:
                new[:, i] += (k - 1) / d1 * B[:, i]
            if d2 > 0:
                new[:, i] -= (k - 1) / d2 * B[:, i + 1]
        return new

    for k in range(2, order - deriv + 1):
        B = _raise(B, k)
    for k in range(order - deriv + 1, order + 1):
        B = _diff(B, k)
    return np.ascontiguousarray(B[:, :n_basis])


def _epan(u):
    return np.where(np.abs(u) < 1.0, 0.75 * (1.0 - u * u), 0.0)


def local_linear_1d(x, y, w, grid, h):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    dx = x[None, :] - grid[:, None]
    kw = _epan(dx / h) * w[None, :]
    s0 = kw.sum(axis=1)
    s1 = (kw * dx).sum(axis=1)
    s2 = (kw * dx * dx).sum(axis=1)
    t0 = kw @ y
    t1 = (kw * dx) @ y
    det = s0 * s2 - s1 * s1
    bad = (s0 <= 0.0) | (det <= 1e-14 * s0 * s2)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = (s2 * t0 - s1 * t1) / det
    out[bad] = np.nan
    return out


def local_linear_2d(xs, xt, z, w, grid, h):
    xs = np.asarray(xs, dtype=np.float64)
    xt = np.asarray(xt, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    g = len(grid)
    out = np.empty((g, g))
    dt_all = xt[None, :] - grid[:, None]
    kt_all = _epan(dt_all / h)
    for a in range(g):
        ds = xs - grid[a]
        ks = _epan(ds / h) * w
        sel = ks > 0
        ds, ks, zz = ds[sel], ks[sel], z[sel]
        dt = dt_all[a:, sel]
        kw = ks[None, :] * kt_all[a:, sel]
        m00 = kw.sum(axis=1)
        m01 = kw @ ds
        m02 = (kw * dt).sum(axis=1)
        m11 = kw @ (ds * ds)
        m12 = (kw * dt) @ ds
        m22 = (kw * dt * dt).sum(axis=1)
        v0 = kw @ zz
        v1 = kw @ (ds * zz)
        v2 = (kw * dt) @ zz
        c00 = m11 * m22 - m12 * m12
        c01 = -(m01 * m22 - m12 * m02)
        c02 = m01 * m12 - m11 * m02
        det = m00 * c00 + m01 * c01 + m02 * c02
        bad = (m00 <= 0.0) | (np.abs(det) <= 1e-14 * m00 * m11 * m22)
        with np.errstate(invalid="ignore", divide="ignore"):
            row = (c00 * v0 + c01 * v1 + c02 * v2) / det
        row[bad] = np.nan
        out[a, a:] = row
        out[a:, a] = row
    return out
