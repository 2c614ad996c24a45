# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: B-spline evaluation and local-linear kernel smoothing.

Every function here has a numpy twin in ``flmm._fallback`` with the same
signature; ``flmm.kernels`` picks one at import time.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


cdef Py_ssize_t _find_span(const double[::1] knots, Py_ssize_t n_basis,
                           Py_ssize_t degree, double x) nogil:
    cdef Py_ssize_t lo, hi, mid
    if x >= knots[n_basis]:
        return n_basis - 1
    if x <= knots[degree]:
        return degree
    lo = degree
    hi = n_basis
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if x < knots[mid]:
            hi = mid
        else:
            lo = mid
    return lo


def bspline_design(const double[::1] knots, int order, const double[::1] x, int deriv):
    """Dense (len(x), n_basis) matrix of B-spline values or derivatives.

    Cox-de Boor triangle with the derivative recursion of Piegl & Tiller
    (A2.3). ``knots`` is the full clamped knot vector.
    """
    cdef Py_ssize_t degree = order - 1
    cdef Py_ssize_t n_basis = knots.shape[0] - order
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t i, j, r, k, s1, s2, j1, j2, rk, pk, span
    cdef double saved, temp, d, xv
    out = np.zeros((n, n_basis), dtype=np.float64)
    cdef double[:, ::1] res = out
    if deriv > degree:
        return out
    ndu_a = np.empty((order, order), dtype=np.float64)
    a_a = np.empty((2, order), dtype=np.float64)
    left_a = np.empty(order, dtype=np.float64)
    right_a = np.empty(order, dtype=np.float64)
    ders_a = np.empty((deriv + 1, order), dtype=np.float64)
    cdef double[:, ::1] ndu = ndu_a
    cdef double[:, ::1] a = a_a
    cdef double[::1] left = left_a
    cdef double[::1] right = right_a
    cdef double[:, ::1] ders = ders_a

    with nogil:
        for i in range(n):
            xv = x[i]
            span = _find_span(knots, n_basis, degree, xv)
            ndu[0, 0] = 1.0
            for j in range(1, degree + 1):
                left[j] = xv - knots[span + 1 - j]
                right[j] = knots[span + j] - xv
                saved = 0.0
                for r in range(j):
                    ndu[j, r] = right[r + 1] + left[j - r]
                    temp = ndu[r, j - 1] / ndu[j, r]
                    ndu[r, j] = saved + right[r + 1] * temp
                    saved = left[j - r] * temp
                ndu[j, j] = saved
            for j in range(degree + 1):
                ders[0, j] = ndu[j, degree]
            for r in range(degree + 1):
                s1 = 0
                s2 = 1
                a[0, 0] = 1.0
                for k in range(1, deriv + 1):
                    d = 0.0
                    rk = r - k
                    pk = degree - k
                    if r >= k:
                        a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                        d = a[s2, 0] * ndu[rk, pk]
                    if rk >= -1:
                        j1 = 1
                    else:
                        j1 = -rk
                    if r - 1 <= pk:
                        j2 = k - 1
                    else:
                        j2 = degree - r
                    for j in range(j1, j2 + 1):
                        a[s2, j] = (a[s1, j] - a[s1, j - 1]) / ndu[pk + 1, rk + j]
                        d += a[s2, j] * ndu[rk + j, pk]
                    if r <= pk:
                        a[s2, k] = -a[s1, k - 1] / ndu[pk + 1, r]
                        d += a[s2, k] * ndu[r, pk]
                    ders[k, r] = d
                    j = s1
                    s1 = s2
                    s2 = j
            r = degree
            for k in range(1, deriv + 1):
                for j in range(degree + 1):
                    ders[k, j] *= r
                r *= degree - k
            for j in range(degree + 1):
                res[i, span - degree + j] = ders[deriv, j]
    return out


cdef inline double _nan() nogil:
    cdef double z = 0.0
    return z / z


cdef inline double _epan(double u) nogil:
    if fabs(u) >= 1.0:
        return 0.0
    return 0.75 * (1.0 - u * u)


def local_linear_1d(const double[::1] x, const double[::1] y, const double[::1] w,
                    const double[::1] grid, double h):
    """Local-linear Epanechnikov smooth of weighted points onto ``grid``.

    Returns NaN where fewer than two distinct points fall in the window.
    """
    cdef Py_ssize_t n = x.shape[0], g = grid.shape[0]
    cdef Py_ssize_t i, k
    cdef double s0, s1, s2, t0, t1, kw, dx, det
    out = np.empty(g, dtype=np.float64)
    cdef double[::1] res = out
    with nogil:
        for k in range(g):
            s0 = s1 = s2 = t0 = t1 = 0.0
            for i in range(n):
                dx = x[i] - grid[k]
                kw = _epan(dx / h) * w[i]
                if kw == 0.0:
                    continue
                s0 += kw
                s1 += kw * dx
                s2 += kw * dx * dx
                t0 += kw * y[i]
                t1 += kw * dx * y[i]
            det = s0 * s2 - s1 * s1
            if s0 <= 0.0 or det <= 1e-14 * s0 * s2:
                res[k] = _nan()
            else:
                res[k] = (s2 * t0 - s1 * t1) / det
    return out


def local_linear_2d(const double[::1] xs, const double[::1] xt, const double[::1] z,
                    const double[::1] w, const double[::1] grid, double h):
    """Symmetric local-linear surface smooth onto ``grid`` x ``grid``.

    Inputs are scattered (s, t, value, weight) points; only the upper
    triangle is fitted and then mirrored, so the output is exactly symmetric.
    """
    cdef Py_ssize_t n = xs.shape[0], g = grid.shape[0]
    cdef Py_ssize_t i, j, k, a, b, p, q
    cdef double ds, dt, kw, ks
    cdef double m[3][3]
    cdef double v[3]
    cdef double det, c00, c01, c02
    out = np.empty((g, g), dtype=np.float64)
    cdef double[:, ::1] res = out
    # points inside the s-window of the current row, with their s-weights
    idx_arr = np.empty(n, dtype=np.intp)
    ksw_arr = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t[::1] idx = idx_arr
    cdef double[::1] ksw = ksw_arr
    with nogil:
        for a in range(g):
            k = 0
            for i in range(n):
                ks = _epan((xs[i] - grid[a]) / h) * w[i]
                if ks != 0.0:
                    idx[k] = i
                    ksw[k] = ks
                    k += 1
            for b in range(a, g):
                for p in range(3):
                    v[p] = 0.0
                    for q in range(3):
                        m[p][q] = 0.0
                for j in range(k):
                    i = idx[j]
                    dt = xt[i] - grid[b]
                    kw = ksw[j] * _epan(dt / h)
                    if kw == 0.0:
                        continue
                    ds = xs[i] - grid[a]
                    m[0][0] += kw
                    m[0][1] += kw * ds
                    m[0][2] += kw * dt
                    m[1][1] += kw * ds * ds
                    m[1][2] += kw * ds * dt
                    m[2][2] += kw * dt * dt
                    v[0] += kw * z[i]
                    v[1] += kw * ds * z[i]
                    v[2] += kw * dt * z[i]
                m[1][0] = m[0][1]
                m[2][0] = m[0][2]
                m[2][1] = m[1][2]
                # first row of the inverse via cofactors
                c00 = m[1][1] * m[2][2] - m[1][2] * m[2][1]
                c01 = -(m[1][0] * m[2][2] - m[1][2] * m[2][0])
                c02 = m[1][0] * m[2][1] - m[1][1] * m[2][0]
                det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02
                if m[0][0] <= 0.0 or fabs(det) <= 1e-14 * m[0][0] * m[1][1] * m[2][2]:
                    res[a, b] = _nan()
                else:
                    res[a, b] = (c00 * v[0] + c01 * v[1] + c02 * v[2]) / det
                res[b, a] = res[a, b]
    return out
