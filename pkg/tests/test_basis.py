import math

import numpy as np
import numpy.testing as npt
import pytest
from scipy.integrate import simpson
from scipy.interpolate import BSpline

from flmm.basis import (BasisSystem, RoughnessOperator, coefficients_for_line, d2, eval_basis,
                        harmonic, make_bspline_basis, make_fourier_basis, null_space_dim,
                        penalty_matrix)


@pytest.mark.parametrize("domain,order,n_int,size", [
    ((0.0, 23.0), 4, 26, 30),
    ((0.0, 1.0), 4, 0, 4),
    ((0.0, 1.0), 4, 31, 35),
])
def test_bspline_sizes(domain, order, n_int, size):
    b = make_bspline_basis(domain, order, n_int)
    assert b.size == size
    assert len(b.knots) == size + order
    npt.assert_allclose(np.diff(b.interior_knots), (domain[1] - domain[0]) / (n_int + 1))


def test_bspline_rejects_bad_input():
    with pytest.raises(ValueError):
        make_bspline_basis((1.0, 1.0), 4, 3)
    with pytest.raises(ValueError):
        make_bspline_basis((0.0, 1.0), 1, 3)
    with pytest.raises(ValueError):
        BasisSystem("bspline", (0.0, 1.0), order=4, interior_knots=(0.5, 1.5))


def test_fourier_layout():
    b = make_fourier_basis((0.0, 365.0), 35, 365.0)
    assert b.size == 35 and b.omega == pytest.approx(2 * math.pi / 365)
    assert make_fourier_basis((0.0, 1.0), 1, 1.0).size == 1
    with pytest.raises(ValueError):
        make_fourier_basis((0.0, 1.0), 4, 1.0)
    row = eval_basis(make_fourier_basis((0.0, 1.0), 5, 1.0), np.array([0.0]))[0]
    # 1/sqrt(P), sin(0), sqrt(2/P) cos(0), sin(0), sqrt(2/P) cos(0)
    npt.assert_allclose(row, [1.0, 0.0, math.sqrt(2), 0.0, math.sqrt(2)], atol=1e-15)


def test_fourier_orthonormal_over_period():
    b = make_fourier_basis((0.0, 2.0), 7, 2.0)
    t = np.linspace(0, 2, 4001)
    P = eval_basis(b, t)
    npt.assert_allclose(simpson(P[:, :, None] * P[:, None, :], x=t, axis=0), np.eye(7), atol=1e-9)


def test_partition_of_unity():
    b = make_bspline_basis((0.0, 1.0), 4, 31)
    t = np.linspace(0, 1, 1001)
    npt.assert_allclose(eval_basis(b, t).sum(axis=1), 1.0, atol=1e-12)


def test_bspline_matches_scipy():
    b = make_bspline_basis((0.0, 3.0), 4, 7)
    t = np.linspace(0, 3, 313)
    c = np.random.default_rng(0).normal(size=b.size)
    for d in range(4):
        ref = BSpline(b.knots, c, 3).derivative(d)(t) if d else BSpline(b.knots, c, 3)(t)
        npt.assert_allclose(eval_basis(b, t, d) @ c, ref, atol=1e-9 * 10 ** d)


def test_bspline_derivatives_vs_finite_differences():
    b = make_bspline_basis((0.0, 1.0), 4, 5)
    # stay clear of knots (multiples of 1/6) so every row is smooth
    t = np.array([0.05, 0.23, 0.41, 0.58, 0.77, 0.95])
    h = 1e-5
    for d in (1, 2, 3):
        fd = (eval_basis(b, t + h, d - 1) - eval_basis(b, t - h, d - 1)) / (2 * h)
        exact = eval_basis(b, t, d)
        assert np.max(np.abs(fd - exact)) <= 1e-6 * max(1.0, np.max(np.abs(exact)))


def test_fourier_second_derivative():
    b = make_fourier_basis((0.0, 1.0), 5, 1.0)
    t = np.linspace(0, 1, 50)
    w = 2 * math.pi
    npt.assert_allclose(eval_basis(b, t, 2)[:, 1], -w ** 2 * eval_basis(b, t)[:, 1], atol=1e-10)


def test_eval_outside_domain():
    b = make_bspline_basis((0.0, 1.0), 4, 2)
    with pytest.raises(ValueError):
        eval_basis(b, np.array([1.1]))


def test_penalty_symmetric_psd_and_null_space():
    b = make_bspline_basis((0.0, 1.0), 4, 31)
    G = penalty_matrix(b, d2())
    assert np.array_equal(G, G.T)
    ev = np.linalg.eigvalsh(G)
    assert ev.min() >= -1e-10 * np.abs(G).max()
    assert null_space_dim(G) == 2
    c = coefficients_for_line(b, 1.0, 2.0)
    t = np.linspace(0, 1, 11)
    npt.assert_allclose(eval_basis(b, t) @ c, 1 + 2 * t, atol=1e-12)
    assert abs(c @ G @ c) <= 1e-9 * np.abs(G).max()


def test_penalty_vs_dense_simpson():
    # knot spacing 0.1 puts every knot on a Simpson panel boundary
    b = make_bspline_basis((0.0, 1.0), 4, 9)
    G = penalty_matrix(b, d2())
    t = np.linspace(0, 1, 2001)
    B2 = eval_basis(b, t, 2)
    ref = simpson(B2[:, :, None] * B2[:, None, :], x=t, axis=0)
    big = np.abs(ref) > 1e-3 * np.abs(ref).max()
    npt.assert_allclose(G[big], ref[big], rtol=1e-8)


def test_harmonic_penalty_null_space():
    b = make_fourier_basis((0.0, 365.0), 35, 365.0)
    G = penalty_matrix(b, harmonic(2 * math.pi / 365))
    assert null_space_dim(G) == 3
    c = np.zeros(35)
    c[:3] = [1.0, -0.4, 2.5]
    assert abs(c @ G @ c) <= 1e-10 * np.abs(G).max()
    assert np.array_equal(G, G.T)


def test_penalty_needs_smooth_enough_basis():
    with pytest.raises(ValueError):
        penalty_matrix(make_bspline_basis((0.0, 1.0), 2, 3), d2())
    with pytest.raises(ValueError):
        RoughnessOperator("harmonic", omega=0.0)


def test_descriptor_round_trip():
    for b in (make_bspline_basis((0.0, 23.0), 4, 26), make_fourier_basis((0.0, 365.0), 35, 365.0)):
        again = BasisSystem.from_dict(b.to_dict())
        assert again == b
        assert np.array_equal(again.knots, b.knots)
    for op in (d2(), harmonic(0.25)):
        assert RoughnessOperator.from_dict(op.to_dict()) == op
