import math

import numpy as np
import numpy.testing as npt
import pytest

from flmm.basis import make_bspline_basis, make_fourier_basis
from flmm.design import (Dataset, FunctionalSample, QuadratureRule, Subject, Visit, build_design,
                         inner_product, trapezoid_weights)
from flmm.sim import Scenario, generate

from conftest import tiny_dataset


def _sample(x, t):
    return FunctionalSample("s", "v", t, x)


def test_zero_and_constant_curves():
    b = make_bspline_basis((0.0, 1.0), 4, 6)
    t = np.linspace(0, 1, 201)
    assert np.all(inner_product(b, _sample(np.zeros_like(t), t)) == 0)
    ones = inner_product(b, _sample(np.ones_like(t), t))
    assert ones.sum() == pytest.approx(1.0, abs=1e-12)


def test_fourier_sine_inner_products():
    b = make_fourier_basis((0.0, 1.0), 7, 1.0)
    t = np.linspace(0, 1, 500)
    v = inner_product(b, _sample(np.sin(2 * math.pi * t), t))
    expect = np.zeros(7)
    expect[1] = math.sqrt(2) / 2          # int sqrt2 sin^2
    npt.assert_allclose(v, expect, atol=1e-4)


def test_linearity():
    b = make_bspline_basis((0.0, 1.0), 4, 5)
    t = np.linspace(0, 1, 57)
    rng = np.random.default_rng(1)
    x1, x2 = rng.normal(size=t.size), rng.normal(size=t.size)
    lhs = inner_product(b, _sample(2.5 * x1 + x2, t))
    rhs = 2.5 * inner_product(b, _sample(x1, t)) + inner_product(b, _sample(x2, t))
    npt.assert_allclose(lhs, rhs, atol=1e-12)


def test_trapezoid_second_order():
    b = make_fourier_basis((0.0, 1.0), 3, 1.0)
    exact = None
    errs = []
    for n in (41, 81, 161):
        t = np.linspace(0, 1, n)
        v = inner_product(b, _sample(np.exp(t), t))[0]
        errs.append(v - (math.e - 1))
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.02)
    assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.02)


def test_gauss_rule_on_smooth_curve():
    b = make_bspline_basis((0.0, 1.0), 4, 3)
    t = np.linspace(0, 1, 31)
    x = np.cos(t)
    dense = np.linspace(0, 1, 20001)
    ref = inner_product(b, _sample(np.cos(dense), dense))
    g = inner_product(b, _sample(x, t), QuadratureRule("gauss", 40))
    npt.assert_allclose(g, ref, atol=5e-6)
    with pytest.raises(ValueError):
        QuadratureRule("gauss", 1)


def test_sample_outside_domain():
    b = make_bspline_basis((0.0, 1.0), 4, 3)
    t = np.linspace(0, 1.5, 10)
    with pytest.raises(ValueError):
        inner_product(b, _sample(t, t))


def test_sample_validation():
    with pytest.raises(ValueError):
        FunctionalSample("s", "v", np.array([0.0, 0.5, 0.5]), np.zeros(3))
    with pytest.raises(ValueError):
        FunctionalSample("s", "v", np.array([0.0, 1.0]), np.array([0.0, np.nan]))


def test_single_visit_shape():
    b = make_bspline_basis((0.0, 1.0), 4, 2)
    db = build_design(tiny_dataset(1, 1), b, b)
    assert db.W[0].shape == (1, 7) and db.W[0][0, 0] == 1.0


def test_case_one_shapes():
    data, _ = generate(Scenario(n=50, m=5, seed=3))
    b = make_bspline_basis((0.0, 1.0), 4, 31)
    db = build_design(data, b, b)
    assert db.stacked_W().shape == (250, 36)
    assert all(Z.shape == (5, 36) for Z in db.Z)
    assert db.blockdiag_Z().shape == (250, 50 * 36)
    assert np.all(db.stacked_W()[:, 0] == 1) and all(np.all(Z[:, 0] == 1) for Z in db.Z)
    assert db.N == 250 and db.n == 50


def test_duplicate_visit_gives_identical_rows():
    d = tiny_dataset(1, 2)
    s = d.subjects[0]
    dup = Dataset((Subject(s.subject_id, (s.visits[0], s.visits[0], s.visits[1])),), d.domain)
    b = make_bspline_basis((0.0, 1.0), 4, 2)
    db = build_design(dup, b, b)
    assert np.array_equal(db.W[0][0], db.W[0][1])
    assert np.array_equal(db.Z[0][0], db.Z[0][1])


def test_declared_visit_counts_checked():
    b = make_bspline_basis((0.0, 1.0), 4, 2)
    with pytest.raises(ValueError):
        build_design(tiny_dataset(2, 3), b, b, m=[3, 2])


def test_mixed_grids_and_dump(tmp_path):
    t1, t2 = np.linspace(0, 1, 11), np.linspace(0, 1, 23)
    s = Subject("a", (Visit(1.0, FunctionalSample("a", "1", t1, t1)),
                      Visit(2.0, FunctionalSample("a", "2", t2, t2))))
    b = make_bspline_basis((0.0, 1.0), 4, 2)
    db = build_design(Dataset((s,), (0.0, 1.0)), b, b)
    dense = np.linspace(0, 1, 20001)
    ref = inner_product(b, _sample(dense, dense))
    # each visit uses its own grid; the finer grid is closer to the dense value
    e1 = np.abs(db.W[0][0, 1:] - ref).max()
    e2 = np.abs(db.W[0][1, 1:] - ref).max()
    assert e2 < e1 < 2e-2
    db.dump(tmp_path / "blocks.npz")
    z = np.load(tmp_path / "blocks.npz")
    assert np.array_equal(z["W_0"], db.W[0])


def test_trapezoid_weights_sum():
    t = np.sort(np.random.default_rng(0).uniform(0, 2, 30))
    assert trapezoid_weights(t).sum() == pytest.approx(t[-1] - t[0])
