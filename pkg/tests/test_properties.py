"""Property-based checks of invariants that hold for any valid input."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from flmm.basis import d2, eval_basis, make_bspline_basis, penalty_matrix
from flmm.fpca import FpcaModel, choose_num_fpcs
from flmm.inference import intercept_ci
from flmm.sim import population_beta, rmise_population

GRID = np.linspace(0.0, 1.0, 401)
finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(order=st.integers(2, 6), n_interior=st.integers(0, 12),
       lo=st.floats(-5, 5), width=st.floats(0.1, 50),
       u=st.lists(st.floats(0, 1), min_size=1, max_size=20))
def test_bspline_partition_of_unity(order, n_interior, lo, width, u):
    b = make_bspline_basis((lo, lo + width), order, n_interior)
    B = eval_basis(b, lo + width * np.asarray(u))
    assert np.all(B >= -1e-12)
    np.testing.assert_allclose(B.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(order=st.integers(4, 6), n_interior=st.integers(0, 10))
def test_penalty_psd_with_linear_null_space(order, n_interior):
    b = make_bspline_basis((0.0, 1.0), order, n_interior)
    G = penalty_matrix(b, d2())
    ev = np.linalg.eigvalsh(G)
    assert ev.min() >= -1e-9 * ev.max()
    assert np.sum(ev <= 1e-9 * ev.max()) == 2


@given(alpha=finite, se=st.floats(0, 100), level=st.floats(0.5, 0.999))
def test_interval_symmetric_and_nested(alpha, se, level):
    lo, hi = intercept_ci(alpha, se, level)
    assert lo <= alpha <= hi
    assert np.isclose(alpha - lo, hi - alpha, rtol=1e-9, atol=1e-9)
    lo95, hi95 = intercept_ci(alpha, se, 0.95)
    if level >= 0.95:
        assert lo <= lo95 + 1e-12 and hi >= hi95 - 1e-12


@given(c=st.floats(-10, 10), case=st.sampled_from(["poly", "fourier"]))
def test_rmise_scaling(c, case):
    beta = population_beta(case, GRID)
    assert np.isclose(rmise_population(c * beta, beta, GRID), (c - 1) ** 2, rtol=1e-12, atol=1e-15)


@given(ev=st.lists(st.floats(1e-6, 10), min_size=1, max_size=8), a=st.floats(0.01, 1), b=st.floats(0.01, 1))
def test_num_components_monotone_in_threshold(ev, a, b):
    ev = np.sort(np.asarray(ev))[::-1]
    grid = np.linspace(0, 1, 5)
    m = FpcaModel(grid, np.zeros(5), ev, np.zeros((ev.size, 5)), 0.0)
    lo, hi = sorted((a, b))
    assert choose_num_fpcs(m, pve=lo) <= choose_num_fpcs(m, pve=hi) <= ev.size
    assert choose_num_fpcs(m, pve=1.0) == ev.size
