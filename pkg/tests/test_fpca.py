import numpy as np
import pytest

from flmm.design import FunctionalSample, trapezoid_weights
from flmm.fpca import (FpcaModel, choose_num_fpcs, eigen_decompose, estimate_mean, fit_fpca, ise,
                       pace_scores, reconstruct, smooth_covariance, working_grid)
from flmm.sim import Scenario, generate, x_components

GRID = working_grid((0.0, 1.0))
W = trapezoid_weights(GRID)


def _curves(X, t=GRID, sid=None):
    return [FunctionalSample(sid or f"s{c}", f"v{c}", t, x) for c, x in enumerate(X)]


@pytest.fixture(scope="module")
def generator_data():
    data, truth = generate(Scenario(n=40, m=5, sigma_e=0.5, seed=11))
    return data, truth


def test_mean_of_constant_curves_is_exact():
    obs = _curves(np.full((5, 101), 2.5))
    np.testing.assert_allclose(estimate_mean(obs, 0.05, GRID), 2.5, rtol=0, atol=1e-12)


def test_mean_of_identical_curves():
    x = np.sin(2 * np.pi * GRID) + GRID
    mu = estimate_mean(_curves(np.tile(x, (3, 1))), 0.011, GRID)
    inner = (GRID > 0.1) & (GRID < 0.9)
    assert np.max(np.abs(mu - x)[inner]) <= 1e-3
    np.testing.assert_allclose(estimate_mean(_curves(np.tile(GRID, (3, 1))), 0.05, GRID), GRID, atol=1e-12)


def test_mean_recovers_generator_mean():
    rng = np.random.default_rng(5)
    Xc = x_components(GRID)
    sd = np.sqrt(2.0 / 2 ** np.arange(1, 5))
    X = np.sin(np.pi * GRID) + (rng.normal(size=(200, 4)) * sd) @ Xc[2:] + rng.normal(0, 0.5, (200, 101))
    mu = estimate_mean(_curves(X), None, GRID)
    assert np.max(np.abs(mu - np.sin(np.pi * GRID))) <= 0.1


def test_mean_needs_data():
    with pytest.raises(ValueError):
        estimate_mean([])


def test_eigen_rank_one():
    phi = np.sqrt(2) * np.sin(np.pi * GRID)
    phi /= np.sqrt(W @ phi ** 2)
    ev, ef = eigen_decompose(3.0 * np.outer(phi, phi), W)
    assert ev.size == 1
    assert ev[0] == pytest.approx(3.0, abs=1e-6)
    np.testing.assert_allclose(np.abs(ef[0]), np.abs(phi), atol=1e-6)


def test_eigen_generator_covariance():
    Xc = x_components(GRID)[2:]
    lam = 2.0 / 2 ** np.arange(1, 5)
    ev, ef = eigen_decompose((Xc.T * lam) @ Xc, W)
    np.testing.assert_allclose(ev / ev[0], lam / lam[0], rtol=1e-6)
    np.testing.assert_allclose((ef * W) @ ef.T, np.eye(4), atol=1e-6)
    for k in range(4):
        assert abs(W @ (ef[k] * Xc[k])) >= 0.99


def test_eigen_zero_surface():
    ev, ef = eigen_decompose(np.zeros((101, 101)), W)
    assert ev.size == 0 and ef.shape == (0, 101)


def test_smoothed_surface_symmetric_and_noise_free():
    data, _ = generate(Scenario(n=40, m=5, sigma_e=0.0, seed=11))
    obs = data.curves()
    mu = estimate_mean(obs, None, GRID)
    surf, noise, _ = smooth_covariance(obs, [mu] * len(obs), GRID)
    assert np.array_equal(surf, surf.T)
    raw_diag = np.mean([(o.x - mu) ** 2 for o in obs], axis=0)
    assert noise <= 1e-3 * raw_diag.max()


def test_noise_variance_recovered(generator_data):
    data, _ = generator_data
    model = fit_fpca(data.curves(), data.domain)
    assert model.noise_var == pytest.approx(0.25, rel=0.3)


def test_model_invariants(generator_data):
    data, _ = generator_data
    model = fit_fpca(data.curves(), data.domain)
    assert np.all(np.diff(model.eigenvalues) <= 0) and np.all(model.eigenvalues > 0)
    G = (model.eigenfunctions * W) @ model.eigenfunctions.T
    np.testing.assert_allclose(G, np.eye(G.shape[0]), atol=1e-6)
    assert np.all(np.diff(model.pve) >= 0) and model.pve[-1] == pytest.approx(1.0)
    assert FpcaModel.from_dict(model.to_dict()).to_dict() == model.to_dict()


def test_pooled_mode_runs(generator_data):
    data, _ = generator_data
    model = fit_fpca(data.curves(), data.domain, mode="pooled")
    assert model.subject_means == {} and model.eigenvalues.size > 0
    with pytest.raises(ValueError):
        fit_fpca(data.curves(), mode="per-curve")


def _model(eigenvalues, noise=0.0):
    Xc = x_components(GRID)[2:2 + len(eigenvalues)]
    return FpcaModel(GRID, np.sin(np.pi * GRID), np.asarray(eigenvalues, float), Xc, noise)


def test_choose_num_fpcs():
    m = _model([1, 0.5, 0.25, 0.125])
    # cumulative PVE: 0.533, 0.8, 0.933, 1
    assert choose_num_fpcs(m, pve=0.9) == 3
    assert choose_num_fpcs(m, pve=1.0) == 4
    assert choose_num_fpcs(m, fixed=2) == 2
    for bad in (0.0, 1.5):
        with pytest.raises(ValueError):
            choose_num_fpcs(m, pve=bad)


def test_pace_scores_projection_limit():
    m = _model([1, 0.5, 0.25, 0.125])
    c = np.array([0.7, -1.2, 0.3, 0.05])
    x = m.mean + c @ m.eigenfunctions
    np.testing.assert_allclose(pace_scores(_curves([x]), m, 4)[0], c, atol=1e-4)
    np.testing.assert_allclose(pace_scores(_curves([m.mean]), m, 4)[0], 0.0, atol=1e-12)


def test_pace_scores_match_quadrature_projection():
    m = _model([1, 0.5, 0.25, 0.125])
    rng = np.random.default_rng(2)
    X = m.mean + rng.normal(size=(6, 4)) @ m.eigenfunctions
    direct = ((X - m.mean) * W) @ m.eigenfunctions.T
    np.testing.assert_allclose(pace_scores(_curves(X), m, 4), direct, atol=1e-3)


def test_pace_too_many_components():
    with pytest.raises(ValueError):
        pace_scores(_curves([GRID]), _model([1.0]), 2)


def test_reconstruct_zero_components_gives_mean():
    m = _model([1, 0.5])
    out = reconstruct(_curves(np.random.default_rng(0).normal(size=(3, 101))), m, 0)
    for o in out:
        np.testing.assert_array_equal(o.x, m.mean)


def test_reconstruction_nested(generator_data):
    data, _ = generator_data
    obs = data.curves()[:20]
    model = fit_fpca(data.curves(), data.domain)
    K = model.eigenvalues.size
    scores = ((np.stack([o.x for o in obs]) - np.stack([model.mean_for(o.subject_id) for o in obs])) * W) \
        @ model.eigenfunctions.T
    target = [model.mean_for(o.subject_id) + s @ model.eigenfunctions for o, s in zip(obs, scores)]
    prev = np.inf
    for M in range(min(K, 8) + 1):
        rec = reconstruct(obs, model, M, scores)
        cur = sum(ise(r.x, t, GRID) for r, t in zip(rec, target))
        assert cur <= prev + 1e-10
        prev = cur


def test_noiseless_full_reconstruction_round_trip():
    data, _ = generate(Scenario(n=40, m=5, sigma_e=0.0, seed=4))
    obs = data.curves()
    model = fit_fpca(obs, data.domain)
    rec = reconstruct(obs, model, model.eigenvalues.size)
    err = np.mean([ise(r.x, o.x, GRID) for r, o in zip(rec, obs)])
    assert err <= 1e-2


def test_denoising_helps(generator_data):
    data, truth = generator_data
    obs = data.curves()
    model = fit_fpca(obs, data.domain)
    rec = reconstruct(obs, model, choose_num_fpcs(model, pve=0.95))
    xt = np.concatenate(truth.x_true)
    raw = np.mean([ise(o.x, x, GRID) for o, x in zip(obs, xt)])
    den = np.mean([ise(r.x, x, GRID) for r, x in zip(rec, xt)])
    assert den < raw
