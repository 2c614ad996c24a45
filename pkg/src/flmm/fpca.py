"""Functional PCA with smoothed covariance and conditional-expectation
(PACE) scores, used to denoise error-contaminated covariate curves."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .design import FunctionalSample, trapezoid_weights

DEFAULT_GRID_SIZE = 101


def rule_of_thumb_bandwidth(t: np.ndarray, dim: int = 1, n_eff: int | None = None,
                            grid_step: float = 0.0) -> float:
    """Silverman-type bandwidth ``1.06 sd(t) n^(-1/(4+dim))``, kept above three
    grid steps so every local fit has support."""
    t = np.asarray(t, dtype=np.float64)
    n = n_eff if n_eff is not None else t.size
    h = 1.06 * float(np.std(t)) * n ** (-1.0 / (4 + dim))
    return max(h, 3.0 * grid_step)


def working_grid(domain, n_grid: int = DEFAULT_GRID_SIZE) -> np.ndarray:
    return np.linspace(domain[0], domain[1], n_grid)


def estimate_mean(obs: Sequence[FunctionalSample], bandwidth: float | None = None,
                  grid: np.ndarray | None = None) -> np.ndarray:
    """Local-linear smooth of the pooled (t, x) points evaluated on ``grid``."""
    if not obs:
        raise ValueError("no curves to estimate a mean from")
    t = np.concatenate([o.t for o in obs])
    x = np.concatenate([o.x for o in obs])
    if grid is None:
        grid = working_grid((t.min(), t.max()))
    step = float(np.min(np.diff(grid))) if len(grid) > 1 else 0.0
    h = bandwidth or rule_of_thumb_bandwidth(t, 1, grid_step=step)
    mu = kernels.local_linear_1d(t, x, np.ones_like(t), np.ascontiguousarray(grid, dtype=np.float64), h)
    if np.any(~np.isfinite(mu)):
        bad = grid[~np.isfinite(mu)]
        raise ValueError(f"mean estimate has no data near t in [{bad.min()}, {bad.max()}]; increase bandwidth")
    return mu


def _nearest_bins(t: np.ndarray, grid: np.ndarray) -> np.ndarray:
    idx = np.clip(np.searchsorted(grid, t), 1, len(grid) - 1)
    left = grid[idx - 1]
    right = grid[idx]
    return np.where(t - left <= right - t, idx - 1, idx)


@dataclass
class RawCovariance:
    grid: np.ndarray
    sums: np.ndarray      # off-diagonal cross-products (pairs of distinct observations)
    counts: np.ndarray
    diag_sums: np.ndarray  # squared residuals (same observation)
    diag_counts: np.ndarray


def raw_covariance(obs: Sequence[FunctionalSample], means: Sequence[np.ndarray], grid: np.ndarray,
                   scales: Sequence[float] | None = None) -> RawCovariance:
    """Method-of-moments cross-products binned onto ``grid``.

    ``means[c]`` is the mean curve (on ``grid``) to center curve c; ``scales``
    multiplies each curve's products (used to undo within-subject centering).
    """
    G = len(grid)
    sums = np.zeros((G, G))
    counts = np.zeros((G, G))
    dsum = np.zeros(G)
    dcnt = np.zeros(G)
    groups: dict[bytes, list[int]] = {}
    for c, o in enumerate(obs):
        groups.setdefault(o.t.tobytes(), []).append(c)
    for members in groups.values():
        t = obs[members[0]].t
        if len(t) < 2:
            raise ValueError("raw covariance needs at least 2 observations per curve")
        bins = _nearest_bins(t, grid)
        R = np.stack([obs[c].x - np.interp(t, grid, means[c]) for c in members])
        s = np.ones(len(members)) if scales is None else np.asarray([scales[c] for c in members])
        outer = (R * s[:, None]).T @ R
        sq = (s[:, None] * R * R).sum(axis=0)
        off = outer - np.diag(sq)
        cnt = np.full((len(t), len(t)), float(len(members)))
        np.fill_diagonal(cnt, 0.0)
        np.add.at(sums, (bins[:, None], bins[None, :]), off)
        np.add.at(counts, (bins[:, None], bins[None, :]), cnt)
        np.add.at(dsum, bins, sq)
        np.add.at(dcnt, bins, float(len(members)))
    return RawCovariance(grid, sums, counts, dsum, dcnt)


def _diagonal_fit(raw: RawCovariance, h: float) -> np.ndarray:
    """C(t, t) from off-diagonal raw cells by a local fit in rotated coordinates.

    With u = (s + t)/2 and v = (t - s)/2 a symmetric surface is even in v, so
    the model is quadratic in u - t and has v^2 and v^4 terms. This removes the
    ridge bias a plain 2-D smoother has on the diagonal.
    """
    grid = raw.grid
    si, ti = np.nonzero(raw.counts > 0)
    vals = raw.sums[si, ti] / raw.counts[si, ti]
    cnt = raw.counts[si, ti]
    u = 0.5 * (grid[si] + grid[ti])
    v = 0.5 * (grid[ti] - grid[si])
    kv = np.clip(1.0 - (v / h) ** 2, 0.0, None)
    out = np.full(len(grid), np.nan)
    for i, g in enumerate(grid):
        du = u - g
        w = cnt * kv * np.clip(1.0 - (du / h) ** 2, 0.0, None)
        k = w > 0
        if k.sum() < 5:
            continue
        X = np.stack([np.ones(k.sum()), du[k], du[k] ** 2, v[k] ** 2, v[k] ** 4], axis=1)
        sw = np.sqrt(w[k])
        coef = np.linalg.lstsq(sw[:, None] * X, sw * vals[k], rcond=None)[0]
        out[i] = coef[0]
    return out


def smooth_covariance(obs: Sequence[FunctionalSample], means: Sequence[np.ndarray], grid: np.ndarray,
                      bandwidth: float | None = None, scales=None):
    """Smoothed covariance surface on ``grid`` and the measurement-error variance.

    The raw diagonal (which carries the nugget) is left out of the surface
    smooth. The error variance is the mean gap between the raw diagonal and
    a rotated local fit of the off-diagonal cells over the middle half of the
    domain, floored at zero. ``scales`` apply to the surface only: centering
    on a smoothed subject mean barely removes pointwise noise, so the gap is
    measured on unscaled products.
    """
    raw = raw_covariance(obs, means, grid, scales)
    si, ti = np.nonzero(raw.counts > 0)
    if len(si) < 6:
        raise ValueError("too few off-diagonal pairs to smooth the covariance")
    vals = raw.sums[si, ti] / raw.counts[si, ti]
    step = float(np.min(np.diff(grid)))
    h = bandwidth or rule_of_thumb_bandwidth(grid[si], 2, n_eff=len(si), grid_step=step)
    surface = kernels.local_linear_2d(np.ascontiguousarray(grid[si]), np.ascontiguousarray(grid[ti]),
                                      vals, raw.counts[si, ti].copy(), np.ascontiguousarray(grid), h)
    if np.any(~np.isfinite(surface)):
        raise ValueError("covariance smoother has empty windows; increase bandwidth")
    if scales is not None and any(s != 1.0 for s in scales):
        raw = raw_covariance(obs, means, grid)
    have = raw.diag_counts > 0
    raw_diag = np.where(have, raw.diag_sums / np.maximum(raw.diag_counts, 1), np.nan)
    fit_diag = _diagonal_fit(raw, h)
    have &= np.isfinite(fit_diag)
    lo, hi = grid[0], grid[-1]
    mid = have & (grid >= lo + 0.25 * (hi - lo)) & (grid <= hi - 0.25 * (hi - lo))
    if not np.any(mid):
        mid = have
    if not np.any(mid):
        return surface, 0.0, h
    gap = float(np.mean(raw_diag[mid] - fit_diag[mid]))
    return surface, max(gap, 0.0), h


def eigen_decompose(surface: np.ndarray, weights: np.ndarray, M_max: int | None = None):
    """Eigenpairs of the covariance operator discretized with quadrature ``weights``.

    Eigenfunctions are orthonormal under the same weights; nonpositive
    eigenvalues are dropped.
    """
    C = 0.5 * (surface + surface.T)
    sw = np.sqrt(weights)
    ev, V = np.linalg.eigh(sw[:, None] * C * sw[None, :])
    order = np.argsort(ev)[::-1]
    ev, V = ev[order], V[:, order]
    tol = max(float(ev[0]) if ev.size else 0.0, 0.0) * 1e-12
    keep = ev > max(tol, 0.0)
    ev, V = ev[keep], V[:, keep]
    if M_max is not None:
        ev, V = ev[:M_max], V[:, :M_max]
    phi = (V / sw[:, None]).T
    # sign convention: largest-magnitude entry positive
    for k in range(phi.shape[0]):
        j = int(np.argmax(np.abs(phi[k])))
        if phi[k, j] < 0:
            phi[k] = -phi[k]
    return ev, phi


@dataclass
class FpcaModel:
    grid: np.ndarray
    mean: np.ndarray                  # pooled mean curve
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray        # (M, len(grid))
    noise_var: float
    mode: str = "within"
    subject_means: dict = field(default_factory=dict)
    bandwidth_mean: float = 0.0
    bandwidth_cov: float = 0.0

    @property
    def pve(self) -> np.ndarray:
        if self.eigenvalues.size == 0:
            return np.zeros(0)
        return np.cumsum(self.eigenvalues) / np.sum(self.eigenvalues)

    def mean_for(self, subject_id) -> np.ndarray:
        return self.subject_means.get(subject_id, self.mean)

    def to_dict(self) -> dict:
        return {
            "schema": "flmm.fpca/1",
            "mode": self.mode,
            "grid": self.grid.tolist(),
            "mean": self.mean.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "eigenfunctions": self.eigenfunctions.tolist(),
            "noise_var": self.noise_var,
            "subject_means": {str(k): v.tolist() for k, v in self.subject_means.items()},
            "bandwidth_mean": self.bandwidth_mean,
            "bandwidth_cov": self.bandwidth_cov,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FpcaModel":
        return cls(np.array(d["grid"]), np.array(d["mean"]), np.array(d["eigenvalues"]),
                   np.array(d["eigenfunctions"]).reshape(len(d["eigenvalues"]), -1),
                   float(d["noise_var"]), d["mode"],
                   {k: np.array(v) for k, v in d["subject_means"].items()},
                   float(d["bandwidth_mean"]), float(d["bandwidth_cov"]))


def fit_fpca(obs: Sequence[FunctionalSample], domain=None, mode: str = "within",
             n_grid: int = DEFAULT_GRID_SIZE, bw_mean: float | None = None,
             bw_cov: float | None = None, min_visits: int = 5,
             M_max: int | None = None) -> FpcaModel:
    """Fit mean, smoothed covariance, noise variance and eigen-decomposition.

    ``mode="within"`` centers each subject's curves on that subject's own
    smoothed mean when it has at least ``min_visits`` curves (pooled mean
    otherwise) and pools the centered curves for the covariance, rescaling
    products by m/(m-1) to undo the centering. ``mode="pooled"`` uses one
    global mean for all curves.
    """
    if mode not in ("within", "pooled"):
        raise ValueError(f"unknown FPCA mode {mode!r}")
    obs = list(obs)
    if domain is None:
        domain = (min(o.t[0] for o in obs), max(o.t[-1] for o in obs))
    grid = working_grid(domain, n_grid)
    step = float(grid[1] - grid[0])
    t_all = np.concatenate([o.t for o in obs])
    h_mu = bw_mean or rule_of_thumb_bandwidth(t_all, 1, grid_step=step)
    mu = estimate_mean(obs, h_mu, grid)

    by_subject: dict[str, list[int]] = {}
    for c, o in enumerate(obs):
        by_subject.setdefault(o.subject_id, []).append(c)
    subject_means = {}
    means = [mu] * len(obs)
    scales = [1.0] * len(obs)
    if mode == "within":
        for sid, members in by_subject.items():
            if len(members) < min_visits:
                continue
            sub = [obs[c] for c in members]
            t_sub = np.concatenate([o.t for o in sub])
            h = bw_mean or rule_of_thumb_bandwidth(t_sub, 1, grid_step=step)
            mu_i = estimate_mean(sub, h, grid)
            subject_means[sid] = mu_i
            m = len(members)
            for c in members:
                means[c] = mu_i
                scales[c] = m / (m - 1.0)
    surface, noise_var, h_cov = smooth_covariance(obs, means, grid, bw_cov, scales)
    ev, phi = eigen_decompose(surface, trapezoid_weights(grid), M_max)
    return FpcaModel(grid, mu, ev, phi, noise_var, mode, subject_means, h_mu, h_cov)


def choose_num_fpcs(model: FpcaModel, pve: float | None = None, fixed: int | None = None) -> int:
    """Smallest M whose cumulative proportion of variance reaches ``pve``,
    or ``fixed`` capped at the number of available components."""
    if fixed is not None:
        if fixed < 0:
            raise ValueError("number of components must be >= 0")
        return min(int(fixed), model.eigenvalues.size)
    if pve is None or not 0 < pve <= 1:
        raise ValueError(f"PVE threshold must be in (0, 1], got {pve}")
    cum = model.pve
    if cum.size == 0:
        return 0
    hit = np.nonzero(cum >= pve - 1e-12)[0]
    return int(hit[0]) + 1 if hit.size else int(cum.size)


def pace_scores(obs: Sequence[FunctionalSample], model: FpcaModel, M: int) -> np.ndarray:
    """Conditional-expectation scores Lambda Phi' Sigma^-1 (w - mu) per curve.

    Evaluated as (noise Lambda^-1 + Phi'Phi)^-1 Phi'(w - mu), which stays
    defined when the noise variance is zero.
    """
    if M > model.eigenvalues.size:
        raise ValueError(f"requested {M} components, model has {model.eigenvalues.size}")
    out = np.zeros((len(obs), M))
    if M == 0:
        return out
    lam = model.eigenvalues[:M]
    for c, o in enumerate(obs):
        Phi = np.stack([np.interp(o.t, model.grid, model.eigenfunctions[k]) for k in range(M)], axis=1)
        r = o.x - np.interp(o.t, model.grid, model.mean_for(o.subject_id))
        Mx = Phi.T @ Phi + model.noise_var * np.diag(1.0 / lam)
        if model.noise_var == 0.0:
            Mx += 1e-12 * np.trace(Mx) / M * np.eye(M)
        out[c] = np.linalg.solve(Mx, Phi.T @ r)
    return out


def reconstruct(obs: Sequence[FunctionalSample], model: FpcaModel, M: int,
                scores: np.ndarray | None = None) -> list[FunctionalSample]:
    """mu + sum_k score_k phi_k on the working grid, one curve per input."""
    if scores is None:
        scores = pace_scores(obs, model, M)
    out = []
    for c, o in enumerate(obs):
        x = model.mean_for(o.subject_id) + scores[c, :M] @ model.eigenfunctions[:M]
        out.append(FunctionalSample(o.subject_id, o.visit_id, model.grid.copy(), x))
    return out


def ise(a: np.ndarray, b: np.ndarray, grid: np.ndarray) -> float:
    return float(trapezoid_weights(grid) @ (a - b) ** 2)
