"""Covariance of the fixed effects, intercept CI, pointwise bands for beta(t),
and the random-slope covariance surface."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve
from scipy.stats import norm

from .basis import eval_basis
from .design import DesignBlocks
from .em import FitResult, _groups, _step1, make_penalties, penalized_D


def z_value(level: float) -> float:
    """Two-sided normal quantile; exactly 1.96 at the 95% level."""
    if not 0 < level < 1:
        raise ValueError(f"level must be in (0, 1), got {level}")
    if level == 0.95:
        return 1.96
    return float(norm.ppf(0.5 + level / 2))


def cov_theta_from_step(st) -> np.ndarray:
    p = st.theta.shape[0]
    C = cho_solve(st.A_chol, np.eye(p))
    return 0.5 * (C + C.T)


def cov_theta(db: DesignBlocks, fit: FitResult, sandwich: bool = False) -> np.ndarray:
    """(sum W_i' V_i^-1 W_i + lambda_beta G~)^-1.

    With ``sandwich=True`` the full form A^-1 (sum W_i' V_i^-1 Cov(Y_i) V_i^-1 W_i) A^-1
    is returned with Cov(Y_i) taken as V_i, i.e. A^-1 (A - lambda_beta G~) A^-1.
    """
    pen = make_penalties(fit.beta_basis, fit.b_basis, fit.op_beta, fit.op_b)
    st = _step1(_groups(db), fit.vc, pen, fit.lambdas)
    C = cov_theta_from_step(st)
    if not sandwich:
        return C
    meat = np.zeros_like(C)
    for (idx, Vinv, VW, *_), (_, Y, W, Z) in zip(st.parts, _groups(db).groups):
        meat += np.einsum("gmp,gmr->pr", W, VW)
    S = C @ meat @ C
    return 0.5 * (S + S.T)


def partition(cov: np.ndarray):
    """(sigma_11 as a standard deviation, Sigma_12, Sigma_22)."""
    return float(np.sqrt(max(cov[0, 0], 0.0))), cov[0, 1:], cov[1:, 1:]


def intercept_ci(alpha0: float, sigma11: float, level: float = 0.95) -> tuple[float, float]:
    """alpha0 -/+ z * sigma11, with sigma11 the standard error."""
    z = z_value(level)
    return alpha0 - z * sigma11, alpha0 + z * sigma11


def fit_intercept_ci(fit: FitResult, level: float = 0.95) -> tuple[float, float]:
    return intercept_ci(fit.alpha0, partition(fit.cov_theta)[0], level)


@dataclass
class PointwiseBand:
    grid: np.ndarray
    center: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float


def beta_band(fit: FitResult, grid, level: float = 0.95, cov: np.ndarray | None = None) -> PointwiseBand:
    grid = np.asarray(grid, dtype=np.float64)
    Phi = eval_basis(fit.beta_basis, grid)
    cov = fit.cov_theta if cov is None else cov
    S22 = cov[1:, 1:]
    var = np.einsum("ij,jk,ik->i", Phi, S22, Phi)
    half = z_value(level) * np.sqrt(np.clip(var, 0.0, None))
    center = Phi @ fit.c
    return PointwiseBand(grid, center, center - half, center + half, level)


@dataclass
class CovSurface:
    s: np.ndarray
    t: np.ndarray
    values: np.ndarray


def penalized_D_b(fit: FitResult) -> np.ndarray:
    """Lower K x K block of (D_xi^-1 + lambda_b G_xi)^-1."""
    pen = make_penalties(fit.beta_basis, fit.b_basis, fit.op_beta, fit.op_b)
    return penalized_D(fit.vc, pen.G_xi(), fit.lambdas.lambda_b)[1:, 1:]


def gamma_surface(fit: FitResult, s, t=None, D_b: np.ndarray | None = None) -> CovSurface:
    s = np.asarray(s, dtype=np.float64)
    t = s if t is None else np.asarray(t, dtype=np.float64)
    D_b = penalized_D_b(fit) if D_b is None else D_b
    Ps = eval_basis(fit.b_basis, s)
    Pt = Ps if t is s else eval_basis(fit.b_basis, t)
    vals = Ps @ D_b @ Pt.T
    if t is s:
        vals = 0.5 * (vals + vals.T)
    return CovSurface(s, t, vals)
