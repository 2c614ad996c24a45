"""Penalized effect estimation and the REML-based EM algorithm.

All per-subject linear algebra is batched over subjects that share a visit
count, so an iteration costs O(sum m_i^3 + n q^3 + p^3) and the N x N
covariance is never formed.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import LinAlgWarning, cho_factor, cho_solve, lu_factor

from .basis import BasisSystem, RoughnessOperator, eval_basis, penalty_matrix
from .design import DesignBlocks

log = logging.getLogger(__name__)

SIGMA2_EPS_FLOOR = 1e-12
D_EIG_FLOOR = 1e-10
VARIANCE_ATOL = 1e-6      # relative to var(Y), for the convergence test only


class SingularSystemError(np.linalg.LinAlgError):
    """The penalized normal equations are numerically singular."""


class EmDivergenceError(FloatingPointError):
    """An EM update produced non-finite values."""


@dataclass(frozen=True)
class VarianceComponents:
    sigma2_a: float
    sigma2_eps: float
    D: np.ndarray

    def __post_init__(self):
        D = np.array(self.D, dtype=np.float64)
        if D.ndim != 2 or D.shape[0] != D.shape[1]:
            raise ValueError("D must be square")
        if not np.all(np.isfinite(D)):
            raise ValueError("D has non-finite entries")
        if np.max(np.abs(D - D.T), initial=0.0) > 1e-12 * max(1.0, np.abs(D).max(initial=0.0)):
            raise ValueError("D must be symmetric")
        if not self.sigma2_a >= 0:
            raise ValueError(f"sigma2_a must be >= 0, got {self.sigma2_a}")
        if not self.sigma2_eps >= SIGMA2_EPS_FLOOR:
            raise ValueError(f"sigma2_eps must be >= {SIGMA2_EPS_FLOOR}, got {self.sigma2_eps}")
        D.setflags(write=False)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "sigma2_a", float(self.sigma2_a))
        object.__setattr__(self, "sigma2_eps", float(self.sigma2_eps))

    @property
    def K(self) -> int:
        return self.D.shape[0]

    def __eq__(self, other):
        if not isinstance(other, VarianceComponents):
            return NotImplemented
        return (self.sigma2_a == other.sigma2_a and self.sigma2_eps == other.sigma2_eps
                and np.array_equal(self.D, other.D))

    __hash__ = None

    def D_xi(self) -> np.ndarray:
        """Block-diagonal diag(sigma2_a, D)."""
        q = self.K + 1
        out = np.zeros((q, q))
        out[0, 0] = self.sigma2_a
        out[1:, 1:] = self.D
        return out


@dataclass(frozen=True)
class Lambdas:
    lambda_beta: float
    lambda_b: float

    def __post_init__(self):
        for name in ("lambda_beta", "lambda_b"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class Penalties:
    """Roughness penalty matrices G (for beta) and G_b (for b_i)."""

    G: np.ndarray
    G_b: np.ndarray
    op_beta: RoughnessOperator | None = None
    op_b: RoughnessOperator | None = None

    def G_tilde(self) -> np.ndarray:
        """diag(0, G): the intercept is unpenalized."""
        return _pad(self.G)

    def G_xi(self) -> np.ndarray:
        return _pad(self.G_b)


def make_penalties(beta_basis: BasisSystem, b_basis: BasisSystem,
                   op_beta: RoughnessOperator, op_b: RoughnessOperator | None = None) -> Penalties:
    op_b = op_b or op_beta
    return Penalties(penalty_matrix(beta_basis, op_beta), penalty_matrix(b_basis, op_b), op_beta, op_b)


def _pad(M: np.ndarray) -> np.ndarray:
    out = np.zeros((M.shape[0] + 1, M.shape[1] + 1))
    out[1:, 1:] = M
    return out


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


@dataclass
class EmConfig:
    max_iter: int = 500
    tol: float = 1e-6
    sigma2_a0: float = 1.0
    sigma2_eps0: float = 1.0
    D0: np.ndarray | None = None


def init_state(K: int, cfg: EmConfig | None = None, n: int = 0, p: int = 0) -> "EmState":
    """Starting values: sigma2_a = sigma2_eps = 1 and D = I unless overridden."""
    cfg = cfg or EmConfig()
    D0 = np.eye(K) if cfg.D0 is None else np.asarray(cfg.D0, dtype=np.float64)
    if D0.shape != (K, K):
        raise ValueError(f"D0 must be {K}x{K}")
    vc = VarianceComponents(cfg.sigma2_a0, cfg.sigma2_eps0, D0)
    return EmState(vc=vc, theta=np.zeros(p), xi=np.zeros((n, K + 1)), iteration=0)


@dataclass
class EmState:
    vc: VarianceComponents
    theta: np.ndarray
    xi: np.ndarray
    iteration: int = 0
    history: list = field(default_factory=list)


class _Groups:
    """Subjects batched by visit count."""

    def __init__(self, db: DesignBlocks):
        m = np.array(db.m)
        self.n, self.N = db.n, db.N
        self.p, self.q = db.p, db.q
        self.groups = []
        for mv in np.unique(m):
            idx = np.nonzero(m == mv)[0]
            self.groups.append((
                idx,
                np.stack([db.Y[i] for i in idx]),
                np.stack([db.W[i] for i in idx]),
                np.stack([db.Z[i] for i in idx]),
            ))


def _groups(db: DesignBlocks) -> _Groups:
    g = getattr(db, "_groups_cache", None)
    if g is None:
        g = _Groups(db)
        db._groups_cache = g
    return g


def penalized_D(vc: VarianceComponents, G_xi: np.ndarray, lambda_b: float) -> np.ndarray:
    """(D_xi^{-1} + lambda_b G_xi)^{-1}, computed without inverting D_xi."""
    Dxi = vc.D_xi()
    q = Dxi.shape[0]
    Dt = np.linalg.solve(np.eye(q) + lambda_b * Dxi @ G_xi, Dxi)
    return _sym(Dt)


@dataclass
class _Step:
    """Everything Step 1 produces, kept for Step 2, df and covariance."""

    Dt: np.ndarray
    A_chol: tuple
    theta: np.ndarray
    xi: np.ndarray
    parts: list  # per group: [idx, Vinv, Vinv W, logdet V, Y - W theta]


def _factor_A(A: np.ndarray):
    try:
        return cho_factor(A, lower=True)
    except np.linalg.LinAlgError:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LinAlgWarning)
            d = np.abs(np.diag(lu_factor(A, check_finite=False)[0]))
        k = int(np.argmin(d))
        raise SingularSystemError(
            f"penalized fixed-effect system is not positive definite; smallest pivot "
            f"{d[k]:.3e} at index {k} (lambda too small for a rank-deficient design?)") from None


def _step1(g: _Groups, vc: VarianceComponents, pen: Penalties, lam: Lambdas) -> _Step:
    Dt = penalized_D(vc, pen.G_xi(), lam.lambda_b)
    p = g.p
    A = np.zeros((p, p))
    rhs = np.zeros(p)
    parts = []
    for idx, Y, W, Z in g.groups:
        m = Y.shape[1]
        V = Z @ Dt @ np.swapaxes(Z, 1, 2) + vc.sigma2_eps * np.eye(m)
        try:
            L = np.linalg.cholesky(V)
        except np.linalg.LinAlgError:
            raise SingularSystemError("per-subject marginal covariance is not positive definite") from None
        Linv = np.linalg.inv(L)
        Vinv = np.swapaxes(Linv, 1, 2) @ Linv
        VW = Vinv @ W
        A += np.einsum("gmp,gmr->pr", W, VW)
        rhs += np.einsum("gmp,gm->p", VW, Y)
        logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
        parts.append([idx, Vinv, VW, logdet])
    A = _sym(A + lam.lambda_beta * pen.G_tilde())
    A_chol = _factor_A(A)
    theta = cho_solve(A_chol, rhs)
    xi = np.zeros((g.n, g.q))
    for part, (idx, Y, W, Z) in zip(parts, g.groups):
        Vinv = part[1]
        r = Y - W @ theta
        xi[idx] = np.einsum("qk,gmk,gmn,gn->gq", Dt, Z, Vinv, r, optimize=True)
        part.append(r)
    return _Step(Dt, A_chol, theta, xi, parts)


def estimate_effects(state: EmState, db: DesignBlocks, pen: Penalties, lam: Lambdas):
    """Minimizers (theta, xi) of the penalized objective at the state's
    variance components."""
    st = _step1(_groups(db), state.vc, pen, lam)
    return st.theta, st.xi


def penalized_objective(theta, xi, vc: VarianceComponents, db: DesignBlocks, pen: Penalties,
                        lam: Lambdas) -> float:
    """The penalized criterion H(theta, xi) in matrix form (dense, for checking)."""
    G_xi = pen.G_xi()
    Dxi = vc.D_xi()
    total = 0.0
    for i in range(db.n):
        r = db.Y[i] - db.W[i] @ theta - db.Z[i] @ xi[i]
        total += 0.5 * r @ r / vc.sigma2_eps
    b = xi[:, 1:]
    total += 0.5 * np.einsum("ik,kl,il->", b, np.linalg.inv(vc.D), b)
    total += 0.5 * lam.lambda_beta * theta[1:] @ pen.G @ theta[1:]
    total += 0.5 * lam.lambda_b * np.einsum("ik,kl,il->", xi, G_xi, xi)
    total += 0.5 * np.sum(xi[:, 0] ** 2) / Dxi[0, 0]
    return float(total)


def _step2(g: _Groups, vc: VarianceComponents, st: _Step):
    """Variance-component updates from the Step-1 quantities."""
    s2 = vc.sigma2_eps
    Dxi = vc.D_xi()
    sse = 0.0
    trace_term = 0.0
    ZHZ = np.zeros((g.q, g.q))
    xx = np.zeros((g.q, g.q))
    for (idx, Vinv, VW, logdet, r), (_, Y, W, Z) in zip(st.parts, g.groups):
        m = Y.shape[1]
        xi = st.xi[idx]
        eps = r - np.einsum("gmq,gq->gm", Z, xi)
        sse += float(np.sum(eps * eps))
        # H_i = V^-1 - V^-1 W A^-1 W' V^-1
        X = cho_solve(st.A_chol, VW.reshape(-1, g.p).T).T.reshape(VW.shape)
        H = _sym(Vinv - VW @ np.swapaxes(X, 1, 2))
        trH = np.trace(H, axis1=1, axis2=2)
        trace_term += float(np.sum(m - s2 * trH))
        ZHZ += np.einsum("gmq,gmn,gnr->qr", Z, H, Z, optimize=True)
        xx += xi.T @ xi
    s2_new = (sse + s2 * trace_term) / g.N
    Dxi_new = (xx + g.n * Dxi - Dxi @ ZHZ @ Dxi) / g.n
    return s2_new, Dxi_new, sse


def project_components(s2_new: float, Dxi_new: np.ndarray, iteration: int = 0):
    """Map the raw Step-2 update onto diag(sigma2_a, D) with D symmetric PSD.

    Returns the new components and the pre-clipping minimum eigenvalue of D.
    """
    if not (math.isfinite(s2_new) and np.all(np.isfinite(Dxi_new))):
        raise EmDivergenceError(
            f"non-finite EM update at iteration {iteration}: sigma2_eps={s2_new}, "
            f"D finite={bool(np.all(np.isfinite(Dxi_new)))}")
    sigma2_a = max(float(Dxi_new[0, 0]), 0.0)
    D = _sym(Dxi_new[1:, 1:])
    ev, U = np.linalg.eigh(D)
    eigmin_raw = float(ev[0])
    floor = D_EIG_FLOOR * max(float(np.sum(np.clip(ev, 0, None))), 0.0)
    ev = np.maximum(ev, floor)
    D = _sym((U * ev) @ U.T)
    sigma2_eps = max(float(s2_new), SIGMA2_EPS_FLOOR)
    return VarianceComponents(sigma2_a, sigma2_eps, D), eigmin_raw


def em_iterate(state: EmState, db: DesignBlocks, pen: Penalties, lam: Lambdas) -> EmState:
    """One pass of Step 1 (effects at the current components) and Step 2
    (component updates)."""
    g = _groups(db)
    st = _step1(g, state.vc, pen, lam)
    s2_new, Dxi_new, sse = _step2(g, state.vc, st)
    vc, eigmin = project_components(s2_new, Dxi_new, state.iteration + 1)
    it = state.iteration + 1
    obj = _profile_objective(st, pen, lam)
    log.debug("iter %d sigma2_eps=%.6g sigma2_a=%.6g trD=%.6g objective=%.10g",
              it, vc.sigma2_eps, vc.sigma2_a, float(np.trace(vc.D)), obj)
    hist = state.history + [{"iteration": it, "objective": obj, "eigmin_raw": eigmin, "sse": sse}]
    return EmState(vc=vc, theta=st.theta, xi=st.xi, iteration=it, history=hist)


def _profile_objective(st: _Step, pen: Penalties, lam: Lambdas) -> float:
    """Restricted-likelihood-style criterion, monitored only."""
    quad = sum(float(np.einsum("gm,gmn,gn->", r, Vinv, r)) for _, Vinv, _, _, r in st.parts)
    logdetV = sum(float(np.sum(ld)) for _, _, _, ld, _ in st.parts)
    logdetA = 2.0 * float(np.sum(np.log(np.diag(st.A_chol[0]))))
    pen_term = lam.lambda_beta * float(st.theta @ pen.G_tilde() @ st.theta)
    return 0.5 * (quad + logdetV + logdetA + pen_term)


def _rel_change(new, old, atol: float = 1e-12) -> float:
    """Max abs change over max abs old value, the latter floored at ``atol``."""
    new = np.atleast_1d(np.asarray(new, dtype=np.float64))
    old = np.atleast_1d(np.asarray(old, dtype=np.float64))
    scale = max(float(np.max(np.abs(old))), atol)
    return float(np.max(np.abs(new - old))) / scale


@dataclass
class FitResult:
    theta: np.ndarray
    xi: np.ndarray
    vc: VarianceComponents
    lambdas: Lambdas
    df: float
    gcv: float
    cov_theta: np.ndarray
    convergence: dict
    beta_basis: BasisSystem
    b_basis: BasisSystem
    op_beta: RoughnessOperator | None = None
    op_b: RoughnessOperator | None = None
    subject_ids: list = field(default_factory=list)

    @property
    def alpha0(self) -> float:
        return float(self.theta[0])

    @property
    def c(self) -> np.ndarray:
        return self.theta[1:]


def run_em(db: DesignBlocks, pen: Penalties, lam: Lambdas, cfg: EmConfig | None = None,
           beta_basis: BasisSystem | None = None, b_basis: BasisSystem | None = None,
           state: EmState | None = None) -> FitResult:
    """Iterate EM until the largest relative change of (sigma2_a, sigma2_eps,
    D, theta) drops below ``cfg.tol`` or ``cfg.max_iter`` is reached.

    Non-convergence is reported in ``convergence["converged"]``, not raised.
    ``state`` allows a warm start from earlier components.
    """
    from .inference import cov_theta_from_step
    from .selection import df_from_step, gcv_from_sse

    cfg = cfg or EmConfig()
    g = _groups(db)
    if state is None:
        state = init_state(db.q - 1, cfg, db.n, db.p)
    else:
        state = replace(state, iteration=0, history=[])
    delta = math.inf
    converged = False
    # variance components shrinking to zero are compared on the scale of var(Y)
    vscale = VARIANCE_ATOL * max(float(np.var(db.stacked_Y())), 1e-12)
    while state.iteration < cfg.max_iter:
        new = em_iterate(state, db, pen, lam)
        delta = max(
            _rel_change(new.vc.sigma2_a, state.vc.sigma2_a, vscale),
            _rel_change(new.vc.sigma2_eps, state.vc.sigma2_eps, vscale),
            _rel_change(new.vc.D, state.vc.D, vscale),
            _rel_change(new.theta, state.theta) if state.iteration > 0 else math.inf,
        )
        state = new
        if delta < cfg.tol:
            converged = True
            break
    # final effects at the final components so every reported quantity agrees
    st = _step1(g, state.vc, pen, lam)
    sse = _sse(g, st)
    df = df_from_step(g, st, state.vc)
    gcv = gcv_from_sse(sse, g.N, df)
    cov = cov_theta_from_step(st)
    conv = {"iterations": state.iteration, "final_delta": float(delta), "converged": converged}
    if not converged:
        log.info("EM stopped at max_iter=%d with relative change %.3g", cfg.max_iter, delta)
    return FitResult(
        theta=st.theta, xi=st.xi, vc=state.vc, lambdas=lam, df=df, gcv=gcv, cov_theta=cov,
        convergence=conv, beta_basis=beta_basis, b_basis=b_basis,
        op_beta=pen.op_beta, op_b=pen.op_b, subject_ids=list(db.subject_ids))


def _sse(g: _Groups, st: _Step) -> float:
    total = 0.0
    for (idx, *_, r), (_, Y, W, Z) in zip(st.parts, g.groups):
        eps = r - np.einsum("gmq,gq->gm", Z, st.xi[idx])
        total += float(np.sum(eps * eps))
    return total


def fitted_values(fit: FitResult, db: DesignBlocks) -> list[np.ndarray]:
    return [db.W[i] @ fit.theta + db.Z[i] @ fit.xi[i] for i in range(db.n)]


def coefficients_to_functions(fit: FitResult, grid) -> dict:
    """Evaluate beta_hat, each b_hat_i and each beta_hat_i = beta_hat + b_hat_i on ``grid``."""
    grid = np.asarray(grid, dtype=np.float64)
    beta = eval_basis(fit.beta_basis, grid) @ fit.theta[1:]
    b = eval_basis(fit.b_basis, grid) @ fit.xi[:, 1:].T
    return {"grid": grid, "beta_hat": beta, "b_hat": b.T, "beta_i_hat": (beta[:, None] + b).T}
