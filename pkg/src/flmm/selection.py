"""GCV selection of the smoothing parameters (lambda_beta, lambda_b)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import partial

import numpy as np
from scipy.linalg import cho_solve

from .design import DesignBlocks
from .em import (EmConfig, EmDivergenceError, EmState, FitResult, Lambdas, Penalties,
                 SingularSystemError, VarianceComponents, _groups, _step1, run_em)
from .parallel import pmap

log = logging.getLogger(__name__)

DEFAULT_LOG10_BETA = tuple(float(v) for v in np.linspace(-2, 6, 9))
DEFAULT_LOG10_B = tuple(float(v) for v in np.linspace(-2, 4, 7))


def df_from_step(g, st, vc: VarianceComponents) -> float:
    """Trace of the smoother: sum over subjects of tr(Q_i restricted to Y_i)."""
    total = 0.0
    for (idx, Vinv, VW, _, _), (_, Y, W, Z) in zip(st.parts, g.groups):
        X = cho_solve(st.A_chol, VW.reshape(-1, g.p).T).T.reshape(VW.shape)
        P = W @ np.swapaxes(X, 1, 2)                     # W_i A^-1 W_i' V_i^-1
        R = Z @ st.Dt @ np.swapaxes(Z, 1, 2) @ Vinv      # Z_i Dt Z_i' V_i^-1
        total += float(np.sum(np.trace(P, axis1=1, axis2=2))
                       + np.sum(np.trace(R, axis1=1, axis2=2))
                       - np.einsum("gab,gba->", R, P))
    return total


def gcv_from_sse(sse: float, N: int, df: float) -> float:
    """SSE / (N - df)^2, or +inf when df >= N."""
    if not df < N:
        return math.inf
    return sse / (N - df) ** 2


def effective_df(db: DesignBlocks, vc: VarianceComponents, pen: Penalties, lam: Lambdas) -> float:
    g = _groups(db)
    return df_from_step(g, _step1(g, vc, pen, lam), vc)


def gcv_score(db: DesignBlocks, fit: FitResult) -> float:
    sse = 0.0
    for i in range(db.n):
        r = db.Y[i] - db.W[i] @ fit.theta - db.Z[i] @ fit.xi[i]
        sse += float(r @ r)
    return gcv_from_sse(sse, db.N, fit.df)


def smoother_matrix(db: DesignBlocks, vc: VarianceComponents, pen: Penalties, lam: Lambdas) -> np.ndarray:
    """Dense N x N smoother assembled row-block by row-block from
    Q_i = S_i + Z_i Dt Z_i' V_i^-1 (I - S_i). For small instances only."""
    g = _groups(db)
    st = _step1(g, vc, pen, lam)
    W = db.stacked_W()
    Vinv_blocks = [None] * db.n
    for idx, Vinv, *_ in st.parts:
        for k, i in enumerate(idx):
            Vinv_blocks[i] = Vinv[k]
    from scipy.linalg import block_diag
    Vinv = block_diag(*Vinv_blocks)
    S = W @ cho_solve(st.A_chol, W.T @ Vinv)           # N x N, rows stacked by subject
    offsets = np.cumsum([0] + db.m)
    Q = np.empty_like(S)
    for i in range(db.n):
        rows = slice(offsets[i], offsets[i + 1])
        Si = S[rows]
        E = np.zeros_like(Si)
        E[:, rows] = np.eye(db.m[i])
        Q[rows] = Si + db.Z[i] @ st.Dt @ db.Z[i].T @ Vinv_blocks[i] @ (E - Si)
    return Q


def stacked_smoother(db: DesignBlocks, vc: VarianceComponents, pen: Penalties, lam: Lambdas) -> np.ndarray:
    """Smoother from the joint normal equations of (theta, xi):

        Q = C [C'C / s2 + diag(lambda_beta G~, I (x) Dt^-1)]^-1 C' / s2,  C = (W, Z).

    For small instances only.
    """
    from .em import penalized_D
    W = db.stacked_W()
    Z = db.blockdiag_Z()
    C = np.hstack([W, Z])
    s2 = vc.sigma2_eps
    Dt = penalized_D(vc, pen.G_xi(), lam.lambda_b)
    from scipy.linalg import block_diag
    P = block_diag(lam.lambda_beta * pen.G_tilde(), *([np.linalg.inv(Dt)] * db.n))
    M = C.T @ C / s2 + P
    return C @ np.linalg.solve(M, C.T) / s2


@dataclass
class GcvSurface:
    grid: list        # (lambda_beta, lambda_b) pairs
    scores: list
    dfs: list
    converged: list
    best: int

    @property
    def best_lambdas(self) -> Lambdas:
        lb, lbb = self.grid[self.best]
        return Lambdas(lb, lbb)

    def rows(self):
        for (lb, lbb), s, d, c in zip(self.grid, self.scores, self.dfs, self.converged):
            yield {"lambda_beta": lb, "lambda_b": lbb, "gcv": s, "df": d, "converged": c}


def make_grid(log10_beta=DEFAULT_LOG10_BETA, log10_b=DEFAULT_LOG10_B) -> list:
    return [(10.0 ** a, 10.0 ** b) for a in log10_beta for b in log10_b]


def _best_index(grid, scores) -> int:
    finite = [k for k, s in enumerate(scores) if math.isfinite(s)]
    if not finite:
        raise ValueError("GCV is non-finite at every grid point")
    smin = min(scores[k] for k in finite)
    ties = [k for k in finite if scores[k] == smin]
    return max(ties, key=lambda k: grid[k])


def _scan_row(args, db, pen, em_cfg, warm):
    lb, row = args
    out = []
    state = None
    for lbb in row:
        lam = Lambdas(lb, lbb)
        try:
            fit = run_em(db, pen, lam, em_cfg, state=state)
        except (SingularSystemError, EmDivergenceError, np.linalg.LinAlgError) as exc:
            log.warning("grid point %s failed: %s", lam, exc)
            out.append((math.inf, math.nan, False, None))
            state = None
            continue
        out.append((fit.gcv, fit.df, fit.convergence["converged"], fit.vc))
        if warm:
            state = EmState(vc=fit.vc, theta=fit.theta, xi=fit.xi)
    return out


def gcv_search(db: DesignBlocks, pen: Penalties, grid=None, em_cfg: EmConfig | None = None,
               beta_basis=None, b_basis=None, warm_start: bool = True, threads: int = 1):
    """Run EM at every grid point and refit at the GCV minimizer.

    Grid points sharing lambda_beta form one sequential row (warm-started
    along lambda_b); rows run in parallel.
    """
    grid = list(grid) if grid is not None else make_grid()
    if not grid:
        raise ValueError("empty lambda grid")
    em_cfg = em_cfg or EmConfig()
    rows: dict[float, list] = {}
    for lb, lbb in grid:
        rows.setdefault(lb, []).append(lbb)
    tasks = list(rows.items())
    results = pmap(partial(_scan_row, db=db, pen=pen, em_cfg=em_cfg, warm=warm_start), tasks, threads)
    lookup = {}
    for (lb, row), res in zip(tasks, results):
        for lbb, r in zip(row, res):
            lookup[(lb, lbb)] = r
    scores = [lookup[pt][0] for pt in grid]
    dfs = [lookup[pt][1] for pt in grid]
    conv = [lookup[pt][2] for pt in grid]
    best = _best_index(grid, scores)
    surface = GcvSurface(grid, scores, dfs, conv, best)
    fit = run_em(db, pen, surface.best_lambdas, em_cfg, beta_basis=beta_basis, b_basis=b_basis)
    return surface, fit
