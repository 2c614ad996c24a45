"""Monte Carlo studies: data generation for the polynomial and Fourier
slope cases, RMISE metrics, and replicate aggregation."""

from __future__ import annotations

import logging
import math
import statistics
from dataclasses import asdict, dataclass, field
from functools import partial

import numpy as np

from .basis import d2, make_bspline_basis, make_fourier_basis
from .design import Dataset, FunctionalSample, Subject, Visit, build_design, trapezoid_weights
from .em import EmConfig, Lambdas, coefficients_to_functions, make_penalties, run_em
from .parallel import pmap

log = logging.getLogger(__name__)

RNG_ALGORITHM = "numpy.random.PCG64 via SeedSequence.spawn (one child stream per replicate)"
ORACLE_GRID = 2001
EVAL_GRID = 201
ETA_MEAN = (1.0, 2.0, 1.0)
ETA_SD = (0.2, 0.4, 0.2)
ALPHA_MEAN = 3.0
ALPHA_SD = 0.5          # variance 0.25

PAPER_N = (50, 100)
PAPER_M = (5, 10, 20)
PAPER_SIGMA_E = (0.0, 0.5)
PAPER_SIGMA_EPS = (0.5, 1.0)


def beta_components(case: str, t) -> np.ndarray:
    """Rows: the three functions whose eta-weighted sum is beta_i(t)."""
    t = np.asarray(t, dtype=np.float64)
    if case == "poly":
        return np.stack([np.ones_like(t), t ** 2, np.exp(-3 * t)])
    if case == "fourier":
        return np.stack([np.ones_like(t), np.sin(2 * np.pi * t), np.cos(2 * np.pi * t)])
    raise ValueError(f"unknown case {case!r}")


def population_beta(case: str, t) -> np.ndarray:
    return np.asarray(ETA_MEAN) @ beta_components(case, t)


def x_components(t) -> np.ndarray:
    """Rows: 1, sin(pi t), sqrt2 psi_1..psi_4."""
    t = np.asarray(t, dtype=np.float64)
    r2 = math.sqrt(2.0)
    return np.stack([np.ones_like(t), np.sin(np.pi * t),
                     r2 * np.sin(2 * np.pi * t), r2 * np.cos(2 * np.pi * t),
                     r2 * np.sin(4 * np.pi * t), r2 * np.cos(4 * np.pi * t)])


SCORE_VAR = np.array([2.0 / 2 ** k for k in range(1, 5)])


@dataclass(frozen=True)
class Scenario:
    case: str = "poly"
    n: int = 50
    m: int = 5
    sigma_e: float = 0.0
    sigma_eps: float = 0.5
    n_grid: int = 101
    seed: int = 1
    eta_sd: tuple = ETA_SD
    alpha_sd: float = ALPHA_SD

    def __post_init__(self):
        if self.case not in ("poly", "fourier"):
            raise ValueError(f"unknown case {self.case!r}")
        if self.n < 1 or self.m < 1 or self.n_grid < 2:
            raise ValueError("n, m must be >= 1 and n_grid >= 2")
        if self.sigma_e < 0 or self.sigma_eps < 0:
            raise ValueError("noise levels must be >= 0")

    @property
    def in_paper_design(self) -> bool:
        return (self.n in PAPER_N and self.m in PAPER_M and self.sigma_e in PAPER_SIGMA_E
                and self.sigma_eps in PAPER_SIGMA_EPS)


@dataclass
class Truth:
    case: str
    alpha: np.ndarray            # (n,)
    eta: np.ndarray              # (n, 3)
    x_true: list                 # per subject: (m, n_grid)
    grid: np.ndarray

    def beta(self, t) -> np.ndarray:
        return population_beta(self.case, t)

    def beta_i(self, t) -> np.ndarray:
        return self.eta @ beta_components(self.case, t)


def generate(scn: Scenario, rng: np.random.Generator | None = None):
    """Simulated dataset (observed curves W_ij on an equispaced grid) and truth.

    Responses use a 2001-point trapezoid rule for the integral of
    beta_i X_ij, finer than any fitting quadrature.
    """
    rng = rng if rng is not None else np.random.Generator(np.random.PCG64(scn.seed))
    grid = np.linspace(0.0, 1.0, scn.n_grid)
    dense = np.linspace(0.0, 1.0, ORACLE_GRID)
    w = trapezoid_weights(dense)
    # integrals of beta-component a times X-component b on the oracle grid
    cross = (beta_components(scn.case, dense) * w) @ x_components(dense).T   # (3, 6)
    Xc = x_components(grid)
    subjects, alphas, etas, xs = [], [], [], []
    for i in range(scn.n):
        d0 = rng.uniform(-2.0, 2.0)
        d1 = rng.normal(0.0, 2.0)
        eta = rng.normal(ETA_MEAN, scn.eta_sd)
        alpha = rng.normal(ALPHA_MEAN, scn.alpha_sd)
        xi = rng.normal(0.0, np.sqrt(SCORE_VAR), size=(scn.m, 4))
        coef = np.hstack([np.full((scn.m, 1), d0), np.full((scn.m, 1), d1), xi])   # (m, 6)
        x_true = coef @ Xc
        y = alpha + coef @ (cross.T @ eta) + rng.normal(0.0, 1.0, scn.m) * scn.sigma_eps
        w_obs = x_true + rng.normal(0.0, 1.0, x_true.shape) * scn.sigma_e
        sid = f"s{i + 1:03d}"
        visits = tuple(Visit(float(y[j]), FunctionalSample(sid, f"v{j + 1:02d}", grid, w_obs[j]))
                       for j in range(scn.m))
        subjects.append(Subject(sid, visits))
        alphas.append(alpha)
        etas.append(eta)
        xs.append(x_true)
    data = Dataset(tuple(subjects), (0.0, 1.0))
    return data, Truth(scn.case, np.array(alphas), np.array(etas), xs, grid)


def _trapz(f: np.ndarray, grid: np.ndarray) -> float:
    return float(trapezoid_weights(grid) @ f)


def rmise_population(beta_hat, beta_true, grid) -> float:
    """Integrated squared error of beta_hat relative to the integral of beta^2."""
    beta_hat, beta_true = np.asarray(beta_hat), np.asarray(beta_true)
    den = _trapz(beta_true ** 2, grid)
    if den == 0:
        raise ZeroDivisionError("true curve has zero L2 norm")
    return _trapz((beta_hat - beta_true) ** 2, grid) / den


def rmise_individual(beta_hat_i, beta_true_i, grid) -> float:
    """Summed ISE over subjects relative to the summed integral of beta_i^2."""
    beta_hat_i, beta_true_i = np.atleast_2d(beta_hat_i), np.atleast_2d(beta_true_i)
    if beta_hat_i.shape != beta_true_i.shape:
        raise ValueError("subject lists are not aligned")
    w = trapezoid_weights(grid)
    den = float(np.sum((beta_true_i ** 2) @ w))
    if den == 0:
        raise ZeroDivisionError("true curves have zero L2 norm")
    return float(np.sum(((beta_hat_i - beta_true_i) ** 2) @ w)) / den


# Fixed smoothing parameters near the GCV optimum on pilot replicates, per case.
DEFAULT_LAMBDAS = {
    "poly": (1e-1, 1.0),
    "fourier": (10 ** -2.25, 1e-3),
}


@dataclass
class FitConfig:
    n_basis: int = 35
    lambda_beta: float | None = None
    lambda_b: float | None = None
    gcv: bool = False
    gcv_log10_beta: tuple = tuple(float(v) for v in np.linspace(-4, 2, 7))
    gcv_log10_b: tuple = tuple(float(v) for v in np.linspace(-4, 2, 7))
    denoise: bool | None = None      # None: reconstruct by FPCA when sigma_e > 0
    fpca_pve: float = 0.95
    max_iter: int = 500
    tol: float = 1e-6

    def lambdas(self, case: str) -> Lambdas:
        lb, lbb = DEFAULT_LAMBDAS[case]
        return Lambdas(lb if self.lambda_beta is None else self.lambda_beta,
                       lbb if self.lambda_b is None else self.lambda_b)


def case_bases(case: str, n_basis: int = 35):
    if case == "poly":
        b = make_bspline_basis((0.0, 1.0), 4, n_basis - 4)
    else:
        b = make_fourier_basis((0.0, 1.0), n_basis, 1.0)
    return b, b


def fit_dataset(data: Dataset, case: str, cfg: FitConfig, sigma_e: float = 0.0):
    """Optional FPCA denoising, then EM at fixed lambdas or by GCV."""
    from .fpca import choose_num_fpcs, fit_fpca, reconstruct
    from .selection import gcv_search, make_grid

    denoise = cfg.denoise if cfg.denoise is not None else sigma_e > 0
    if denoise:
        curves = data.curves()
        model = fit_fpca(curves, data.domain)
        M = choose_num_fpcs(model, pve=cfg.fpca_pve)
        data = data.with_curves(reconstruct(curves, model, M))
    bb, bz = case_bases(case, cfg.n_basis)
    db = build_design(data, bb, bz)
    pen = make_penalties(bb, bz, d2())
    em_cfg = EmConfig(max_iter=cfg.max_iter, tol=cfg.tol)
    if cfg.gcv:
        _, fit = gcv_search(db, pen, make_grid(cfg.gcv_log10_beta, cfg.gcv_log10_b), em_cfg,
                            beta_basis=bb, b_basis=bz)
    else:
        fit = run_em(db, pen, cfg.lambdas(case), em_cfg, beta_basis=bb, b_basis=bz)
    return fit, db


def replicate_metrics(scn: Scenario, cfg: FitConfig, seed_seq: np.random.SeedSequence) -> dict:
    """Generate, fit and score one replicate."""
    from .inference import beta_band, fit_intercept_ci, gamma_surface

    rng = np.random.Generator(np.random.PCG64(seed_seq))
    data, truth = generate(scn, rng)
    fit, db = fit_dataset(data, scn.case, cfg, scn.sigma_e)
    grid = np.linspace(0.0, 1.0, EVAL_GRID)
    fns = coefficients_to_functions(fit, grid)
    beta_true = truth.beta(grid)
    lo, hi = fit_intercept_ci(fit)
    band = beta_band(fit, np.array([0.25, 0.5, 0.75]))
    bt = truth.beta(band.grid)
    gam = gamma_surface(fit, np.linspace(0.0, 1.0, 51)).values
    scale = max(float(np.abs(gam).max()), 1e-300)
    gamma_ok = bool(np.max(np.abs(gam - gam.T)) <= 1e-12 * scale
                    and np.linalg.eigvalsh(gam).min() >= -1e-8 * scale)
    return {
        "alpha_hat": fit.alpha0,
        "rmise_beta": rmise_population(fns["beta_hat"], beta_true, grid),
        "rmise_beta_i": rmise_individual(fns["beta_i_hat"], truth.beta_i(grid), grid),
        "beta_hat": fns["beta_hat"],
        "ci_covers": bool(lo <= ALPHA_MEAN <= hi),
        "band_covers": [bool(l <= b <= u) for l, b, u in zip(band.lower, bt, band.upper)],
        "gamma_psd": gamma_ok,
        "converged": fit.convergence["converged"],
        "iterations": fit.convergence["iterations"],
        "lambda_beta": fit.lambdas.lambda_beta,
        "lambda_b": fit.lambdas.lambda_b,
        "sigma2_eps": fit.vc.sigma2_eps,
    }


def _safe_replicate(seed_seq, scn, cfg):
    try:
        return replicate_metrics(scn, cfg, seed_seq)
    except Exception as exc:          # replicate failures are counted, not fatal
        log.warning("replicate failed: %s", exc)
        return {"error": f"{type(exc).__name__}: {exc}"}


@dataclass
class StudyReport:
    scenario: dict
    replicates: int
    failures: int
    intercept_bias: float
    intercept_std: float
    intercept_rmse: float
    rmise_beta_mean: float
    rmise_beta_median: float
    rmise_beta_i_mean: float
    rmise_beta_i_median: float
    ci_coverage: float
    band_coverage: dict
    converged_fraction: float
    gamma_psd_fraction: float
    grid: list
    pointwise_mean: list
    pointwise_bias: list
    pointwise_std: list
    pointwise_rmse: list
    lambdas: list
    rng: str = RNG_ALGORITHM

    def to_dict(self) -> dict:
        return asdict(self)

    TABLE_COLUMNS = ("sigma_e", "sigma_eps", "n", "m_i", "Bias", "STD", "RMSE",
                     "RMISE_beta", "RMISE_beta_i")

    def table_row(self) -> dict:
        s = self.scenario
        return {"sigma_e": s["sigma_e"], "sigma_eps": s["sigma_eps"], "n": s["n"], "m_i": s["m"],
                "Bias": self.intercept_bias, "STD": self.intercept_std, "RMSE": self.intercept_rmse,
                "RMISE_beta": self.rmise_beta_mean, "RMISE_beta_i": self.rmise_beta_i_mean}


def _fmean(xs) -> float:
    return math.fsum(xs) / len(xs)


def aggregate(scn: Scenario, results: list, cfg: FitConfig | None = None) -> StudyReport:
    ok = [r for r in results if "error" not in r]
    if not ok:
        raise RuntimeError(f"all {len(results)} replicates failed")
    errs = [r["alpha_hat"] - ALPHA_MEAN for r in ok]
    bias = _fmean(errs)
    std = math.sqrt(_fmean([(e - bias) ** 2 for e in errs]))
    rmse = math.sqrt(_fmean([e * e for e in errs]))
    grid = np.linspace(0.0, 1.0, EVAL_GRID)
    B = np.stack([r["beta_hat"] for r in ok])
    truth = population_beta(scn.case, grid)
    pm = np.array([math.fsum(col) / len(ok) for col in B.T])
    pstd = np.array([math.sqrt(math.fsum((col - mu) ** 2) / len(ok)) for col, mu in zip(B.T, pm)])
    prmse = np.array([math.sqrt(math.fsum((col - b) ** 2) / len(ok)) for col, b in zip(B.T, truth)])
    rb = [r["rmise_beta"] for r in ok]
    rbi = [r["rmise_beta_i"] for r in ok]
    bands = np.array([r["band_covers"] for r in ok], dtype=float)
    return StudyReport(
        scenario=asdict(scn),
        replicates=len(results),
        failures=len(results) - len(ok),
        intercept_bias=bias, intercept_std=std, intercept_rmse=rmse,
        rmise_beta_mean=_fmean(rb), rmise_beta_median=float(statistics.median(rb)),
        rmise_beta_i_mean=_fmean(rbi), rmise_beta_i_median=float(statistics.median(rbi)),
        ci_coverage=_fmean([float(r["ci_covers"]) for r in ok]),
        band_coverage={str(t): float(c) for t, c in zip((0.25, 0.5, 0.75), bands.mean(axis=0))},
        converged_fraction=_fmean([float(r["converged"]) for r in ok]),
        gamma_psd_fraction=_fmean([float(r["gamma_psd"]) for r in ok]),
        grid=grid.tolist(), pointwise_mean=pm.tolist(), pointwise_bias=(pm - truth).tolist(),
        pointwise_std=pstd.tolist(), pointwise_rmse=prmse.tolist(),
        lambdas=sorted({(r["lambda_beta"], r["lambda_b"]) for r in ok}),
    )


def run_study(scn: Scenario, replicates: int = 100, cfg: FitConfig | None = None,
              threads: int = 1) -> StudyReport:
    """Replicate generate -> (denoise) -> fit -> score and aggregate."""
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    cfg = cfg or FitConfig()
    seeds = np.random.SeedSequence(scn.seed).spawn(replicates)
    results = pmap(partial(_safe_replicate, scn=scn, cfg=cfg), seeds, threads)
    return aggregate(scn, results, cfg)
