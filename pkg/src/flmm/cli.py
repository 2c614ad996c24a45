"""Command-line front end.

Subcommands ``fit``, ``gcv-scan``, ``simulate`` and ``fpca``. Exit codes:
0 success, 1 compute failure, 2 usage or input validation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .basis import BasisSystem, RoughnessOperator, make_bspline_basis, make_fourier_basis
from .design import QuadratureRule, build_design

log = logging.getLogger("flmm")

EXIT_OK, EXIT_COMPUTE, EXIT_USAGE = 0, 1, 2
DEFAULT_SEED = 1


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    """Fully resolved options for one invocation."""

    command: str
    out: str
    seed: int
    threads: int
    options: dict = field(default_factory=dict)

    def echo(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


# ---------------------------------------------------------------- spec parsing

def parse_basis_spec(spec: str, domain) -> BasisSystem:
    """``bspline:ORDER:N_INTERIOR`` or ``fourier:N_BASIS[:PERIOD]``."""
    parts = spec.split(":")
    try:
        if parts[0] == "bspline" and len(parts) == 3:
            return make_bspline_basis(domain, int(parts[1]), int(parts[2]))
        if parts[0] == "fourier" and len(parts) in (2, 3):
            period = float(parts[2]) if len(parts) == 3 else None
            return make_fourier_basis(domain, int(parts[1]), period)
    except ValueError as exc:
        raise UsageError(f"invalid basis spec {spec!r}: {exc}") from None
    raise UsageError(f"invalid basis spec {spec!r}; expected bspline:ORDER:N_INTERIOR "
                     "or fourier:N_BASIS[:PERIOD]")


def parse_penalty_spec(spec: str, basis: BasisSystem) -> RoughnessOperator:
    """``dK`` (K-th derivative) or ``harmonic[:OMEGA]``.

    Without OMEGA the harmonic operator uses 2 pi / period of a Fourier
    basis, or 2 pi / (domain length) otherwise.
    """
    try:
        if spec.startswith("d") and spec[1:].isdigit():
            op = RoughnessOperator("derivative", order=int(spec[1:]))
        elif spec == "harmonic" or spec.startswith("harmonic:"):
            if ":" in spec:
                omega = float(spec.split(":", 1)[1])
            else:
                omega = basis.omega if basis.kind == "fourier" else \
                    2 * math.pi / (basis.domain[1] - basis.domain[0])
            op = RoughnessOperator("harmonic", omega=omega)
        else:
            raise ValueError("expected dK or harmonic[:OMEGA]")
    except ValueError as exc:
        raise UsageError(f"invalid penalty spec {spec!r}: {exc}") from None
    if op.max_derivative > basis.max_derivative():
        raise UsageError(f"penalty {spec!r} needs derivative {op.max_derivative} but the "
                         f"basis only supports {basis.max_derivative()}")
    return op


def _float_list(text: str) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _domain(text: str) -> tuple:
    vals = _float_list(text)
    if len(vals) != 2 or not vals[0] < vals[1]:
        raise argparse.ArgumentTypeError(f"domain must be LO,HI with LO < HI, got {text!r}")
    return vals


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return v


# ---------------------------------------------------------------- parser

def _add_common(p):
    p.add_argument("--out", default=".", help="output directory (default: current)")
    p.add_argument("--seed", type=int, default=None, help="seed; FLMM_SEED is used when absent")
    p.add_argument("--threads", type=int, default=1, help="maximum worker processes")
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--tol", type=_positive_float, default=1e-6)


def _add_data(p):
    p.add_argument("--data", required=True, help="curves CSV: subject_id,visit_id,t,x")
    p.add_argument("--response", required=True, help="responses CSV: subject_id,visit_id,y")
    p.add_argument("--domain", type=_domain, default=None, help="LO,HI (default: data range)")
    p.add_argument("--basis", default="bspline:4:26", help="basis for beta (default bspline:4:26)")
    p.add_argument("--b-basis", default=None, help="basis for b_i (default: same as --basis)")
    p.add_argument("--penalty", default="d2", help="dK or harmonic[:OMEGA] (default d2)")
    p.add_argument("--b-penalty", default=None, help="penalty for b_i (default: same as --penalty)")
    p.add_argument("--quadrature", choices=("trapezoid", "gauss"), default="trapezoid")
    p.add_argument("--gauss-nodes", type=int, default=64, help="nodes for --quadrature gauss")
    p.add_argument("--denoise", action="store_true",
                   help="reconstruct covariates by FPCA before fitting")
    p.add_argument("--fpca-pve", type=float, default=0.95)
    p.add_argument("--log10-beta-grid", type=_float_list, default=None,
                   help="comma-separated log10 lambda_beta values for GCV")
    p.add_argument("--log10-b-grid", type=_float_list, default=None,
                   help="comma-separated log10 lambda_b values for GCV")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flmm", description="Functional linear mixed-effects models")
    parser.add_argument("--config", default=None, help="flat key=value file; flags override it")
    parser.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit at fixed lambdas or by GCV")
    _add_common(fit)
    _add_data(fit)
    fit.add_argument("--lambda-beta", type=_positive_float, default=None)
    fit.add_argument("--lambda-b", type=_positive_float, default=None)
    fit.add_argument("--gcv", action="store_true", help="select lambdas by GCV over the grid")
    fit.add_argument("--level", type=float, default=0.95)
    fit.add_argument("--eval-points", type=int, default=101)

    scan = sub.add_parser("gcv-scan", help="GCV surface over a lambda grid")
    _add_common(scan)
    _add_data(scan)
    scan.add_argument("--cold-start", action="store_true", help="disable warm starts along lambda_b")

    sim = sub.add_parser("simulate", help="Monte Carlo study")
    _add_common(sim)
    sim.add_argument("--case", choices=("poly", "fourier"), default="poly")
    sim.add_argument("--n", type=int, default=50)
    sim.add_argument("--m", type=int, default=5)
    sim.add_argument("--sigma-e", type=float, default=0.0)
    sim.add_argument("--sigma-eps", type=float, default=0.5)
    sim.add_argument("--replicates", type=int, default=100)
    sim.add_argument("--n-basis", type=int, default=35)
    sim.add_argument("--lambda-beta", type=_positive_float, default=None)
    sim.add_argument("--lambda-b", type=_positive_float, default=None)
    sim.add_argument("--gcv", action="store_true")
    sim.add_argument("--log10-beta-grid", type=_float_list, default=None)
    sim.add_argument("--log10-b-grid", type=_float_list, default=None)
    sim.add_argument("--denoise", choices=("auto", "yes", "no"), default="auto",
                     help="FPCA reconstruction of covariates (auto: when sigma_e > 0)")
    sim.add_argument("--fpca-pve", type=float, default=0.95)

    fp = sub.add_parser("fpca", help="FPCA of curves with PACE reconstruction")
    fp.add_argument("--out", default=".")
    fp.add_argument("--seed", type=int, default=None)
    fp.add_argument("--threads", type=int, default=1)
    fp.add_argument("--data", required=True, help="curves CSV: subject_id,visit_id,t,x")
    fp.add_argument("--domain", type=_domain, default=None)
    fp.add_argument("--mode", choices=("within", "pooled"), default="within")
    sel = fp.add_mutually_exclusive_group()
    sel.add_argument("--pve", type=float, default=None, help="cumulative PVE threshold (default 0.95)")
    sel.add_argument("--n-components", type=int, default=None)
    fp.add_argument("--grid-size", type=int, default=101)
    return parser


def read_config(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _apply_config(subparser, cfg: dict, path) -> None:
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for k, v in cfg.items():
        if k not in actions or k == "help":
            raise UsageError(f"{path}: unknown key {k!r} for this command")
        a = actions[k]
        if isinstance(a, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            if v.lower() not in _TRUE | _FALSE:
                raise UsageError(f"{path}: {k} expects a boolean, got {v!r}")
            defaults[k] = v.lower() in _TRUE
        else:
            defaults[k] = v    # converted by the action's type on parse
    subparser.set_defaults(**defaults)


def parse_and_validate(argv=None) -> RunConfig:
    """Parse flags (over an optional config file) into a validated RunConfig.

    Usage problems exit with status 2 via argparse or raise UsageError.
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = read_config(args.config)
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        _apply_config(subparser, cfg, args.config)
        args = parser.parse_args(argv)
    opts = vars(args).copy()
    command = opts.pop("command")
    opts.pop("config")
    opts.pop("log_level")
    out = opts.pop("out")
    threads = opts.pop("threads")
    seed = opts.pop("seed")
    if seed is None:
        env = os.environ.get("FLMM_SEED")
        try:
            seed = int(env) if env else DEFAULT_SEED
        except ValueError:
            raise UsageError(f"FLMM_SEED must be an integer, got {env!r}") from None
    if threads < 1:
        raise UsageError("--threads must be >= 1")
    if command in ("fit", "simulate") and opts["gcv"] and (
            opts["lambda_beta"] is not None or opts["lambda_b"] is not None):
        raise UsageError("--gcv cannot be combined with --lambda-beta/--lambda-b")
    for key in ("data", "response"):
        if key in opts and not Path(opts[key]).is_file():
            raise UsageError(f"--{key}: no such file {opts[key]}")
    if command == "simulate":
        if opts["replicates"] < 1 or opts["n"] < 1 or opts["m"] < 1:
            raise UsageError("--replicates, --n and --m must be >= 1")
    if command == "fpca" and opts["pve"] is None and opts["n_components"] is None:
        opts["pve"] = 0.95
    return RunConfig(command, out, seed, threads, opts)


# ---------------------------------------------------------------- commands

def _prepare(rc: RunConfig):
    """Ingest data, build bases, penalties and design blocks."""
    from .em import make_penalties
    from .fpca import choose_num_fpcs, fit_fpca, reconstruct
    from .io import ingest_dataset

    o = rc.options
    data = ingest_dataset(o["data"], o["response"], o["domain"])
    log.info("ingested %d subjects, %d visits", data.n, data.N)
    bb = parse_basis_spec(o["basis"], data.domain)
    bz = parse_basis_spec(o["b_basis"] or o["basis"], data.domain)
    op_b = parse_penalty_spec(o["penalty"], bb)
    op_z = parse_penalty_spec(o["b_penalty"] or o["penalty"], bz)
    if o["denoise"]:
        curves = data.curves()
        model = fit_fpca(curves, data.domain)
        M = choose_num_fpcs(model, pve=o["fpca_pve"])
        log.info("FPCA denoising with %d components", M)
        data = data.with_curves(reconstruct(curves, model, M))
    q = QuadratureRule("gauss", o["gauss_nodes"]) if o["quadrature"] == "gauss" else QuadratureRule()
    db = build_design(data, bb, bz, q)
    pen = make_penalties(bb, bz, op_b, op_z)
    return data, db, pen, bb, bz


def _grid(o):
    from .selection import DEFAULT_LOG10_B, DEFAULT_LOG10_BETA, make_grid
    return make_grid(o.get("log10_beta_grid") or DEFAULT_LOG10_BETA,
                     o.get("log10_b_grid") or DEFAULT_LOG10_B)


def _surface_csv(surface) -> str:
    from .io import csv_text
    return csv_text(("lambda_beta", "lambda_b", "gcv", "df", "converged"), surface.rows())


def _fit_files(fit, data, o) -> dict:
    from .em import coefficients_to_functions
    from .inference import beta_band, gamma_surface
    from .io import csv_text, dumps_json, fit_to_dict

    lo, hi = data.domain
    grid = np.linspace(lo, hi, o.get("eval_points", 101))
    band = beta_band(fit, grid, o.get("level", 0.95))
    fns = coefficients_to_functions(fit, grid)
    gam = gamma_surface(fit, grid)
    files = {
        "fit.json": dumps_json(fit_to_dict(fit)),
        "beta_band.csv": csv_text(("t", "beta_hat", "lower", "upper"),
                                  zip(grid, band.center, band.lower, band.upper)),
        "individual_slopes.csv": csv_text(
            ("subject_id", "t", "b_hat", "beta_i_hat"),
            ((sid, t, b, bi) for sid, brow, birow in zip(fit.subject_ids, fns["b_hat"], fns["beta_i_hat"])
             for t, b, bi in zip(grid, brow, birow))),
        "gamma_surface.csv": csv_text(("s", "t", "gamma"),
                                      ((s, t, gam.values[a, b]) for a, s in enumerate(grid)
                                       for b, t in enumerate(grid))),
    }
    return files


def cmd_fit(rc: RunConfig) -> dict:
    from .em import EmConfig, Lambdas, run_em
    from .inference import fit_intercept_ci
    from .selection import gcv_search

    o = rc.options
    data, db, pen, bb, bz = _prepare(rc)
    em_cfg = EmConfig(max_iter=o["max_iter"], tol=o["tol"])
    files = {}
    if o["gcv"]:
        surface, fit = gcv_search(db, pen, _grid(o), em_cfg, beta_basis=bb, b_basis=bz,
                                  threads=rc.threads)
        files["gcv_surface.csv"] = _surface_csv(surface)
    else:
        lam = Lambdas(o["lambda_beta"] if o["lambda_beta"] is not None else 1.0,
                      o["lambda_b"] if o["lambda_b"] is not None else 1.0)
        fit = run_em(db, pen, lam, em_cfg, beta_basis=bb, b_basis=bz)
    lo, hi = fit_intercept_ci(fit, o["level"])
    log.info("alpha0 = %.6g, %g%% CI [%.6g, %.6g]; lambdas (%g, %g); df %.4g; converged %s",
             fit.alpha0, 100 * o["level"], lo, hi, fit.lambdas.lambda_beta, fit.lambdas.lambda_b,
             fit.df, fit.convergence["converged"])
    files.update(_fit_files(fit, data, o))
    return files


def cmd_gcv_scan(rc: RunConfig) -> dict:
    from .em import EmConfig
    from .io import dumps_json, fit_to_dict
    from .selection import gcv_search

    o = rc.options
    data, db, pen, bb, bz = _prepare(rc)
    surface, fit = gcv_search(db, pen, _grid(o), EmConfig(max_iter=o["max_iter"], tol=o["tol"]),
                              beta_basis=bb, b_basis=bz, warm_start=not o["cold_start"],
                              threads=rc.threads)
    best = surface.best_lambdas
    log.info("GCV minimum at lambda_beta=%g, lambda_b=%g", best.lambda_beta, best.lambda_b)
    return {"gcv_surface.csv": _surface_csv(surface), "fit.json": dumps_json(fit_to_dict(fit))}


def cmd_simulate(rc: RunConfig) -> dict:
    from .io import csv_text, dumps_json
    from .sim import FitConfig, Scenario, StudyReport, run_study

    o = rc.options
    scn = Scenario(case=o["case"], n=o["n"], m=o["m"], sigma_e=o["sigma_e"],
                   sigma_eps=o["sigma_eps"], seed=rc.seed)
    cfg = FitConfig(n_basis=o["n_basis"], lambda_beta=o["lambda_beta"], lambda_b=o["lambda_b"],
                    gcv=o["gcv"], denoise={"auto": None, "yes": True, "no": False}[o["denoise"]],
                    fpca_pve=o["fpca_pve"], max_iter=o["max_iter"], tol=o["tol"])
    if o["log10_beta_grid"]:
        cfg.gcv_log10_beta = o["log10_beta_grid"]
    if o["log10_b_grid"]:
        cfg.gcv_log10_b = o["log10_b_grid"]
    rep = run_study(scn, o["replicates"], cfg, rc.threads)
    row = rep.table_row()
    log.info("%s", ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return {
        "study_report.json": dumps_json(rep.to_dict()),
        "study_report.csv": csv_text(StudyReport.TABLE_COLUMNS, [row]),
        "beta_pointwise.csv": csv_text(("t", "mean", "bias", "std", "rmse"),
                                       zip(rep.grid, rep.pointwise_mean, rep.pointwise_bias,
                                           rep.pointwise_std, rep.pointwise_rmse)),
    }


def cmd_fpca(rc: RunConfig) -> dict:
    from .fpca import choose_num_fpcs, fit_fpca, reconstruct
    from .io import csv_text, dumps_json, ingest_curves

    o = rc.options
    curves = ingest_curves(o["data"])
    model = fit_fpca(curves, o["domain"], mode=o["mode"], n_grid=o["grid_size"])
    M = choose_num_fpcs(model, pve=o["pve"], fixed=o["n_components"])
    log.info("FPCA: %d curves, %d components, noise variance %.4g", len(curves), M, model.noise_var)
    rec = reconstruct(curves, model, M)
    header = ("t", "mean") + tuple(f"phi_{k + 1}" for k in range(M))
    eig = zip(model.grid, model.mean, *model.eigenfunctions[:M])
    d = model.to_dict()
    d["n_components"] = M
    return {
        "fpca_model.json": dumps_json(d),
        "fpca_eigenfunctions.csv": csv_text(header, eig),
        "reconstructed.csv": csv_text(("subject_id", "visit_id", "t", "x"),
                                      ((c.subject_id, c.visit_id, t, x) for c in rec
                                       for t, x in zip(c.t, c.x))),
    }


COMMANDS = {"fit": cmd_fit, "gcv-scan": cmd_gcv_scan, "simulate": cmd_simulate, "fpca": cmd_fpca}


def main(argv=None) -> int:
    from .io import DataFormatError, emit_outputs

    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--log-level", default="INFO")
    level = pre.parse_known_args(argv)[0].log_level
    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        rc = parse_and_validate(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    log.info("run config: %s", rc.echo())
    try:
        files = COMMANDS[rc.command](rc)
    except (UsageError, DataFormatError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except Exception as exc:                      # noqa: BLE001 - reported as a compute failure
        log.error("%s failed: %s: %s", rc.command, type(exc).__name__, exc)
        return EXIT_COMPUTE
    try:
        written = emit_outputs(files, rc.out)
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_COMPUTE
    for p in written:
        log.info("wrote %s", p)
    return EXIT_OK
