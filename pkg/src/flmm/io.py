"""CSV ingestion, FitResult (de)serialization and atomic output writing."""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .basis import BasisSystem, RoughnessOperator
from .design import Dataset, FunctionalSample, Subject, Visit
from .em import FitResult, Lambdas, VarianceComponents

FIT_SCHEMA = "flmm.fit/1"


class DataFormatError(ValueError):
    """Malformed input CSV; the message names the file and line."""


def _id_key(s: str):
    return (0, int(s), "") if s.isdigit() else (1, 0, s)


def _read_rows(path, required):
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError(f"{path}: empty file, header row required") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise DataFormatError(f"{path}:1: header lacks column(s) {', '.join(missing)}")
        pos = {c: header.index(c) for c in required}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, {c: row[i].strip() for c, i in pos.items()}


def _num(path, lineno, field, value) -> float:
    try:
        v = float(value)
    except ValueError:
        raise DataFormatError(f"{path}:{lineno}: non-numeric {field} {value!r}") from None
    if not math.isfinite(v):
        raise DataFormatError(f"{path}:{lineno}: non-finite {field} {value!r}")
    return v


def ingest_dataset(curves_csv, responses_csv, domain=None) -> Dataset:
    """Join a curves CSV (subject_id, visit_id, t, x) with a responses CSV
    (subject_id, visit_id, y) into a validated, sorted Dataset."""
    curves: dict = OrderedDict()
    last_t: dict = {}
    seen: dict = {}
    for lineno, r in _read_rows(curves_csv, ("subject_id", "visit_id", "t", "x")):
        key = (r["subject_id"], r["visit_id"])
        t = _num(curves_csv, lineno, "t", r["t"])
        x = _num(curves_csv, lineno, "x", r["x"])
        if (key, t) in seen:
            raise DataFormatError(
                f"{curves_csv}:{lineno}: duplicate t={r['t']} for subject {key[0]} visit {key[1]} "
                f"(first at line {seen[(key, t)]})")
        seen[(key, t)] = lineno
        if key in last_t and t < last_t[key]:
            raise DataFormatError(
                f"{curves_csv}:{lineno}: t={r['t']} decreases within subject {key[0]} visit {key[1]}")
        last_t[key] = t
        curves.setdefault(key, ([], []))
        curves[key][0].append(t)
        curves[key][1].append(x)
    responses: dict = {}
    for lineno, r in _read_rows(responses_csv, ("subject_id", "visit_id", "y")):
        key = (r["subject_id"], r["visit_id"])
        if key in responses:
            raise DataFormatError(f"{responses_csv}:{lineno}: duplicate response for subject {key[0]} visit {key[1]}")
        responses[key] = _num(responses_csv, lineno, "y", r["y"])
    orphan_r = sorted(set(responses) - set(curves))
    if orphan_r:
        raise DataFormatError(f"{responses_csv}: responses without curves: " +
                              ", ".join(f"({s}, {v})" for s, v in orphan_r))
    orphan_c = sorted(set(curves) - set(responses))
    if orphan_c:
        raise DataFormatError(f"{curves_csv}: curves without responses: " +
                              ", ".join(f"({s}, {v})" for s, v in orphan_c))
    if not curves:
        raise DataFormatError(f"{curves_csv}: no data rows")
    by_subject: dict = {}
    for (sid, vid) in curves:
        by_subject.setdefault(sid, []).append(vid)
    if domain is None:
        domain = (min(c[0][0] for c in curves.values()), max(c[0][-1] for c in curves.values()))
    subjects = []
    for sid in sorted(by_subject, key=_id_key):
        visits = []
        for vid in sorted(by_subject[sid], key=_id_key):
            t, x = curves[(sid, vid)]
            visits.append(Visit(responses[(sid, vid)], FunctionalSample(sid, vid, np.array(t), np.array(x))))
        subjects.append(Subject(sid, tuple(visits)))
    return Dataset(tuple(subjects), (float(domain[0]), float(domain[1])))


def ingest_curves(curves_csv) -> list[FunctionalSample]:
    """Curves only (for FPCA), in sorted subject/visit order."""
    acc: dict = OrderedDict()
    seen = set()
    for lineno, r in _read_rows(curves_csv, ("subject_id", "visit_id", "t", "x")):
        key = (r["subject_id"], r["visit_id"])
        t = _num(curves_csv, lineno, "t", r["t"])
        if (key, t) in seen:
            raise DataFormatError(f"{curves_csv}:{lineno}: duplicate t={r['t']} for subject {key[0]} visit {key[1]}")
        seen.add((key, t))
        acc.setdefault(key, ([], []))
        if acc[key][0] and t < acc[key][0][-1]:
            raise DataFormatError(f"{curves_csv}:{lineno}: t={r['t']} decreases within subject {key[0]} visit {key[1]}")
        acc[key][0].append(t)
        acc[key][1].append(_num(curves_csv, lineno, "x", r["x"]))
    keys = sorted(acc, key=lambda k: (_id_key(k[0]), _id_key(k[1])))
    return [FunctionalSample(s, v, np.array(acc[(s, v)][0]), np.array(acc[(s, v)][1])) for s, v in keys]


def fit_to_dict(fit: FitResult) -> dict:
    return {
        "schema": FIT_SCHEMA,
        "beta_basis": fit.beta_basis.to_dict(),
        "b_basis": fit.b_basis.to_dict(),
        "penalty_beta": fit.op_beta.to_dict() if fit.op_beta else None,
        "penalty_b": fit.op_b.to_dict() if fit.op_b else None,
        "lambdas": {"lambda_beta": fit.lambdas.lambda_beta, "lambda_b": fit.lambdas.lambda_b},
        "theta": fit.theta.tolist(),
        "subject_ids": list(fit.subject_ids),
        "xi": fit.xi.tolist(),
        "variance_components": {
            "sigma2_a": fit.vc.sigma2_a,
            "sigma2_eps": fit.vc.sigma2_eps,
            "D": fit.vc.D.tolist(),
        },
        "df": fit.df,
        "gcv": fit.gcv,
        "cov_theta": fit.cov_theta.tolist(),
        "convergence": dict(fit.convergence),
    }


def fit_from_dict(d: dict) -> FitResult:
    if d.get("schema") != FIT_SCHEMA:
        raise ValueError(f"unsupported fit schema {d.get('schema')!r}")
    vc = d["variance_components"]
    return FitResult(
        theta=np.array(d["theta"], dtype=np.float64),
        xi=np.array(d["xi"], dtype=np.float64).reshape(len(d["subject_ids"]), -1),
        vc=VarianceComponents(vc["sigma2_a"], vc["sigma2_eps"], np.array(vc["D"], dtype=np.float64)),
        lambdas=Lambdas(d["lambdas"]["lambda_beta"], d["lambdas"]["lambda_b"]),
        df=d["df"], gcv=d["gcv"],
        cov_theta=np.array(d["cov_theta"], dtype=np.float64),
        convergence=dict(d["convergence"]),
        beta_basis=BasisSystem.from_dict(d["beta_basis"]),
        b_basis=BasisSystem.from_dict(d["b_basis"]),
        op_beta=RoughnessOperator.from_dict(d["penalty_beta"]) if d["penalty_beta"] else None,
        op_b=RoughnessOperator.from_dict(d["penalty_b"]) if d["penalty_b"] else None,
        subject_ids=list(d["subject_ids"]),
    )


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def load_fit(path) -> FitResult:
    with open(path, "r", encoding="utf-8") as fh:
        return fit_from_dict(json.load(fh))


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def csv_text(header, rows) -> str:
    lines = [",".join(header)]
    for r in rows:
        if isinstance(r, dict):
            r = [r[h] for h in header]
        lines.append(",".join(_cell(v) for v in r))
    return "\n".join(lines) + "\n"


def emit_outputs(files: dict, out_dir) -> list[Path]:
    """Write ``{filename: text}`` into ``out_dir``.

    All files are first written to temporaries in the same directory and
    only renamed into place once every write succeeded.
    """
    if not files:
        raise ValueError("nothing to write")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    staged = []
    tmp = None
    try:
        for name in sorted(files):
            fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=out_dir)
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(files[name])
            staged.append((tmp, out_dir / name))
            tmp = None
    except Exception as exc:
        for path in [t for t, _ in staged] + ([tmp] if tmp else []):
            os.unlink(path)
        if isinstance(exc, OSError):
            raise OSError(f"failed writing outputs in {out_dir}: {exc}") from exc
        raise
    for tmp, final in staged:
        os.replace(tmp, final)
    return [final for _, final in staged]
