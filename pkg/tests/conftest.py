import numpy as np
import pytest

from flmm.basis import d2, make_bspline_basis
from flmm.design import Dataset, FunctionalSample, Subject, Visit, build_design
from flmm.em import Lambdas, VarianceComponents, make_penalties


def tiny_dataset(n=2, m=3, seed=0, n_grid=21, noise=1.0):
    """Random smooth curves and unstructured responses on [0, 1]."""
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, n_grid)
    subjects = []
    for i in range(n):
        visits = []
        for j in range(m):
            x = rng.normal() + rng.normal() * np.sin(np.pi * t) + rng.normal() * t ** 2
            y = 3.0 + noise * rng.normal()
            visits.append(Visit(float(y), FunctionalSample(f"s{i}", f"v{j}", t, x)))
        subjects.append(Subject(f"s{i}", tuple(visits)))
    return Dataset(tuple(subjects), (0.0, 1.0))


def tiny_problem(n=2, m=3, size=4, seed=0, lam=(0.5, 0.3)):
    """(db, pen, lam, vc, basis) for a small random instance with J = K = size."""
    rng = np.random.default_rng(seed + 1000)
    b = make_bspline_basis((0.0, 1.0), 4 if size >= 4 else 3, size - (4 if size >= 4 else 3))
    db = build_design(tiny_dataset(n, m, seed), b, b)
    pen = make_penalties(b, b, d2())
    A = rng.normal(size=(size, size))
    vc = VarianceComponents(0.7, 0.4, A @ A.T / size + 0.2 * np.eye(size))
    return db, pen, Lambdas(*lam), vc, b


@pytest.fixture
def problem():
    return tiny_problem()


def rich_problem(n=40, m=4, seed=0):
    """Curves spanning six functions, a random intercept and one random slope.

    EM converges here in a few dozen iterations; returns (db, pen, beta_basis, b_basis).
    """
    from flmm.basis import make_fourier_basis
    from flmm.design import DesignBlocks

    rng = np.random.default_rng(seed)
    bb = make_bspline_basis((0.0, 1.0), 4, 0)
    bz = make_fourier_basis((0.0, 1.0), 1, 1.0)
    t = np.linspace(0, 1, 41)
    F = np.stack([np.ones_like(t), t, t ** 2, np.sin(np.pi * t), np.cos(3 * t), np.exp(-2 * t)])
    subjects = []
    for i in range(n):
        vs = tuple(Visit(0.0, FunctionalSample(f"s{i}", f"v{j}", t, rng.normal(size=6) @ F))
                   for j in range(m))
        subjects.append(Subject(f"s{i}", vs))
    db = build_design(Dataset(tuple(subjects), (0.0, 1.0)), bb, bz)
    theta = np.array([3.0, 1.0, 2.0, -1.0, 0.5])
    Y = [W @ theta + Z @ np.r_[rng.normal(0, 0.7), rng.normal(0, 0.5)] + rng.normal(0, 0.3, m)
         for W, Z in zip(db.W, db.Z)]
    db = DesignBlocks(Y, db.W, db.Z, db.subject_ids, db.visit_ids)
    return db, make_penalties(bb, bz, d2()), bb, bz


CURVES_HEADER = "subject_id,visit_id,t,x\n"
RESP_HEADER = "subject_id,visit_id,y\n"


def write_dataset(tmp_path, data):
    curves = [CURVES_HEADER]
    resp = [RESP_HEADER]
    for s in data.subjects:
        for v in s.visits:
            curves += [f"{s.subject_id},{v.curve.visit_id},{float(t)!r},{float(x)!r}\n"
                       for t, x in zip(v.curve.t, v.curve.x)]
            resp.append(f"{s.subject_id},{v.curve.visit_id},{v.y!r}\n")
    c, r = tmp_path / "curves.csv", tmp_path / "y.csv"
    c.write_text("".join(curves))
    r.write_text("".join(resp))
    return str(c), str(r)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
