"""Design blocks (Y_i, W_i, Z_i) from functional covariate samples."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import block_diag

from .basis import BasisSystem, eval_basis


@dataclass(frozen=True)
class FunctionalSample:
    subject_id: str
    visit_id: str
    t: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        x = np.asarray(self.x, dtype=np.float64)
        if t.ndim != 1 or t.shape != x.shape:
            raise ValueError(f"curve {self.subject_id}/{self.visit_id}: t and x must be 1-D of equal length")
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise ValueError(f"curve {self.subject_id}/{self.visit_id}: grid must be strictly increasing")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(x))):
            raise ValueError(f"curve {self.subject_id}/{self.visit_id}: non-finite values")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)


@dataclass(frozen=True)
class Visit:
    y: float
    curve: FunctionalSample


@dataclass(frozen=True)
class Subject:
    subject_id: str
    visits: tuple[Visit, ...]


@dataclass(frozen=True)
class Dataset:
    subjects: tuple[Subject, ...]
    domain: tuple[float, float]

    def __post_init__(self):
        if len(self.subjects) == 0:
            raise ValueError("dataset needs at least one subject")
        lo, hi = self.domain
        for s in self.subjects:
            if len(s.visits) == 0:
                raise ValueError(f"subject {s.subject_id} has no visits")
            for v in s.visits:
                t = v.curve.t
                if t[0] < lo or t[-1] > hi:
                    raise ValueError(
                        f"curve {s.subject_id}/{v.curve.visit_id} lies outside domain {self.domain}")

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def m(self) -> list[int]:
        return [len(s.visits) for s in self.subjects]

    @property
    def N(self) -> int:
        return sum(self.m)

    def curves(self) -> list[FunctionalSample]:
        return [v.curve for s in self.subjects for v in s.visits]

    def with_curves(self, curves: Sequence[FunctionalSample]) -> "Dataset":
        """Copy with curves replaced in subject-major, visit-minor order."""
        it = iter(curves)
        subjects = tuple(
            Subject(s.subject_id, tuple(Visit(v.y, next(it)) for v in s.visits))
            for s in self.subjects)
        return Dataset(subjects, self.domain)


@dataclass(frozen=True)
class QuadratureRule:
    """``trapezoid`` on the observed grid, or ``gauss`` with ``n_nodes``
    Gauss-Legendre nodes applied to a cubic interpolant of the sample."""

    kind: str = "trapezoid"
    n_nodes: int = 0

    def __post_init__(self):
        if self.kind not in ("trapezoid", "gauss"):
            raise ValueError(f"unknown quadrature {self.kind!r}")
        if self.kind == "gauss" and self.n_nodes < 2:
            raise ValueError("gauss quadrature needs n_nodes >= 2")


TRAPEZOID = QuadratureRule()


def trapezoid_weights(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    w = np.zeros_like(t)
    dt = np.diff(t)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    return w


def _rule_matrix(b: BasisSystem, t: np.ndarray, q: QuadratureRule) -> np.ndarray:
    """Matrix M with ``M @ x`` = inner products of the basis with the sample x on grid t."""
    if len(t) < 2:
        raise ValueError("sample grid needs at least 2 points")
    if q.kind == "trapezoid":
        return (eval_basis(b, t, 0) * trapezoid_weights(t)[:, None]).T
    nodes, weights = np.polynomial.legendre.leggauss(q.n_nodes)
    a, c = t[0], t[-1]
    nodes = 0.5 * (a + c) + 0.5 * (c - a) * nodes
    weights = 0.5 * (c - a) * weights
    # interpolation is linear in x: build its matrix from unit vectors
    if len(t) >= 4:
        interp = CubicSpline(t, np.eye(len(t)), axis=0)(nodes)
    else:
        interp = np.stack([np.interp(nodes, t, e) for e in np.eye(len(t))], axis=1)
    return (eval_basis(b, nodes, 0) * weights[:, None]).T @ interp


def inner_product(b: BasisSystem, s: FunctionalSample, q: QuadratureRule = TRAPEZOID) -> np.ndarray:
    """Approximate the integrals of phi_j(t) X(t) over the sampled span."""
    lo, hi = b.domain
    if s.t[0] < lo or s.t[-1] > hi:
        raise ValueError(f"sample {s.subject_id}/{s.visit_id} outside basis domain")
    return _rule_matrix(b, s.t, q) @ s.x


@dataclass
class DesignBlocks:
    Y: list[np.ndarray]
    W: list[np.ndarray]
    Z: list[np.ndarray]
    subject_ids: list[str] = field(default_factory=list)
    visit_ids: list[list[str]] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.Y)

    @property
    def m(self) -> list[int]:
        return [len(y) for y in self.Y]

    @property
    def N(self) -> int:
        return int(sum(self.m))

    @property
    def p(self) -> int:
        return self.W[0].shape[1]

    @property
    def q(self) -> int:
        return self.Z[0].shape[1]

    def stacked_Y(self) -> np.ndarray:
        return np.concatenate(self.Y)

    def stacked_W(self) -> np.ndarray:
        return np.vstack(self.W)

    def blockdiag_Z(self) -> np.ndarray:
        return block_diag(*self.Z)

    def dump(self, path) -> None:
        """Diagnostic ``.npz`` dump of every block."""
        arrays = {}
        for i in range(self.n):
            arrays[f"Y_{i}"] = self.Y[i]
            arrays[f"W_{i}"] = self.W[i]
            arrays[f"Z_{i}"] = self.Z[i]
        np.savez(path, subject_ids=np.array(self.subject_ids), **arrays)


def build_design(d: Dataset, beta_basis: BasisSystem, b_basis: BasisSystem,
                 q: QuadratureRule = TRAPEZOID, m: Sequence[int] | None = None) -> DesignBlocks:
    """Per-subject response vectors and design matrices.

    Row j of W_i is ``(1, <phi, X_ij>)``; row j of Z_i is ``(1, <psi, X_ij>)``.
    ``m`` optionally declares the visit count per subject and is checked.
    """
    if m is not None and list(m) != d.m:
        raise ValueError(f"declared visit counts {list(m)} disagree with data {d.m}")
    cache: dict[bytes, tuple[np.ndarray, np.ndarray]] = {}

    def mats(t: np.ndarray):
        key = t.tobytes()
        if key not in cache:
            cache[key] = (_rule_matrix(beta_basis, t, q), _rule_matrix(b_basis, t, q))
        return cache[key]

    for basis in (beta_basis, b_basis):
        lo, hi = basis.domain
        if d.domain[0] < lo - 1e-12 * max(1, abs(lo)) or d.domain[1] > hi + 1e-12 * max(1, abs(hi)):
            raise ValueError(f"data domain {d.domain} exceeds basis domain {basis.domain}")

    Y, W, Z = [], [], []
    for s in d.subjects:
        mi = len(s.visits)
        Yi = np.empty(mi)
        Wi = np.ones((mi, 1 + beta_basis.size))
        Zi = np.ones((mi, 1 + b_basis.size))
        for j, v in enumerate(s.visits):
            Mb, Mz = mats(v.curve.t)
            Yi[j] = v.y
            Wi[j, 1:] = Mb @ v.curve.x
            Zi[j, 1:] = Mz @ v.curve.x
        Y.append(Yi)
        W.append(Wi)
        Z.append(Zi)
    return DesignBlocks(Y, W, Z, [s.subject_id for s in d.subjects],
                        [[v.curve.visit_id for v in s.visits] for s in d.subjects])
