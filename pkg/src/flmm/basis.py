"""Basis systems (clamped B-spline, Fourier) and roughness penalties."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

_DOMAIN_RTOL = 1e-12
# 7-point Gauss-Legendre is exact for degree <= 13 polynomials
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(7)


@dataclass(frozen=True)
class BasisSystem:
    """An evaluable family of basis functions on a closed interval.

    ``kind`` is ``"bspline"`` (clamped, with ``order`` and ``interior_knots``)
    or ``"fourier"`` (``n_basis`` odd, ``period``). Fourier functions are
    ordered ``1, sin(wt), cos(wt), sin(2wt), ...`` and scaled to unit L2 norm
    over one period.
    """

    kind: str
    domain: tuple[float, float]
    order: int = 0
    interior_knots: tuple[float, ...] = ()
    n_basis: int = 0
    period: float = 0.0
    _knots: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        lo, hi = (float(v) for v in self.domain)
        if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
            raise ValueError(f"degenerate domain {self.domain!r}")
        object.__setattr__(self, "domain", (lo, hi))
        if self.kind == "bspline":
            if self.order < 2:
                raise ValueError(f"B-spline order must be >= 2, got {self.order}")
            ik = tuple(float(k) for k in self.interior_knots)
            if any(not (lo < k < hi) for k in ik):
                raise ValueError("interior knots must lie strictly inside the domain")
            if any(b < a for a, b in zip(ik, ik[1:])):
                raise ValueError("interior knots must be nondecreasing")
            object.__setattr__(self, "interior_knots", ik)
            knots = np.r_[[lo] * self.order, ik, [hi] * self.order].astype(np.float64)
            knots.setflags(write=False)
            object.__setattr__(self, "_knots", knots)
        elif self.kind == "fourier":
            if self.n_basis < 1 or self.n_basis % 2 == 0:
                raise ValueError(f"Fourier basis size must be odd, got {self.n_basis}")
            if not self.period > 0:
                raise ValueError("Fourier period must be positive")
            object.__setattr__(self, "period", float(self.period))
            object.__setattr__(self, "_knots", np.empty(0))
        else:
            raise ValueError(f"unknown basis kind {self.kind!r}")

    @property
    def size(self) -> int:
        if self.kind == "bspline":
            return self.order + len(self.interior_knots)
        return self.n_basis

    @property
    def knots(self) -> np.ndarray:
        """Full clamped knot vector (B-spline only)."""
        return self._knots

    @property
    def omega(self) -> float:
        return 2.0 * math.pi / self.period

    def max_derivative(self) -> int:
        """Highest derivative with a square-integrable (piecewise) value."""
        return self.order - 1 if self.kind == "bspline" else 3

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "domain": list(self.domain)}
        if self.kind == "bspline":
            d.update(order=self.order, interior_knots=list(self.interior_knots))
        else:
            d.update(n_basis=self.n_basis, period=self.period)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSystem":
        if d["kind"] == "bspline":
            return cls("bspline", tuple(d["domain"]), order=int(d["order"]),
                       interior_knots=tuple(d["interior_knots"]))
        return cls("fourier", tuple(d["domain"]), n_basis=int(d["n_basis"]),
                   period=float(d["period"]))

    def __call__(self, t, deriv: int = 0) -> np.ndarray:
        return eval_basis(self, t, deriv)


def make_bspline_basis(domain, order: int = 4, n_interior: int = 0) -> BasisSystem:
    """Clamped B-spline basis with ``n_interior`` equispaced interior knots."""
    if n_interior < 0:
        raise ValueError("n_interior must be >= 0")
    lo, hi = (float(v) for v in domain)
    if not hi > lo:
        raise ValueError(f"degenerate domain {domain!r}")
    interior = np.linspace(lo, hi, n_interior + 2)[1:-1]
    return BasisSystem("bspline", (lo, hi), order=order, interior_knots=tuple(interior.tolist()))


def make_fourier_basis(domain, n_basis: int, period: float | None = None) -> BasisSystem:
    lo, hi = (float(v) for v in domain)
    if period is None:
        period = hi - lo
    return BasisSystem("fourier", (lo, hi), n_basis=n_basis, period=period)


def _check_grid(b: BasisSystem, t) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    lo, hi = b.domain
    tol = _DOMAIN_RTOL * max(1.0, abs(lo), abs(hi))
    if t.size and (t.min() < lo - tol or t.max() > hi + tol):
        raise ValueError(f"evaluation points outside domain [{lo}, {hi}]")
    return np.ascontiguousarray(np.clip(t, lo, hi))


def eval_basis(b: BasisSystem, t, deriv: int = 0) -> np.ndarray:
    """Matrix with row i equal to the ``deriv``-th derivative of every basis
    function at ``t[i]``."""
    if deriv not in (0, 1, 2, 3):
        raise ValueError(f"derivative order must be 0..3, got {deriv}")
    t = _check_grid(b, t)
    if b.kind == "bspline":
        return kernels.bspline_design(b.knots, b.order, t, deriv)
    return _fourier_design(b, t, deriv)


def _fourier_design(b: BasisSystem, t: np.ndarray, deriv: int) -> np.ndarray:
    P, w = b.period, b.omega
    out = np.empty((len(t), b.n_basis))
    out[:, 0] = 1.0 / math.sqrt(P) if deriv == 0 else 0.0
    scale = math.sqrt(2.0 / P)
    lo = b.domain[0]
    for k in range(1, (b.n_basis - 1) // 2 + 1):
        arg = k * w * (t - lo)
        s, c = np.sin(arg), np.cos(arg)
        # d^r/dt^r of (sin, cos) cycles with period 4
        amp = scale * (k * w) ** deriv
        ds, dc = [(s, c), (c, -s), (-s, -c), (-c, s)][deriv]
        out[:, 2 * k - 1] = amp * ds
        out[:, 2 * k] = amp * dc
    return out


@dataclass(frozen=True)
class RoughnessOperator:
    """``derivative`` (D^order) or ``harmonic`` (D^3 + omega^2 D)."""

    kind: str
    order: int = 2
    omega: float = 0.0

    def __post_init__(self):
        if self.kind == "derivative":
            if self.order < 1:
                raise ValueError("derivative penalty order must be >= 1")
        elif self.kind == "harmonic":
            if not self.omega > 0:
                raise ValueError("harmonic operator needs omega > 0")
        else:
            raise ValueError(f"unknown operator {self.kind!r}")

    @property
    def max_derivative(self) -> int:
        return self.order if self.kind == "derivative" else 3

    def apply(self, b: BasisSystem, t) -> np.ndarray:
        """Rows of (L phi_j)(t_i)."""
        if self.kind == "derivative":
            return eval_basis(b, t, self.order)
        return eval_basis(b, t, 3) + self.omega ** 2 * eval_basis(b, t, 1)

    def to_dict(self) -> dict:
        if self.kind == "derivative":
            return {"kind": "derivative", "order": self.order}
        return {"kind": "harmonic", "omega": self.omega}

    @classmethod
    def from_dict(cls, d: dict) -> "RoughnessOperator":
        if d["kind"] == "derivative":
            return cls("derivative", order=int(d["order"]))
        return cls("harmonic", omega=float(d["omega"]))


def d2() -> RoughnessOperator:
    return RoughnessOperator("derivative", order=2)


def harmonic(omega: float) -> RoughnessOperator:
    return RoughnessOperator("harmonic", omega=omega)


def penalty_quadrature(b: BasisSystem) -> tuple[np.ndarray, np.ndarray]:
    """Composite 7-point Gauss-Legendre nodes/weights suited to ``b``.

    One panel per knot span for B-splines; for Fourier bases, panels of at
    most an eighth of the shortest wavelength present in the products.
    """
    lo, hi = b.domain
    if b.kind == "bspline":
        breaks = np.unique(np.r_[lo, b.interior_knots, hi])
    else:
        n_harm = max(1, (b.n_basis - 1) // 2)
        per_period = 16 * n_harm
        n_panels = max(8, int(math.ceil(per_period * (hi - lo) / b.period)))
        breaks = np.linspace(lo, hi, n_panels + 1)
    a, c = breaks[:-1], breaks[1:]
    half = 0.5 * (c - a)
    nodes = (0.5 * (a + c))[:, None] + half[:, None] * _GL_NODES[None, :]
    weights = half[:, None] * _GL_WEIGHTS[None, :]
    return nodes.ravel(), weights.ravel()


def penalty_matrix(b: BasisSystem, op: RoughnessOperator, quad=None) -> np.ndarray:
    """Gram matrix of L phi_j under the integral over the domain.

    ``quad`` is an optional ``(nodes, weights)`` pair; the default is
    :func:`penalty_quadrature`.
    """
    if op.max_derivative > b.max_derivative():
        raise ValueError(
            f"operator needs derivative {op.max_derivative} but a {b.kind} basis "
            f"of this order only supports {b.max_derivative()}")
    nodes, weights = quad if quad is not None else penalty_quadrature(b)
    L = op.apply(b, nodes)
    G = L.T @ (weights[:, None] * L)
    # exact symmetry
    return np.triu(G) + np.triu(G, 1).T


def null_space_dim(G: np.ndarray, rtol: float = 1e-9) -> int:
    ev = np.linalg.eigvalsh(G)
    return int(np.sum(ev <= rtol * max(ev.max(), 0.0)))


def coefficients_for_line(b: BasisSystem, intercept: float, slope: float) -> np.ndarray:
    """B-spline coefficients reproducing ``intercept + slope * t`` exactly
    (Greville abscissae)."""
    if b.kind != "bspline":
        raise ValueError("only defined for B-spline bases")
    k = b.knots
    deg = b.order - 1
    grev = np.array([k[i + 1:i + deg + 1].mean() for i in range(b.size)])
    return intercept + slope * grev
