"""Reference-element polynomial bases and quadrature.

Elements are prisms ``K = K_tri x [-1, 1]`` built from the unit reference
triangle with vertices (0,0), (1,0), (0,1) and a reference time interval
[-1, 1].  Points are always ordered time-first: a prism point is
``(t, x1, x2)`` and a lateral-facet point is ``(t, s)`` with ``s`` the
arc-length parameter along the spatial edge.

All bases are orthonormal on their reference domain under the unweighted
L2 inner product: a Dubiner-type basis on the triangle, normalized
Legendre polynomials in time, and tensor Legendre on quadrilateral facets.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import eval_jacobi, roots_jacobi

__all__ = [
    "SpaceKind",
    "ReferenceBasis",
    "QuadratureRule",
    "PrismGeometry",
    "make_basis",
    "make_quadrature",
    "eval_mapped",
    "tri_dim",
]

_MAX_QUAD_DEGREE = 60

# denominator clip for the collapsed triangle coordinate; quadrature and
# facet points never approach the collapse vertex (0, 1)
_COLLAPSE_EPS = 1e-12


class SpaceKind(enum.Enum):
    """Polynomial space selector for :func:`make_basis`."""

    PRISM_PP = "prism_pp"          # P_p(tri) x P_p(time)
    PRISM_TILDE_W = "prism_tw"     # P_{p-1}(tri) x P_p(time)
    FACET_Q = "facet_q"            # Q_p on the quadrilateral facet
    TRI_P = "tri_p"                # P_p on the triangle
    INTERVAL_P = "interval_p"      # P_p on [-1, 1]


def tri_dim(p: int) -> int:
    return (p + 1) * (p + 2) // 2


def _tri_mode_ids(p: int) -> list[tuple[int, int]]:
    # ordered by total degree, so the first tri_dim(p-1) modes span P_{p-1}
    return [(m, d - m) for d in range(p + 1) for m in range(d + 1)]


def _djacobi(n: int, a: int, b: int, x: np.ndarray) -> np.ndarray:
    if n == 0:
        return np.zeros_like(x)
    return 0.5 * (n + a + b + 1) * eval_jacobi(n - 1, a + 1, b + 1, x)


def _legendre_norm(j: int, x: np.ndarray) -> np.ndarray:
    return math.sqrt(j + 0.5) * eval_jacobi(j, 0, 0, x)


def _dlegendre_norm(j: int, x: np.ndarray) -> np.ndarray:
    return math.sqrt(j + 0.5) * _djacobi(j, 0, 0, x)


def _tri_values(modes, pts):
    """Dubiner basis values on the unit triangle, shape (n_modes, n_pts)."""
    x, y = pts[:, 0], pts[:, 1]
    denom = 1.0 - y
    safe = np.where(np.abs(denom) < _COLLAPSE_EPS, _COLLAPSE_EPS, denom)
    a = 2.0 * x / safe - 1.0
    b = 2.0 * y - 1.0
    out = np.empty((len(modes), len(x)))
    for idx, (m, n) in enumerate(modes):
        c = math.sqrt(2.0 * (2 * m + 1) * (m + n + 1))
        out[idx] = c * eval_jacobi(m, 0, 0, a) * denom**m * eval_jacobi(n, 2 * m + 1, 0, b)
    return out


def _tri_grads(modes, pts):
    """Gradients of the Dubiner basis, shape (n_modes, 2, n_pts)."""
    x, y = pts[:, 0], pts[:, 1]
    denom = 1.0 - y
    safe = np.where(np.abs(denom) < _COLLAPSE_EPS, _COLLAPSE_EPS, denom)
    a = 2.0 * x / safe - 1.0
    b = 2.0 * y - 1.0
    out = np.empty((len(modes), 2, len(x)))
    for idx, (m, n) in enumerate(modes):
        c = math.sqrt(2.0 * (2 * m + 1) * (m + n + 1))
        pm = eval_jacobi(m, 0, 0, a)
        pn = eval_jacobi(n, 2 * m + 1, 0, b)
        dpm = _djacobi(m, 0, 0, a)
        dpn = _djacobi(n, 2 * m + 1, 0, b)
        if m == 0:
            gx = np.zeros_like(x)
            gy = c * 2.0 * pm * dpn
        else:
            dm1 = denom ** (m - 1)
            gx = c * 2.0 * dpm * dm1 * pn
            # the (a+1)/denom factor cancels analytically against denom**m
            gy = c * (dpm * (a + 1.0) * dm1 * pn
                      - m * pm * dm1 * pn
                      + 2.0 * pm * denom**m * dpn)
        out[idx, 0] = gx
        out[idx, 1] = gy
    return out


@dataclass(frozen=True)
class ReferenceBasis:
    """Orthonormal basis with value/derivative evaluators on reference points.

    ``values(pts)`` returns shape (dim, n_pts); ``gradients(pts)`` returns
    shape (dim, ndim, n_pts) with derivative axes ordered like the point
    coordinates (time first for prisms and facets).
    """

    space_kind: SpaceKind
    p: int
    dim: int
    ndim: int
    _modes: tuple = field(repr=False)

    def values(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        kind = self.space_kind
        if kind is SpaceKind.INTERVAL_P:
            x = pts[:, 0]
            return np.stack([_legendre_norm(j, x) for j in range(self.p + 1)])
        if kind is SpaceKind.TRI_P:
            return _tri_values(self._modes, pts)
        if kind is SpaceKind.FACET_Q:
            t, s = pts[:, 0], pts[:, 1]
            out = np.empty((self.dim, len(t)))
            for idx, (i, j) in enumerate(self._modes):
                out[idx] = _legendre_norm(i, s) * _legendre_norm(j, t)
            return out
        # prism kinds: modes are ((m, n), j) pairs
        t, xy = pts[:, 0], pts[:, 1:]
        tri = _tri_values([mn for mn, _ in self._modes], xy)
        out = np.empty((self.dim, len(t)))
        for idx, (_, j) in enumerate(self._modes):
            out[idx] = tri[idx] * _legendre_norm(j, t)
        return out

    def gradients(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        kind = self.space_kind
        if kind is SpaceKind.INTERVAL_P:
            x = pts[:, 0]
            g = np.stack([_dlegendre_norm(j, x) for j in range(self.p + 1)])
            return g[:, None, :]
        if kind is SpaceKind.TRI_P:
            return _tri_grads(self._modes, pts)
        if kind is SpaceKind.FACET_Q:
            t, s = pts[:, 0], pts[:, 1]
            out = np.empty((self.dim, 2, len(t)))
            for idx, (i, j) in enumerate(self._modes):
                out[idx, 0] = _legendre_norm(i, s) * _dlegendre_norm(j, t)
                out[idx, 1] = _dlegendre_norm(i, s) * _legendre_norm(j, t)
            return out
        t, xy = pts[:, 0], pts[:, 1:]
        tri_modes = [mn for mn, _ in self._modes]
        tri_v = _tri_values(tri_modes, xy)
        tri_g = _tri_grads(tri_modes, xy)
        out = np.empty((self.dim, 3, len(t)))
        for idx, (_, j) in enumerate(self._modes):
            out[idx, 0] = tri_v[idx] * _dlegendre_norm(j, t)
            out[idx, 1] = tri_g[idx, 0] * _legendre_norm(j, t)
            out[idx, 2] = tri_g[idx, 1] * _legendre_norm(j, t)
        return out


def make_basis(space_kind: SpaceKind, p: int) -> ReferenceBasis:
    """Build the orthonormal reference basis of degree ``p``.

    Degree 0 is rejected for the solver spaces (prism and facet kinds):
    the companion space P_{p-1}(K) x P_p(I) would be empty.
    """
    solver_kinds = (SpaceKind.PRISM_PP, SpaceKind.PRISM_TILDE_W, SpaceKind.FACET_Q)
    if space_kind in solver_kinds and p < 1:
        raise ValueError(f"p >= 1 required for {space_kind.name}, got p={p}")
    if p < 0:
        raise ValueError(f"p must be nonnegative, got {p}")

    if space_kind is SpaceKind.INTERVAL_P:
        return ReferenceBasis(space_kind, p, p + 1, 1, ())
    if space_kind is SpaceKind.TRI_P:
        modes = tuple(_tri_mode_ids(p))
        return ReferenceBasis(space_kind, p, tri_dim(p), 2, modes)
    if space_kind is SpaceKind.FACET_Q:
        modes = tuple((i, j) for i in range(p + 1) for j in range(p + 1))
        return ReferenceBasis(space_kind, p, (p + 1) ** 2, 2, modes)
    if space_kind is SpaceKind.PRISM_PP:
        tri_modes = _tri_mode_ids(p)
    else:
        tri_modes = _tri_mode_ids(p - 1)
    modes = tuple((mn, j) for mn in tri_modes for j in range(p + 1))
    return ReferenceBasis(space_kind, p, len(modes), 3, modes)


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray      # (n, ndim)
    weights: np.ndarray     # (n,)
    exactness_degree: int

    @property
    def n_points(self) -> int:
        return len(self.weights)


def _gauss_legendre(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return x, w


def _triangle_rule(degree: int):
    # Duffy collapse of the square onto the triangle; the Gauss-Jacobi rule
    # in the singular direction absorbs the (1-b) Jacobian factor
    n = (degree + 2) // 2
    xa, wa = _gauss_legendre(n)
    xb, wb = roots_jacobi(n, 1.0, 0.0)
    A, B = np.meshgrid(xa, xb, indexing="ij")
    WA, WB = np.meshgrid(wa, wb, indexing="ij")
    x = (1.0 + A) * (1.0 - B) / 4.0
    y = (1.0 + B) / 2.0
    pts = np.column_stack([x.ravel(), y.ravel()])
    w = (WA * WB).ravel() / 8.0
    return pts, w


def make_quadrature(domain_kind: str, degree: int) -> QuadratureRule:
    """Quadrature exact to ``degree`` on a reference domain.

    ``domain_kind`` is one of ``interval`` ([-1,1]), ``triangle`` (unit
    triangle), ``prism`` (triangle x [-1,1], point columns (t, x1, x2)) or
    ``facet`` ([-1,1]^2, point columns (t, s)).
    """
    if degree < 1:
        raise ValueError(f"quadrature degree must be >= 1, got {degree}")
    if degree > _MAX_QUAD_DEGREE:
        raise ValueError(
            f"quadrature degree {degree} above supported maximum "
            f"{_MAX_QUAD_DEGREE}; split the integrand or use a composite rule"
        )
    if domain_kind == "interval":
        n = (degree + 2) // 2
        x, w = _gauss_legendre(n)
        return QuadratureRule(x[:, None], w, 2 * n - 1)
    if domain_kind == "triangle":
        pts, w = _triangle_rule(degree)
        return QuadratureRule(pts, w, degree | 1)
    if domain_kind == "prism":
        tri = make_quadrature("triangle", degree)
        tim = make_quadrature("interval", degree)
        t = np.repeat(tim.points[:, 0], tri.n_points)
        xy = np.tile(tri.points, (tim.n_points, 1))
        w = (tim.weights[:, None] * tri.weights[None, :]).ravel()
        pts = np.column_stack([t, xy])
        return QuadratureRule(pts, w, min(tri.exactness_degree, tim.exactness_degree))
    if domain_kind == "facet":
        tim = make_quadrature("interval", degree)
        t = np.repeat(tim.points[:, 0], tim.n_points)
        s = np.tile(tim.points[:, 0], tim.n_points)
        w = (tim.weights[:, None] * tim.weights[None, :]).ravel()
        return QuadratureRule(np.column_stack([t, s]), w, tim.exactness_degree)
    raise ValueError(f"unknown domain kind {domain_kind!r}")


@dataclass(frozen=True)
class PrismGeometry:
    """Affine geometry of one space-time prism.

    The spatial map is x = B xhat + c from the reference triangle; the time
    map is t = t_start + (1 + that) * dt / 2.
    """

    B: np.ndarray
    c: np.ndarray
    t_start: float
    dt: float

    @property
    def detB(self) -> float:
        return float(self.B[0, 0] * self.B[1, 1] - self.B[0, 1] * self.B[1, 0])

    @property
    def Binv(self) -> np.ndarray:
        d = self.detB
        return np.array([[self.B[1, 1], -self.B[0, 1]],
                         [-self.B[1, 0], self.B[0, 0]]]) / d

    @property
    def volume(self) -> float:
        return abs(self.detB) / 2.0 * self.dt

    def to_physical(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        t = self.t_start + (1.0 + pts[:, 0]) * self.dt / 2.0
        xy = pts[:, 1:] @ self.B.T + self.c
        return np.column_stack([t, xy])


def eval_mapped(basis: ReferenceBasis, geom: PrismGeometry, pts: np.ndarray):
    """Values and physical-coordinate gradients at reference points.

    Returns ``(values, grads)`` with ``grads`` of shape (dim, 3, n); the
    derivative axes are (d/dt, d/dx1, d/dx2).  The temporal derivative is
    the reference one scaled by 2/dt; spatial derivatives are pushed through
    the inverse spatial Jacobian.
    """
    if basis.ndim != 3:
        raise ValueError("eval_mapped expects a prism basis")
    det = geom.detB
    if abs(det) < 1e-300 or not np.isfinite(det):
        raise ValueError("degenerate spatial Jacobian (zero-area triangle)")
    vals = basis.values(pts)
    ref = basis.gradients(pts)
    binv = geom.Binv
    grads = np.empty_like(ref)
    grads[:, 0] = (2.0 / geom.dt) * ref[:, 0]
    # d/dx_c = sum_d Binv[d, c] * d/dxhat_d
    grads[:, 1] = binv[0, 0] * ref[:, 1] + binv[1, 0] * ref[:, 2]
    grads[:, 2] = binv[0, 1] * ref[:, 1] + binv[1, 1] * ref[:, 2]
    return vals, grads
