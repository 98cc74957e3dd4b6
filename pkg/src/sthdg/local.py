"""Element-local weighted HDG operators and static condensation.

Per prism the three coupled residual equations are assembled against the
exponential-in-time weight f(t) = exp(-alpha (t - t_n)):

* the flux equation, tested with vector fields r: volume terms
  -(q, f dr/dt) - (q, r f') plus the top-of-slab term, the mixed term
  (v, f div r), and the facet coupling -<lambda, r.n f>;
* the conservation equation, tested with scalars w:
  -(w, f div q) + <tau (v - lambda), w f> over the lateral boundary;
* the flux-continuity equation on each lateral facet, tested with facet
  polynomials mu: <q.n - tau (v - lambda), mu f>, augmented on free-surface
  facets by -<lambda, f dmu/dt> - <lambda, mu f'> and the top-edge term,
  with the previous slab's surface trace on the right-hand side.

Interior (q, v) unknowns are eliminated per element; the Schur complement
over the three facet blocks is what enters the global system.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .basis import SpaceKind, make_basis, make_quadrature, tri_dim
from .mesh import LOCAL_EDGES, EdgeTag, FacetRole, SpaceTimeSlab

__all__ = [
    "AssemblyError",
    "WeightFn",
    "DiscreteSpace",
    "SlabOperators",
    "ElementOperator",
    "assemble_local",
    "back_substitute",
    "energy_identity_check",
    "EnergyReport",
]

_REF_VERTS = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


class AssemblyError(Exception):
    pass


@dataclass(frozen=True)
class WeightFn:
    """Slab weight f(t) = exp(-alpha (t - t_n)) with f' = -alpha f."""

    alpha: float
    t_n: float = 0.0

    def __call__(self, t):
        return np.exp(-self.alpha * (np.asarray(t, dtype=float) - self.t_n))

    def derivative(self, t):
        return -self.alpha * self(t)


class DiscreteSpace:
    """Bases, quadrature and reference tables shared by every prism.

    The default quadrature is exact to degree 2p+2 on every domain;
    ``time_quad_extra`` adds Gauss points in the time direction to tighten
    the integration of the non-polynomial weight.
    """

    def __init__(self, p: int, time_quad_extra: int = 0):
        if p < 1:
            raise ValueError(f"solver spaces need p >= 1, got {p}")
        self.p = p
        self.time_quad_extra = time_quad_extra
        self.prism = make_basis(SpaceKind.PRISM_PP, p)
        self.prism_tw = make_basis(SpaceKind.PRISM_TILDE_W, p)
        self.facet = make_basis(SpaceKind.FACET_Q, p)
        self.tri = make_basis(SpaceKind.TRI_P, p)
        self.interval = make_basis(SpaceKind.INTERVAL_P, p)
        self.nv = self.prism.dim
        self.nf = self.facet.dim
        self.ntri = self.tri.dim
        self.ne = 3 * self.nv

        deg = 2 * p + 2
        tri_rule = make_quadrature("triangle", deg)
        self.tri_pts = tri_rule.points
        self.tri_w = tri_rule.weights
        self.nqs = tri_rule.n_points

        n_t = p + 2 + time_quad_extra
        t_pts, t_w = np.polynomial.legendre.leggauss(n_t)
        self.t_pts, self.t_w, self.n_t = t_pts, t_w, n_t

        s_rule = make_quadrature("interval", deg)
        self.s_pts = s_rule.points[:, 0]
        self.s_w = s_rule.weights
        self.n_s = s_rule.n_points

        # volume points, time-major ordering
        vol = np.column_stack([
            np.repeat(t_pts, self.nqs),
            np.tile(self.tri_pts, (n_t, 1)),
        ])
        self.vol_w = (t_w[:, None] * self.tri_w[None, :]).ravel()
        self.PHI = self.prism.values(vol)
        g = self.prism.gradients(vol)
        self.D0, self.D1, self.D2 = g[:, 0], g[:, 1], g[:, 2]

        top = np.column_stack([np.ones(self.nqs), self.tri_pts])
        bot = np.column_stack([-np.ones(self.nqs), self.tri_pts])
        self.PHI_TOP = self.prism.values(top)
        self.PHI_BOT = self.prism.values(bot)
        self.TRI = self.tri.values(self.tri_pts)

        # lateral-facet points, time-major
        fac = np.column_stack([
            np.repeat(t_pts, self.n_s),
            np.tile(self.s_pts, n_t),
        ])
        self.fac_w = (t_w[:, None] * self.s_w[None, :]).ravel()
        self.fac_s = np.tile(self.s_pts, n_t)
        self.CHI = self.facet.values(fac)
        self.D0CHI = self.facet.gradients(fac)[:, 0]
        e_top = np.column_stack([np.ones(self.n_s), self.s_pts])
        e_bot = np.column_stack([-np.ones(self.n_s), self.s_pts])
        self.CHI_TOP = self.facet.values(e_top)
        self.CHI_BOT = self.facet.values(e_bot)
        self.INT = self.interval.values(self.s_pts[:, None])

        one = np.array([[1.0]])
        self.LT_TOP = self.interval.values(one)[:, 0]
        self.LT_BOT = self.interval.values(-one)[:, 0]

        # element-side traces of the prism basis for each (local edge,
        # orientation); the side's spatial points follow the facet parameter
        self.SIDE = np.empty((3, 2, self.nv, len(fac)))
        self.SIDE_TOP = np.empty((3, 2, self.nv, self.n_s))
        self.side_ref = np.empty((3, 2, self.n_s, 2))
        for le, (a, b) in enumerate(LOCAL_EDGES):
            A, B = _REF_VERTS[a], _REF_VERTS[b]
            for o, sgn in enumerate((1.0, -1.0)):
                mid, half = 0.5 * (A + B), 0.5 * sgn * (B - A)
                sp = mid[None, :] + self.s_pts[:, None] * half[None, :]
                self.side_ref[le, o] = sp
                pts = np.column_stack([
                    np.repeat(t_pts, self.n_s),
                    np.tile(sp, (n_t, 1)),
                ])
                self.SIDE[le, o] = self.prism.values(pts)
                self.SIDE_TOP[le, o] = self.prism.values(
                    np.column_stack([np.ones(self.n_s), sp]))


class _WeightedBlocks:
    """Reference matrices contracted with the slab weight for one (dt, alpha)."""

    def __init__(self, space: DiscreteSpace, dt: float, alpha: float):
        self.dt, self.alpha = dt, alpha
        self.e2b = math.exp(-alpha * dt)
        self.wf_t = np.exp(-alpha * (1.0 + space.t_pts) * dt / 2.0)
        wf_vol = np.repeat(self.wf_t, space.nqs)
        self.wf_fac = np.repeat(self.wf_t, space.n_s)

        wv = space.vol_w * wf_vol
        test_t = -(2.0 / dt) * space.D0 + alpha * space.PHI
        self.T1 = np.einsum("ik,k,jk->ij", test_t, wv, space.PHI)
        self.G1 = np.einsum("ik,k,jk->ij", space.D1, wv, space.PHI)
        self.G2 = np.einsum("ik,k,jk->ij", space.D2, wv, space.PHI)
        self.Ttop = self.e2b * np.einsum(
            "ik,k,jk->ij", space.PHI_TOP, space.tri_w, space.PHI_TOP)

        wq = space.fac_w * self.wf_fac
        self.Fm = np.einsum("abik,k,jk->abij", space.SIDE, wq, space.CHI)
        self.Fvv = np.einsum("abik,k,abjk->abij", space.SIDE, wq, space.SIDE)
        self.Fll = np.einsum("ik,k,jk->ij", space.CHI, wq, space.CHI)

        test_f = -(2.0 / dt) * space.D0CHI + alpha * space.CHI
        self.SurfRows = np.einsum("jk,k,ik->ji", test_f, wq, space.CHI)
        self.SurfTop = self.e2b * np.einsum(
            "jk,k,ik->ji", space.CHI_TOP, space.s_w, space.CHI_TOP)


class SlabOperators:
    """Condensed local operators for every prism of one slab.

    The operators depend on (dt, tau, alpha) but not on the slab's absolute
    start time, so one instance serves every slab of a constant-step march.
    """

    def __init__(self, slab: SpaceTimeSlab, space: DiscreteSpace,
                 tau: float, alpha: float):
        if tau <= 0:
            raise AssemblyError(f"stabilization parameter must be positive, got tau={tau}")
        if alpha <= 0:
            raise AssemblyError(f"weight decay rate must be positive, got alpha={alpha}")
        self.slab = slab
        self.space = space
        self.tau = float(tau)
        self.alpha = float(alpha)
        self.blocks = _WeightedBlocks(space, slab.dt, alpha)
        self._assemble()

    def _assemble(self):
        sp, bl, slab, tau = self.space, self.blocks, self.slab, self.tau
        nv, nf, ne = sp.nv, sp.nf, sp.ne
        nfl = 3 * nf
        nT = slab.n_prisms
        dt = slab.dt

        adet = np.abs(slab.detB)
        J = 0.5 * dt * adet
        Binv = slab.Binv
        ell = slab.facet_len[slab.tri_facets]            # (T, 3)
        Jf = 0.5 * dt * 0.5 * ell
        normal = slab.tri_normal
        orient = slab.tri_orient
        role = slab.facet_role[slab.tri_facets]

        sq = (slice(0, nv), slice(nv, 2 * nv))
        sv = slice(2 * nv, 3 * nv)

        A_ee = np.zeros((nT, ne, ne))
        qq = J[:, None, None] * bl.T1 + adet[:, None, None] * bl.Ttop
        A_ee[:, sq[0], sq[0]] = qq
        A_ee[:, sq[1], sq[1]] = qq
        for c in range(2):
            qv = J[:, None, None] * (Binv[:, 0, c, None, None] * bl.G1
                                     + Binv[:, 1, c, None, None] * bl.G2)
            A_ee[:, sq[c], sv] = qv
            A_ee[:, sv, sq[c]] = -np.transpose(qv, (0, 2, 1))

        A_ef = np.zeros((nT, ne, nfl))
        A_fe = np.zeros((nT, nfl, ne))
        A_ff = np.zeros((nT, nfl, nfl))
        for le in range(3):
            sel = bl.Fm[le, orient[:, le]]               # (T, nv, nf)
            selT = np.transpose(sel, (0, 2, 1))
            jf = Jf[:, le, None, None]
            lf = slice(le * nf, (le + 1) * nf)
            A_ee[:, sv, sv] += tau * jf * bl.Fvv[le, orient[:, le]]
            for c in range(2):
                nc = normal[:, le, c, None, None]
                A_ef[:, sq[c], lf] = -nc * jf * sel
                A_fe[:, lf, sq[c]] = nc * jf * selT
            A_ef[:, sv, lf] = -tau * jf * sel
            A_fe[:, lf, sv] = -tau * jf * selT
            ff = tau * jf * bl.Fll
            on_surf = role[:, le] == FacetRole.FREE_SURFACE
            if np.any(on_surf):
                ff = ff + on_surf[:, None, None] * (
                    jf * bl.SurfRows
                    + 0.5 * ell[:, le, None, None] * bl.SurfTop)
            A_ff[:, lf, lf] = ff

        try:
            A_ee_inv = np.linalg.inv(A_ee)
        except np.linalg.LinAlgError:
            self._raise_singular(A_ee)
        if not np.all(np.isfinite(A_ee_inv)):
            self._raise_singular(A_ee)

        self.A_ee, self.A_ef, self.A_fe, self.A_ff = A_ee, A_ef, A_fe, A_ff
        self.A_ee_inv = A_ee_inv
        self.lift = A_ee_inv @ A_ef                      # (T, ne, nfl)
        self.schur = A_ff - A_fe @ self.lift             # (T, nfl, nfl)
        self._J, self._adet, self._Jf, self._ell = J, adet, Jf, ell
        self._role = role

    def _raise_singular(self, A_ee):
        for i, a in enumerate(A_ee):
            _, u = scipy.linalg.lu(a, permute_l=True)
            piv = np.min(np.abs(np.diag(u)))
            if not np.isfinite(piv) or piv < 1e-14 * np.max(np.abs(a)):
                raise AssemblyError(
                    f"element {i}: local matrix not invertible "
                    f"(smallest pivot {piv:.3e}); check tau > 0 and quadrature")
        raise AssemblyError("local element matrix not invertible")

    # ---- right-hand sides -------------------------------------------------

    def element_rhs(self, q_minus: np.ndarray) -> np.ndarray:
        """Element loads <q-, r f>|_{t_n} from the previous slab's trace.

        ``q_minus`` holds spatial-basis coefficients, shape (T, 2, ntri).
        The weight is 1 at t_n and the spatial basis is orthonormal, so the
        integral reduces to a scaling by the bottom time-trace values.
        """
        sp = self.space
        nT = self.slab.n_prisms
        n_time = sp.p + 1
        b = np.zeros((nT, sp.ne))
        for c in range(2):
            blk = (self._adet[:, None, None] * q_minus[:, c, :, None]
                   * sp.LT_BOT[None, None, :])
            b[:, c * sp.nv:(c + 1) * sp.nv] = blk.reshape(nT, sp.ntri * n_time)
        return b

    def facet_rhs(self, lam_minus: np.ndarray, flux_fns, t_start: float) -> np.ndarray:
        """Facet loads: surface traces at t_n plus prescribed normal fluxes.

        ``lam_minus`` holds interval-basis coefficients per surface facet,
        shape (n_surface, p+1); ``flux_fns`` maps an EdgeTag to g(x, t) for
        facets where q.n is prescribed.
        """
        sp, bl, slab = self.space, self.blocks, self.slab
        n_time = sp.p + 1
        b = np.zeros((slab.n_facets, sp.nf))
        surf = slab.surface_facets
        if len(surf):
            half_ell = 0.5 * slab.facet_len[surf]
            blk = (half_ell[:, None, None] * lam_minus[:, :, None]
                   * sp.LT_BOT[None, None, :])
            b[surf] = blk.reshape(len(surf), sp.nf)
        if flux_fns:
            t_q = t_start + (1.0 + np.repeat(sp.t_pts, sp.n_s)) * slab.dt / 2.0
            for fi in np.flatnonzero(
                    (slab.facet_role == FacetRole.NEUMANN)
                    | (slab.facet_role == FacetRole.WAVE_MAKER)):
                g = flux_fns.get(EdgeTag(slab.facet_tag[fi]))
                if g is None:
                    continue
                x = slab.facet_points(fi, sp.fac_s)
                gv = np.asarray(g(x, t_q), dtype=float)
                jf = 0.25 * slab.dt * slab.facet_len[fi]
                b[fi] += jf * (sp.CHI @ (sp.fac_w * bl.wf_fac * gv))
        return b

    def condense_rhs(self, b_e: np.ndarray, b_facet: np.ndarray):
        """Reduce element loads onto the facet system; returns the per-element
        lifted loads and the global facet RHS (n_facets, nf)."""
        h = np.einsum("tij,tj->ti", self.A_ee_inv, b_e)
        r_elem = np.einsum("tij,tj->ti", self.A_fe, h)
        rhs = b_facet.copy()
        nf = self.space.nf
        for le in range(3):
            np.add.at(rhs, self.slab.tri_facets[:, le],
                      -r_elem[:, le * nf:(le + 1) * nf])
        return h, rhs

    def back_substitute_all(self, h: np.ndarray, lam: np.ndarray) -> np.ndarray:
        """Recover element unknowns from facet values; ``h`` is the lifted
        load from :meth:`condense_rhs`, ``lam`` has shape (n_facets, nf)."""
        lam_loc = lam[self.slab.tri_facets].reshape(self.slab.n_prisms, 3 * self.space.nf)
        return h - np.einsum("tij,tj->ti", self.lift, lam_loc)

    def element(self, i: int, q_minus=None, lam_minus=None, flux_fns=None,
                t_start=None) -> "ElementOperator":
        """Single-prism view; optionally carries its load vectors."""
        b_e = b_f = None
        if q_minus is not None:
            b_e = self.element_rhs(q_minus)[i]
        if lam_minus is not None or flux_fns:
            nsurf = len(self.slab.surface_facets)
            lm = lam_minus if lam_minus is not None else np.zeros((nsurf, self.space.p + 1))
            t0 = self.slab.t_start if t_start is None else t_start
            bf_global = self.facet_rhs(lm, flux_fns or {}, t0)
            b_f = bf_global[self.slab.tri_facets[i]].reshape(3 * self.space.nf)
        return ElementOperator(
            element=i,
            A_ee=self.A_ee[i], A_ef=self.A_ef[i],
            A_fe=self.A_fe[i], A_ff=self.A_ff[i],
            A_ee_inv=self.A_ee_inv[i], schur=self.schur[i],
            b_e=b_e, b_f=b_f,
        )


@dataclass
class ElementOperator:
    """Condensed local matrices of one prism.

    ``schur = A_ff - A_fe A_ee^{-1} A_ef`` maps the three facet unknown
    blocks to themselves; ``A_ee_inv`` is retained for back-substitution.
    """

    element: int
    A_ee: np.ndarray
    A_ef: np.ndarray
    A_fe: np.ndarray
    A_ff: np.ndarray
    A_ee_inv: np.ndarray
    schur: np.ndarray
    b_e: np.ndarray | None = None
    b_f: np.ndarray | None = None


def assemble_local(slab: SpaceTimeSlab, space: DiscreteSpace, elem: int,
                   tau: float, alpha: float, q_minus=None, lam_minus=None,
                   flux_fns=None) -> ElementOperator:
    """Assemble and condense the local HDG system for one prism."""
    ops = SlabOperators(slab, space, tau, alpha)
    return ops.element(elem, q_minus=q_minus, lam_minus=lam_minus,
                       flux_fns=flux_fns)


def back_substitute(op: ElementOperator, facet_values: np.ndarray,
                    b_e: np.ndarray | None = None) -> np.ndarray:
    """Recover (q, v) coefficients of one element from its facet values."""
    facet_values = np.asarray(facet_values, dtype=float).ravel()
    if facet_values.shape[0] != op.A_ef.shape[1]:
        raise ValueError(
            f"facet vector length {facet_values.shape[0]} != {op.A_ef.shape[1]}")
    rhs = op.b_e if b_e is None else b_e
    if rhs is None:
        rhs = np.zeros(op.A_ee.shape[0])
    return op.A_ee_inv @ (rhs - op.A_ef @ facet_values)


@dataclass
class EnergyReport:
    """Quadratic terms of the slab energy identity and their defect.

    ``terms`` holds the seven weighted squares (all nonnegative for
    tau, alpha > 0); ``data`` the previous-trace and flux pairings.  The
    identity states sum(terms) == sum(data); ``relative`` is the defect
    normalized by the largest participating term.
    """

    terms: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    residual: float = 0.0
    relative: float = 0.0


def energy_identity_check(ops: SlabOperators, q_coeffs, v_coeffs, lam_coeffs,
                          q_minus, lam_minus, flux_fns=None,
                          t_start=None) -> EnergyReport:
    """Evaluate the energy identity of the solved slab.

    Substitutes the computed solution for the test functions and integrates
    each quadratic term with the assembly quadrature; the residual against
    the data terms vanishes to solver tolerance by Galerkin orthogonality.
    """
    sp, bl, slab = ops.space, ops.blocks, ops.slab
    t0 = slab.t_start if t_start is None else t_start
    alpha, tau = ops.alpha, ops.tau
    J, adet, Jf, ell = ops._J, ops._adet, ops._Jf, ops._ell
    wv = sp.vol_w * np.repeat(bl.wf_t, sp.nqs)
    wq = sp.fac_w * bl.wf_fac

    q1 = q_coeffs[:, 0] @ sp.PHI
    q2 = q_coeffs[:, 1] @ sp.PHI
    qsq = q1 * q1 + q2 * q2
    T1 = 0.5 * alpha * float(np.einsum("t,tk,k->", J, qsq, wv))

    q1t, q2t = q_coeffs[:, 0] @ sp.PHI_TOP, q_coeffs[:, 1] @ sp.PHI_TOP
    T2 = 0.5 * bl.e2b * float(np.einsum("t,tk,k->", adet, q1t**2 + q2t**2, sp.tri_w))
    q1b, q2b = q_coeffs[:, 0] @ sp.PHI_BOT, q_coeffs[:, 1] @ sp.PHI_BOT
    T3 = 0.5 * float(np.einsum("t,tk,k->", adet, q1b**2 + q2b**2, sp.tri_w))

    T4 = 0.0
    for le in range(3):
        side = sp.SIDE[le, slab.tri_orient[:, le]]
        v_side = np.einsum("ti,tik->tk", v_coeffs, side)
        lam_side = lam_coeffs[slab.tri_facets[:, le]] @ sp.CHI
        T4 += tau * float(np.einsum("t,tk,k->", Jf[:, le], (v_side - lam_side)**2, wq))

    surf = slab.surface_facets
    lam_s = lam_coeffs[surf]
    jf_s = 0.25 * slab.dt * slab.facet_len[surf]
    he_s = 0.5 * slab.facet_len[surf]
    T5 = 0.5 * alpha * float(np.einsum("f,fk,k->", jf_s, (lam_s @ sp.CHI)**2, wq))
    T6 = 0.5 * bl.e2b * float(np.einsum("f,fk,k->", he_s, (lam_s @ sp.CHI_TOP)**2, sp.s_w))
    lam_bot = lam_s @ sp.CHI_BOT
    T7 = 0.5 * float(np.einsum("f,fk,k->", he_s, lam_bot**2, sp.s_w))

    qm1 = q_minus[:, 0] @ sp.TRI
    qm2 = q_minus[:, 1] @ sp.TRI
    D1 = float(np.einsum("t,tk,k->", adet, qm1 * q1b + qm2 * q2b, sp.tri_w))
    lm = lam_minus @ sp.INT
    D2 = float(np.einsum("f,fk,k->", he_s, lm * lam_bot, sp.s_w))
    D3 = 0.0
    if flux_fns:
        t_q = t0 + (1.0 + np.repeat(sp.t_pts, sp.n_s)) * slab.dt / 2.0
        for fi in np.flatnonzero(
                (slab.facet_role == FacetRole.NEUMANN)
                | (slab.facet_role == FacetRole.WAVE_MAKER)):
            g = flux_fns.get(EdgeTag(slab.facet_tag[fi]))
            if g is None:
                continue
            gv = np.asarray(g(slab.facet_points(fi, sp.fac_s), t_q), dtype=float)
            lam_f = lam_coeffs[fi] @ sp.CHI
            D3 += 0.25 * slab.dt * slab.facet_len[fi] * float(np.sum(wq * gv * lam_f))

    terms = {"q_weight": T1, "q_top": T2, "q_bottom": T3, "tau_jump": T4,
             "lambda_weight": T5, "lambda_top": T6, "lambda_bottom": T7}
    data = {"q_data": D1, "lambda_data": D2, "flux_data": D3}
    residual = sum(terms.values()) - sum(data.values())
    scale = max(max(abs(v) for v in terms.values()),
                max(abs(v) for v in data.values()), 1e-300)
    return EnergyReport(terms=terms, data=data, residual=residual,
                        relative=residual / scale)
