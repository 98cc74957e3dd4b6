"""Element-local tailored projection used to validate the error machinery.

The projection (Pi_V q, Pi_W v) of a smooth pair onto the prism spaces is
defined by weighted moment conditions against the reduced spaces
P_{p-1}(K) x P_p(I) in the element interior together with the flux moment
<Pi_V q . n - tau Pi_W v, sigma f> = <q . n - tau v, sigma f> on each of the
three lateral facets.  The resulting square system has dimension
(3/2)(p+1)^2(p+2) and is nonsingular for tau > 0.

The solver never uses this operator; it exists so the approximation orders
driving the error estimates can be measured independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .basis import SpaceKind, make_basis, make_quadrature
from .mesh import LOCAL_EDGES, SpaceTimeSlab, extrude_slab

__all__ = [
    "ProjectionWorkspace",
    "ProjectionSystem",
    "project_element",
    "project_slab",
    "weighted_l2_project",
    "measure_projection_rates",
    "projection_error_weighted",
]

_REF_VERTS = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


class ProjectionWorkspace:
    """Reference tables for the projection system at elevated quadrature.

    The oracle integrates with exactness 2p+6 so its own integration error
    stays far below the approximation error it measures.
    """

    def __init__(self, p: int):
        if p < 1:
            raise ValueError(f"projection requires p >= 1, got {p}")
        self.p = p
        self.prism = make_basis(SpaceKind.PRISM_PP, p)
        self.tilde = make_basis(SpaceKind.PRISM_TILDE_W, p)
        self.facet = make_basis(SpaceKind.FACET_Q, p)
        self.nv, self.ntw, self.nf = self.prism.dim, self.tilde.dim, self.facet.dim
        self.n_unknowns = 3 * self.nv

        deg = 2 * p + 6
        tri = make_quadrature("triangle", deg)
        self.tri_pts, self.tri_w = tri.points, tri.weights
        self.nqs = tri.n_points
        n_t = (deg + 2) // 2
        self.t_pts, self.t_w = np.polynomial.legendre.leggauss(n_t)
        self.n_t = n_t
        line = make_quadrature("interval", deg)
        self.s_pts, self.s_w = line.points[:, 0], line.weights
        self.n_s = line.n_points

        vol = np.column_stack([
            np.repeat(self.t_pts, self.nqs),
            np.tile(self.tri_pts, (n_t, 1)),
        ])
        self.vol_w = (self.t_w[:, None] * self.tri_w[None, :]).ravel()
        self.PHI = self.prism.values(vol)
        self.TW = self.tilde.values(vol)
        self.vol_ref = vol

        fac = np.column_stack([
            np.repeat(self.t_pts, self.n_s),
            np.tile(self.s_pts, n_t),
        ])
        self.fac_w = (self.t_w[:, None] * self.s_w[None, :]).ravel()
        self.fac_s = np.tile(self.s_pts, n_t)
        self.CHI = self.facet.values(fac)

        self.SIDE = np.empty((3, self.nv, len(fac)))
        self.side_ref = np.empty((3, self.n_s, 2))
        for le, (a, b) in enumerate(LOCAL_EDGES):
            A, B = _REF_VERTS[a], _REF_VERTS[b]
            sp = 0.5 * (A + B)[None, :] + self.s_pts[:, None] * (0.5 * (B - A))[None, :]
            self.side_ref[le] = sp
            pts = np.column_stack([
                np.repeat(self.t_pts, self.n_s),
                np.tile(sp, (n_t, 1)),
            ])
            self.SIDE[le] = self.prism.values(pts)


@dataclass
class ProjectionSystem:
    """Assembled square projection systems for every prism of a slab."""

    workspace: ProjectionWorkspace
    slab: SpaceTimeSlab
    tau: float
    alpha: float
    lhs: np.ndarray       # (T, N, N)

    @property
    def n_rows(self) -> int:
        return self.lhs.shape[1]


def _facet_scales(slab):
    ell = slab.facet_len[slab.tri_facets]
    return 0.25 * slab.dt * ell                          # (T, 3)


def build_projection_system(slab: SpaceTimeSlab, ws: ProjectionWorkspace,
                            tau: float, alpha: float) -> ProjectionSystem:
    if tau <= 0:
        raise ValueError(f"projection system is singular for tau <= 0 (got {tau})")
    nv, ntw, nf = ws.nv, ws.ntw, ws.nf
    nT = slab.n_prisms
    dt = slab.dt
    wf_t = np.exp(-alpha * (1.0 + ws.t_pts) * dt / 2.0)
    wv = ws.vol_w * np.repeat(wf_t, ws.nqs)
    wq = ws.fac_w * np.repeat(wf_t, ws.n_s)

    MW = np.einsum("ik,k,jk->ij", ws.TW, wv, ws.PHI)          # (ntw, nv)
    FmT = np.einsum("jk,k,aik->aji", ws.CHI, wq, ws.SIDE)     # (3, nf, nv)

    J = 0.5 * dt * np.abs(slab.detB)
    Jf = _facet_scales(slab)
    normal = slab.tri_normal

    N = 3 * nv
    lhs = np.zeros((nT, N, N))
    sq = (slice(0, nv), slice(nv, 2 * nv))
    sv = slice(2 * nv, 3 * nv)
    r0 = 0
    for c in range(2):
        lhs[:, r0:r0 + ntw, sq[c]] = J[:, None, None] * MW
        r0 += ntw
    lhs[:, r0:r0 + ntw, sv] = J[:, None, None] * MW
    r0 += ntw
    for le in range(3):
        rows = slice(r0 + le * nf, r0 + (le + 1) * nf)
        jf = Jf[:, le, None, None]
        for c in range(2):
            lhs[:, rows, sq[c]] = normal[:, le, c, None, None] * jf * FmT[le]
        lhs[:, rows, sv] = -tau * jf * FmT[le]
    return ProjectionSystem(workspace=ws, slab=slab, tau=tau, alpha=alpha, lhs=lhs)


def _projection_rhs(system: ProjectionSystem, q_fn, v_fn):
    ws, slab = system.workspace, system.slab
    nv, ntw, nf = ws.nv, ws.ntw, ws.nf
    nT = slab.n_prisms
    dt, alpha, tau = slab.dt, system.alpha, system.tau
    wf_t = np.exp(-alpha * (1.0 + ws.t_pts) * dt / 2.0)
    wv = ws.vol_w * np.repeat(wf_t, ws.nqs)
    wq = ws.fac_w * np.repeat(wf_t, ws.n_s)

    t_vol = slab.t_start + (1.0 + ws.vol_ref[:, 0]) * dt / 2.0
    xy = slab.c[:, None, :] + ws.vol_ref[None, :, 1:] @ np.transpose(slab.B, (0, 2, 1))
    flat = xy.reshape(-1, 2)
    tt = np.tile(t_vol, nT)
    qv = np.asarray(q_fn(flat, tt), dtype=float).reshape(nT, -1, 2)
    vv = np.asarray(v_fn(flat, tt), dtype=float).reshape(nT, -1)

    J = 0.5 * dt * np.abs(slab.detB)
    Jf = _facet_scales(slab)
    rhs = np.zeros((nT, 3 * nv))
    r0 = 0
    for c in range(2):
        rhs[:, r0:r0 + ntw] = J[:, None] * np.einsum("ik,k,tk->ti", ws.TW, wv, qv[:, :, c])
        r0 += ntw
    rhs[:, r0:r0 + ntw] = J[:, None] * np.einsum("ik,k,tk->ti", ws.TW, wv, vv)
    r0 += ntw

    t_fac = slab.t_start + (1.0 + np.repeat(ws.t_pts, ws.n_s)) * dt / 2.0
    for le in range(3):
        sp = ws.side_ref[le]
        pts = np.tile(sp, (ws.n_t, 1))
        xyf = slab.c[:, None, :] + pts[None, :, :] @ np.transpose(slab.B, (0, 2, 1))
        tf = np.tile(t_fac, nT)
        qf = np.asarray(q_fn(xyf.reshape(-1, 2), tf), dtype=float).reshape(nT, -1, 2)
        vf = np.asarray(v_fn(xyf.reshape(-1, 2), tf), dtype=float).reshape(nT, -1)
        qn = (qf[:, :, 0] * slab.tri_normal[:, le, 0, None]
              + qf[:, :, 1] * slab.tri_normal[:, le, 1, None])
        rows = slice(r0 + le * nf, r0 + (le + 1) * nf)
        rhs[:, rows] = Jf[:, le, None] * np.einsum(
            "jk,k,tk->tj", ws.CHI, wq, qn - tau * vf)
    return rhs


def project_slab(slab: SpaceTimeSlab, q_fn, v_fn, p: int,
                 tau: float = 5.0, alpha: float = 0.1,
                 ws: ProjectionWorkspace | None = None):
    """Project (q, v) samplers onto every prism of the slab.

    Returns (q_coeffs, v_coeffs, residual) with shapes (T, 2, nv), (T, nv);
    the residual is the largest relative defect of the solved systems.
    """
    ws = ws if ws is not None else ProjectionWorkspace(p)
    system = build_projection_system(slab, ws, tau, alpha)
    rhs = _projection_rhs(system, q_fn, v_fn)
    try:
        sol = np.linalg.solve(system.lhs, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise ValueError(
            "singular projection system; tau = 0 or basis/quadrature defect") from exc
    resid = np.einsum("tij,tj->ti", system.lhs, sol) - rhs
    scale = np.maximum(np.linalg.norm(rhs, axis=1), 1e-300)
    rel = float(np.max(np.linalg.norm(resid, axis=1) / scale))
    nv = ws.nv
    q_coeffs = np.stack([sol[:, :nv], sol[:, nv:2 * nv]], axis=1)
    return q_coeffs, sol[:, 2 * nv:], rel


def project_element(slab: SpaceTimeSlab, elem: int, q_fn, v_fn, p: int,
                    tau: float = 5.0, alpha: float = 0.1,
                    ws: ProjectionWorkspace | None = None):
    """Project one element; returns (q_coeffs (2, nv), v_coeffs (nv,), residual)."""
    sub = _single_element_slab(slab, elem)
    q, v, rel = project_slab(sub, q_fn, v_fn, p, tau, alpha, ws=ws)
    return q[0], v[0], rel


def _single_element_slab(slab: SpaceTimeSlab, elem: int) -> SpaceTimeSlab:
    from dataclasses import replace

    sl = np.s_[elem:elem + 1]
    return replace(
        slab, B=slab.B[sl], c=slab.c[sl], detB=slab.detB[sl], Binv=slab.Binv[sl],
        tri_facets=np.array([[0, 1, 2]]),
        tri_orient=np.zeros((1, 3), dtype=np.int64),
        tri_normal=slab.tri_normal[sl],
        facet_edge=np.arange(3), facet_partner=np.full(3, -1),
        facet_role=slab.facet_role[slab.tri_facets[elem]],
        facet_tag=slab.facet_tag[slab.tri_facets[elem]],
        facet_len=slab.facet_len[slab.tri_facets[elem]],
        facet_p0=slab.facet_p0[slab.tri_facets[elem]],
        facet_p1=slab.facet_p1[slab.tri_facets[elem]],
        surface_facets=np.array([], dtype=np.int64),
    )


def weighted_l2_project(space_kind: SpaceKind, fn, slab: SpaceTimeSlab,
                        index: int, p: int, alpha: float = 0.1,
                        quad_degree: int | None = None):
    """Weighted L2 projection of a scalar sampler onto one element or facet.

    ``fn(x, t)`` is sampled at elevated quadrature points; for alpha = 0 the
    result is the plain L2 projection.  ``index`` selects the prism (prism
    kinds) or the facet (FACET_Q).
    """
    deg = quad_degree if quad_degree is not None else 2 * p + 6
    dt = slab.dt
    n_t = (deg + 2) // 2
    t_pts, t_w = np.polynomial.legendre.leggauss(n_t)
    wf_t = np.exp(-alpha * (1.0 + t_pts) * dt / 2.0)

    if space_kind is SpaceKind.FACET_Q:
        basis = make_basis(space_kind, p)
        line = make_quadrature("interval", deg)
        s_pts, s_w = line.points[:, 0], line.weights
        pts = np.column_stack([np.repeat(t_pts, len(s_pts)), np.tile(s_pts, n_t)])
        w = (t_w[:, None] * s_w[None, :]).ravel() * np.repeat(wf_t, len(s_pts))
        tab = basis.values(pts)
        x = slab.facet_points(index, np.tile(s_pts, n_t))
        t_phys = slab.t_start + (1.0 + pts[:, 0]) * dt / 2.0
        vals = np.asarray(fn(x, t_phys), dtype=float)
    elif space_kind in (SpaceKind.PRISM_PP, SpaceKind.PRISM_TILDE_W):
        basis = make_basis(space_kind, p)
        tri = make_quadrature("triangle", deg)
        pts = np.column_stack([
            np.repeat(t_pts, tri.n_points),
            np.tile(tri.points, (n_t, 1)),
        ])
        w = (t_w[:, None] * tri.weights[None, :]).ravel() * np.repeat(wf_t, tri.n_points)
        tab = basis.values(pts)
        x = slab.c[index] + pts[:, 1:] @ slab.B[index].T
        t_phys = slab.t_start + (1.0 + pts[:, 0]) * dt / 2.0
        vals = np.asarray(fn(x, t_phys), dtype=float)
    else:
        raise ValueError(f"unsupported space kind {space_kind}")

    gram = np.einsum("ik,k,jk->ij", tab, w, tab)
    rhs = tab @ (w * vals)
    return np.linalg.solve(gram, rhs)


def projection_error_weighted(slab: SpaceTimeSlab, ws: ProjectionWorkspace,
                              q_coeffs, q_fn, alpha: float,
                              relative: bool = False):
    """Weighted L2(slab) norm of q - Pi_V q from projected coefficients.

    With ``relative=True`` the error is normalized by the weighted norm of
    q itself on the slab, removing the sqrt(dt) measure factor so refinement
    rates in dt are directly comparable to the h rates.
    """
    dt = slab.dt
    wf_t = np.exp(-alpha * (1.0 + ws.t_pts) * dt / 2.0)
    wv = ws.vol_w * np.repeat(wf_t, ws.nqs)
    t_vol = slab.t_start + (1.0 + ws.vol_ref[:, 0]) * dt / 2.0
    xy = slab.c[:, None, :] + ws.vol_ref[None, :, 1:] @ np.transpose(slab.B, (0, 2, 1))
    nT = slab.n_prisms
    qv = np.asarray(q_fn(xy.reshape(-1, 2), np.tile(t_vol, nT)), dtype=float)
    qv = qv.reshape(nT, -1, 2)
    qh = np.einsum("tcb,bk->tck", q_coeffs, ws.PHI)
    diff = (qv[:, :, 0] - qh[:, 0])**2 + (qv[:, :, 1] - qh[:, 1])**2
    J = 0.5 * dt * np.abs(slab.detB)
    err = math.sqrt(float(np.einsum("t,tk,k->", J, diff, wv)))
    if not relative:
        return err
    mag = qv[:, :, 0]**2 + qv[:, :, 1]**2
    norm = math.sqrt(float(np.einsum("t,tk,k->", J, mag, wv)))
    return err / norm


_DT_STUDY_MESH = {1: 192, 2: 96, 3: 64}


def measure_projection_rates(wave, p: int, tau: float = 5.0, alpha: float = 0.1,
                             h_levels: int = 4, dt_levels: int = 4,
                             base_m: int = 2, dt_fixed: float = 1e-3,
                             m_fixed: int | None = None, dt_start: float = 1.0,
                             domain=(-1.0, 1.0, 1.0)):
    """Measure approximation orders of the projection in h and in dt.

    Refines the mesh at a tiny fixed time step, then the time step on a
    fixed fine mesh, projecting the analytic harmonic-wave fields each time.
    Errors are relative (normalized by the weighted norm of q on the slab),
    so both orders approach p+1.  Returns rows of
    {study, level, h, dt, err_q, order}.
    """
    from .mesh import apply_periodic, build_structured_mesh

    ws = ProjectionWorkspace(p)
    if m_fixed is None:
        m_fixed = _DT_STUDY_MESH.get(p, 64)

    def q_fn(x, t):
        return wave.q(x, t)

    def v_fn(x, t):
        return wave.v(x, t)

    rows = []
    prev = None
    for lvl in range(h_levels):
        m = base_m * 2**lvl
        mesh = apply_periodic(build_structured_mesh(m, m, domain=domain))
        slab = extrude_slab(mesh, 0.0, dt_fixed)
        q_c, _, _ = project_slab(slab, q_fn, v_fn, p, tau, alpha, ws=ws)
        err = projection_error_weighted(slab, ws, q_c, q_fn, alpha, relative=True)
        order = math.log2(prev / err) if prev else None
        rows.append({"study": "h", "level": lvl, "h": mesh.h_max(),
                     "dt": dt_fixed, "err_q": err, "order": order})
        prev = err

    mesh = apply_periodic(build_structured_mesh(m_fixed, m_fixed, domain=domain))
    prev = None
    for lvl in range(dt_levels):
        dt = dt_start / 2**lvl
        slab = extrude_slab(mesh, 0.0, dt)
        q_c, _, _ = project_slab(slab, q_fn, v_fn, p, tau, alpha, ws=ws)
        err = projection_error_weighted(slab, ws, q_c, q_fn, alpha, relative=True)
        order = math.log2(prev / err) if prev else None
        rows.append({"study": "dt", "level": lvl, "h": mesh.h_max(),
                     "dt": dt, "err_q": err, "order": order})
        prev = err
    return rows
