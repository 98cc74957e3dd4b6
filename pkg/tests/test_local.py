import math

import numpy as np
import pytest

from sthdg.basis import SpaceKind, make_basis, make_quadrature
from sthdg.local import (AssemblyError, DiscreteSpace, SlabOperators, WeightFn,
                         assemble_local, back_substitute,
                         energy_identity_check)
from sthdg.march import initial_traces, march
from sthdg.mesh import (EdgeTag, apply_periodic, build_structured_mesh,
                        extrude_slab)
from sthdg.problems import HarmonicWave, HarmonicWaveProblem


def tank_slab(nx=1, ny=1, dt=0.25, domain=(0.0, 1.0, 1.0)):
    mesh = build_structured_mesh(nx, ny, domain=domain, side_mode="tank")
    return extrude_slab(mesh, 0.0, dt, 0)


def test_weight_fn_invariants():
    w = WeightFn(alpha=0.1, t_n=2.0)
    dt = 0.25
    assert np.isclose(w(2.0), 1.0)
    assert np.isclose(w(2.0 + dt), math.exp(-0.1 * dt))
    t = np.linspace(2.0, 2.25, 7)
    assert np.all(w.derivative(t) < 0)
    assert np.allclose(w.derivative(t), -0.1 * w(t))


def test_positive_tau_alpha_required():
    slab = tank_slab()
    space = DiscreteSpace(1)
    with pytest.raises(AssemblyError, match="tau"):
        SlabOperators(slab, space, 0.0, 0.1)
    with pytest.raises(AssemblyError, match="alpha"):
        SlabOperators(slab, space, 5.0, 0.0)


def _hand_assembled_element(slab, space, elem, tau, alpha):
    """Loop-based reassembly of one prism's blocks, independent of the
    production einsum path (facet geometry recovered from physical points)."""
    p = space.p
    nv, nf = space.nv, space.nf
    dt = slab.dt
    prism = space.prism
    facet = space.facet
    B, c = slab.B[elem], slab.c[elem]
    detB = abs(slab.detB[elem])
    Binv = slab.Binv[elem]

    vol = make_quadrature("prism", 2 * p + 2)
    A = np.zeros((3 * nv, 3 * nv))
    E = np.zeros((3 * nv, 3 * nf))
    F = np.zeros((3 * nf, 3 * nv))
    G = np.zeros((3 * nf, 3 * nf))
    sq = (slice(0, nv), slice(nv, 2 * nv))
    sv = slice(2 * nv, 3 * nv)

    vals = prism.values(vol.points)
    grads = prism.gradients(vol.points)
    for k in range(vol.n_points):
        that = vol.points[k, 0]
        f = math.exp(-alpha * (1.0 + that) * dt / 2.0)
        fp = -alpha * f
        w = vol.weights[k] * 0.5 * dt * detB
        for i in range(nv):
            dti = (2.0 / dt) * grads[i, 0, k]
            dxi = Binv[0, 0] * grads[i, 1, k] + Binv[1, 0] * grads[i, 2, k]
            dyi = Binv[0, 1] * grads[i, 1, k] + Binv[1, 1] * grads[i, 2, k]
            for j in range(nv):
                A[i, j] += w * (-vals[j, k] * f * dti - vals[j, k] * vals[i, k] * fp)
                A[nv + i, nv + j] += w * (-vals[j, k] * f * dti
                                          - vals[j, k] * vals[i, k] * fp)
                A[i, sv.start + j] += w * vals[j, k] * f * dxi
                A[nv + i, sv.start + j] += w * vals[j, k] * f * dyi
                dxj = Binv[0, 0] * grads[j, 1, k] + Binv[1, 0] * grads[j, 2, k]
                dyj = Binv[0, 1] * grads[j, 1, k] + Binv[1, 1] * grads[j, 2, k]
                A[sv.start + i, j] += -w * vals[i, k] * f * dxj
                A[sv.start + i, nv + j] += -w * vals[i, k] * f * dyj

    tri = make_quadrature("triangle", 2 * p + 2)
    top = np.column_stack([np.ones(tri.n_points), tri.points])
    tv = prism.values(top)
    e2b = math.exp(-alpha * dt)
    for k in range(tri.n_points):
        w = tri.weights[k] * detB
        for i in range(nv):
            for j in range(nv):
                A[i, j] += w * e2b * tv[j, k] * tv[i, k]
                A[nv + i, nv + j] += w * e2b * tv[j, k] * tv[i, k]

    # facet contributions with geometry recovered from physical coordinates
    verts = slab.mesh.vertices[slab.mesh.triangles[elem]]
    centroid = verts.mean(axis=0)
    line = make_quadrature("interval", 2 * p + 2)
    tq = np.polynomial.legendre.leggauss(p + 2 + space.time_quad_extra)
    for le in range(3):
        fi = slab.tri_facets[elem, le]
        p0, p1 = slab.facet_p0[fi], slab.facet_p1[fi]
        ell = np.hypot(*(p1 - p0))
        d = (p1 - p0) / ell
        n = np.array([d[1], -d[0]])
        if np.dot(n, 0.5 * (p0 + p1) - centroid) < 0:
            n = -n
        lf = slice(le * nf, (le + 1) * nf)
        for kt in range(len(tq[0])):
            that = tq[0][kt]
            f = math.exp(-alpha * (1.0 + that) * dt / 2.0)
            fp = -alpha * f
            for ks in range(line.n_points):
                s = line.points[ks, 0]
                x = 0.5 * (p0 + p1) + 0.5 * s * (p1 - p0)
                ref_xy = Binv.T @ (x - c) if False else (x - c) @ Binv.T
                pt = np.array([[that, ref_xy[0], ref_xy[1]]])
                phi = prism.values(pt)[:, 0]
                chi = facet.values(np.array([[that, s]]))[:, 0]
                dchi = facet.gradients(np.array([[that, s]]))[:, 0, 0]
                w = tq[1][kt] * line.weights[ks] * 0.25 * dt * ell
                for i in range(nv):
                    for j in range(nv):
                        A[sv.start + i, sv.start + j] += w * tau * phi[j] * phi[i] * f
                    for j in range(nf):
                        E[i, lf.start + j] += -n[0] * w * chi[j] * phi[i] * f
                        E[nv + i, lf.start + j] += -n[1] * w * chi[j] * phi[i] * f
                        E[sv.start + i, lf.start + j] += -tau * w * chi[j] * phi[i] * f
                        F[lf.start + j, i] += n[0] * w * phi[i] * chi[j] * f
                        F[lf.start + j, nv + i] += n[1] * w * phi[i] * chi[j] * f
                        F[lf.start + j, sv.start + i] += -tau * w * phi[i] * chi[j] * f
                for i in range(nf):
                    for j in range(nf):
                        G[lf.start + j, lf.start + i] += w * tau * chi[i] * chi[j] * f
                        if slab.facet_role[fi] == 1:  # free surface
                            G[lf.start + j, lf.start + i] += w * chi[i] * (
                                -(2.0 / dt) * dchi[j] * f - chi[j] * fp)
        if slab.facet_role[fi] == 1:
            for ks in range(line.n_points):
                s = line.points[ks, 0]
                chi_t = facet.values(np.array([[1.0, s]]))[:, 0]
                w = line.weights[ks] * 0.5 * ell
                for i in range(nf):
                    for j in range(nf):
                        G[lf.start + j, lf.start + i] += w * e2b * chi_t[i] * chi_t[j]
    return A, E, F, G


@pytest.mark.parametrize("p", [1, 2])
def test_local_blocks_against_hand_assembly(p):
    slab = tank_slab(2, 1, dt=0.25)
    space = DiscreteSpace(p)
    ops = SlabOperators(slab, space, 5.0, 0.1)
    for elem in (0, 1):
        A, E, F, G = _hand_assembled_element(slab, space, elem, 5.0, 0.1)
        scale = np.max(np.abs(A))
        assert np.max(np.abs(ops.A_ee[elem] - A)) < 1e-12 * scale
        assert np.max(np.abs(ops.A_ef[elem] - E)) < 1e-12 * scale
        assert np.max(np.abs(ops.A_fe[elem] - F)) < 1e-12 * scale
        assert np.max(np.abs(ops.A_ff[elem] - G)) < 1e-12 * scale


def test_schur_matches_explicit_block_elimination():
    # single prism, p=1, tau=5, alpha=0.1, dt=0.25
    slab = tank_slab(1, 1, dt=0.25)
    space = DiscreteSpace(1)
    op = assemble_local(slab, space, 0, 5.0, 0.1)
    dense = np.block([[op.A_ee, op.A_ef], [op.A_fe, op.A_ff]])
    ne = op.A_ee.shape[0]
    S = dense[ne:, ne:] - dense[ne:, :ne] @ np.linalg.solve(dense[:ne, :ne],
                                                            dense[:ne, ne:])
    assert np.max(np.abs(op.schur - S)) < 1e-10


def test_alpha_limit_matches_unweighted_assembly():
    # with alpha -> 0 the weight is 1 and the f' terms vanish
    slab = tank_slab(2, 2, dt=0.5)
    space = DiscreteSpace(2)
    tiny = SlabOperators(slab, space, 5.0, 1e-300)
    small = SlabOperators(slab, space, 5.0, 1e-13)
    for name in ("A_ee", "A_ef", "A_fe", "A_ff"):
        a, b = getattr(tiny, name), getattr(small, name)
        assert np.max(np.abs(a - b)) < 1e-12 * max(np.max(np.abs(a)), 1.0)


def test_tau_linearity_of_stabilization():
    slab = tank_slab(2, 1)
    space = DiscreteSpace(1)
    op1 = SlabOperators(slab, space, 1.0, 0.1)
    op2 = SlabOperators(slab, space, 2.0, 0.1)
    op5 = SlabOperators(slab, space, 5.0, 0.1)
    # stabilization blocks are linear in tau: A(5)-A(1) = 4 (A(2)-A(1))
    for name in ("A_ee", "A_ef", "A_fe", "A_ff"):
        d51 = getattr(op5, name) - getattr(op1, name)
        d21 = getattr(op2, name) - getattr(op1, name)
        assert np.allclose(d51, 4.0 * d21, atol=1e-12)


def test_back_substitute_zero_and_residual():
    slab = tank_slab(1, 1)
    space = DiscreteSpace(1)
    op = assemble_local(slab, space, 0, 5.0, 0.1)
    nfl = op.A_ef.shape[1]
    u0 = back_substitute(op, np.zeros(nfl))
    assert np.max(np.abs(u0)) == 0.0
    rng = np.random.default_rng(5)
    lam = rng.standard_normal(nfl)
    b_e = rng.standard_normal(op.A_ee.shape[0])
    u = back_substitute(op, lam, b_e=b_e)
    resid = op.A_ee @ u + op.A_ef @ lam - b_e
    assert np.max(np.abs(resid)) < 1e-10 * max(np.max(np.abs(b_e)), 1.0)
    with pytest.raises(ValueError, match="length"):
        back_substitute(op, np.zeros(nfl + 1))


def _polynomial_solution(p):
    # divergence-free pair satisfying the flux equation and the surface
    # condition on x2 = 0: potential x1 (c0 + c1 t) for p = 1,
    # (x1^2 - x2^2)(c0 + c1 t) for p = 2
    c0, c1 = 0.7, -0.4
    if p == 1:
        q = lambda x, t: np.stack([-np.full_like(np.asarray(t, dtype=float),
                                                 0.0) - (c0 + c1 * np.asarray(t)),
                                   np.zeros_like(np.asarray(t, dtype=float))],
                                  axis=-1)
        v = lambda x, t: -np.asarray(x)[..., 0] * c1
    else:
        q = lambda x, t: np.stack([
            -2.0 * np.asarray(x)[..., 0] * (c0 + c1 * np.asarray(t)),
            2.0 * np.asarray(x)[..., 1] * (c0 + c1 * np.asarray(t))], axis=-1)
        v = lambda x, t: -(np.asarray(x)[..., 0] ** 2
                           - np.asarray(x)[..., 1] ** 2) * c1
    return q, v


@pytest.mark.parametrize("p", [1, 2])
def test_galerkin_consistency_polynomial_solution(p):
    # an exact polynomial solution inserted into the full discrete system
    # (with its own traces and fluxes as data) leaves zero residual
    mesh = build_structured_mesh(2, 2, domain=(0.0, 1.0, 1.0), side_mode="tank")
    slab = extrude_slab(mesh, 0.0, 0.25, 0)
    space = DiscreteSpace(p)
    ops = SlabOperators(slab, space, 5.0, 0.1)
    q_fn, v_fn = _polynomial_solution(p)

    # exact coefficients by L2 projection (exact for polynomials in space)
    from sthdg.projection import weighted_l2_project

    nT = slab.n_prisms
    q_coeffs = np.zeros((nT, 2, space.nv))
    v_coeffs = np.zeros((nT, space.nv))
    for e in range(nT):
        for comp in range(2):
            fn = lambda x, t, c=comp: q_fn(x, t)[..., c]
            q_coeffs[e, comp] = weighted_l2_project(
                SpaceKind.PRISM_PP, fn, slab, e, p, alpha=0.0)
        v_coeffs[e] = weighted_l2_project(SpaceKind.PRISM_PP, v_fn, slab, e, p,
                                          alpha=0.0)
    lam_coeffs = np.zeros((slab.n_facets, space.nf))
    for fi in range(slab.n_facets):
        lam_coeffs[fi] = weighted_l2_project(
            SpaceKind.FACET_Q, v_fn, slab, fi, p, alpha=0.0)

    # data: traces of the exact solution at t_n, fluxes q.n on all walls
    tri_rule = make_quadrature("triangle", 2 * p + 6)
    tri_tab = space.tri.values(tri_rule.points)
    q_minus = np.zeros((nT, 2, space.ntri))
    for e in range(nT):
        xy = slab.c[e] + tri_rule.points @ slab.B[e].T
        qv = q_fn(xy, np.zeros(len(xy)))
        for comp in range(2):
            q_minus[e, comp] = tri_tab @ (tri_rule.weights * qv[:, comp])
    line = make_quadrature("interval", 2 * p + 6)
    int_tab = space.interval.values(line.points)
    surf = slab.surface_facets
    lam_minus = np.zeros((len(surf), p + 1))
    for k, fi in enumerate(surf):
        x = slab.facet_points(fi, line.points[:, 0])
        lam_minus[k] = int_tab @ (line.weights * v_fn(x, np.zeros(len(x))))

    normals = {EdgeTag.WAVE_MAKER: np.array([-1.0, 0.0]),
               EdgeTag.WALL: np.array([1.0, 0.0]),
               EdgeTag.BOTTOM: np.array([0.0, -1.0])}

    def flux_for(tag):
        n = normals[tag]
        return lambda x, t: q_fn(x, t) @ n

    flux_fns = {tag: flux_for(tag) for tag in normals}

    b_e = ops.element_rhs(q_minus)
    b_facet = ops.facet_rhs(lam_minus, flux_fns, slab.t_start)

    # residual of the full three-field system
    nfl = 3 * space.nf
    u = np.concatenate([q_coeffs[:, 0], q_coeffs[:, 1], v_coeffs], axis=1)
    lam_loc = lam_coeffs[slab.tri_facets].reshape(nT, nfl)
    res_elem = (np.einsum("tij,tj->ti", ops.A_ee, u)
                + np.einsum("tij,tj->ti", ops.A_ef, lam_loc) - b_e)
    res_facet = -b_facet.copy()
    nf = space.nf
    for le in range(3):
        blk = (np.einsum("tij,tj->ti", ops.A_fe[:, le * nf:(le + 1) * nf, :], u)
               + np.einsum("tij,tj->ti",
                           ops.A_ff[:, le * nf:(le + 1) * nf, le * nf:(le + 1) * nf],
                           lam_coeffs[slab.tri_facets[:, le]]))
        np.add.at(res_facet, slab.tri_facets[:, le], blk)
    scale = max(np.max(np.abs(b_e)), np.max(np.abs(b_facet)), 1.0)
    assert np.max(np.abs(res_elem)) < 1e-10 * scale
    assert np.max(np.abs(res_facet)) < 1e-10 * scale


def test_energy_identity_zero_data():
    slab = tank_slab(2, 2)
    space = DiscreteSpace(1)
    ops = SlabOperators(slab, space, 5.0, 0.1)
    nT, nF = slab.n_prisms, slab.n_facets
    rep = energy_identity_check(
        ops,
        np.zeros((nT, 2, space.nv)), np.zeros((nT, space.nv)),
        np.zeros((nF, space.nf)),
        np.zeros((nT, 2, space.ntri)),
        np.zeros((len(slab.surface_facets), space.p + 1)))
    assert all(v == 0.0 for v in rep.terms.values())
    assert rep.residual == 0.0


@pytest.mark.parametrize("p", [1, 2])
def test_energy_identity_harmonic_slab(p):
    wave = HarmonicWave.from_wavelength(1.0, 0.05)
    prob = HarmonicWaveProblem(wave)
    mesh = apply_periodic(build_structured_mesh(6, 6, domain=(-1, 1, 1)))
    sols = march(mesh, prob, p=p, dt=0.25, T=0.5, energy_check=True)
    for sol in sols:
        rep = sol.energy
        assert abs(rep.relative) < 1e-8
        assert all(v >= -1e-15 for v in rep.terms.values())


def test_condensation_matches_monolithic_march():
    wave = HarmonicWave.from_wavelength(1.0, 0.05)
    prob = HarmonicWaveProblem(wave)
    mesh = apply_periodic(build_structured_mesh(2, 2, domain=(-1, 1, 1)))
    for p in (1, 2):
        a = march(mesh, prob, p=p, dt=0.25, T=0.75)
        b = march(mesh, prob, p=p, dt=0.25, T=0.75, monolithic=True)
        for sa, sb in zip(a, b):
            for field in ("q_coeffs", "v_coeffs", "lambda_coeffs"):
                x, y = getattr(sa, field), getattr(sb, field)
                scale = max(np.max(np.abs(y)), 1e-30)
                assert np.max(np.abs(x - y)) / scale < 1e-9
