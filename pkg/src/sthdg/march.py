"""Global condensed systems over facet unknowns and slab-by-slab marching.

Static condensation leaves one global linear system per slab in the facet
variable only.  The operator is identical for every slab of a constant-step
march, so the sparse factorization is computed once and reused; each slab
contributes a new right-hand side built from the previous slab's top traces.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from .basis import make_quadrature
from .local import DiscreteSpace, SlabOperators, energy_identity_check
from .mesh import EdgeTag, SpatialMesh, SpaceTimeSlab, extrude_slab

__all__ = [
    "SolverError",
    "GlobalSystem",
    "SlabSolution",
    "assemble_global",
    "solve_slab",
    "march",
    "initial_traces",
    "write_checkpoint",
    "load_checkpoint",
]


class SolverError(Exception):
    pass


@dataclass
class GlobalSystem:
    """Sparse condensed system over the facet unknowns of one slab."""

    n_dofs: int
    block_size: int
    matrix: sparse.csr_matrix
    solver: str = "direct"
    iter_tol: float = 1e-10
    _factor: object = None
    _precond: object = None

    def dof_block(self, facet: int) -> slice:
        return slice(facet * self.block_size, (facet + 1) * self.block_size)


def assemble_global(slab: SpaceTimeSlab, ops: SlabOperators,
                    solver: str = "direct", iter_tol: float = 1e-10) -> GlobalSystem:
    """Scatter the per-element Schur blocks into the facet system.

    Facet DOF blocks are contiguous and ordered by facet (primary edge)
    index; periodic facet pairs were merged at extrusion so both sides hit
    the same block.
    """
    nf = ops.space.nf
    n_dofs = slab.n_facets * nf
    nT = slab.n_prisms

    sides = np.zeros(slab.n_facets, dtype=np.int64)
    for le in range(3):
        np.add.at(sides, slab.tri_facets[:, le], 1)
    expected = np.where(slab.facet_role == 0, 2, 1)  # interior facets: 2 sides
    if not np.array_equal(sides, expected):
        bad = int(np.flatnonzero(sides != expected)[0])
        raise SolverError(
            f"facet {bad}: dof block has {sides[bad]} adjacent prisms, "
            f"expected {expected[bad]} (dof_map collision)")

    # global block indices of each element's 3 facet blocks
    base = slab.tri_facets * nf                         # (T, 3)
    offs = np.arange(nf)
    loc = (base[:, :, None] + offs[None, None, :]).reshape(nT, 3 * nf)
    rows = np.repeat(loc, 3 * nf, axis=1).ravel()
    cols = np.tile(loc, (1, 3 * nf)).ravel()
    mat = sparse.coo_matrix((ops.schur.ravel(), (rows, cols)),
                            shape=(n_dofs, n_dofs)).tocsr()
    mat.sum_duplicates()
    return GlobalSystem(n_dofs=n_dofs, block_size=nf, matrix=mat,
                        solver=solver, iter_tol=iter_tol)


def _block_jacobi(system: GlobalSystem):
    nf = system.block_size
    n_blocks = system.n_dofs // nf
    inv = np.empty((n_blocks, nf, nf))
    dense = system.matrix
    for b in range(n_blocks):
        blk = dense[b * nf:(b + 1) * nf, b * nf:(b + 1) * nf].toarray()
        inv[b] = np.linalg.inv(blk)

    def apply(x):
        return (inv @ x.reshape(n_blocks, nf, 1)).ravel()

    return spla.LinearOperator((system.n_dofs, system.n_dofs), matvec=apply)


def solve_slab(system: GlobalSystem, rhs: np.ndarray, slab_index: int = 0):
    """Solve the condensed system; returns (lambda, relative residual)."""
    if system.solver == "direct":
        if system._factor is None:
            try:
                system._factor = spla.splu(system.matrix.tocsc())
            except RuntimeError as exc:
                raise SolverError(
                    f"slab {slab_index}: sparse factorization failed ({exc}); "
                    "check tau/alpha configuration") from exc
        lam = system._factor.solve(rhs)
    elif system.solver == "iterative":
        if system._precond is None:
            system._precond = _block_jacobi(system)
        lam, info = spla.gmres(system.matrix, rhs, rtol=system.iter_tol,
                               atol=0.0, M=system._precond, maxiter=2000)
        if info != 0:
            raise SolverError(f"slab {slab_index}: GMRES failed to converge (info={info})")
    else:
        raise SolverError(f"unknown solver {system.solver!r}")
    norm_b = np.linalg.norm(rhs)
    res = np.linalg.norm(system.matrix @ lam - rhs)
    rel = res / norm_b if norm_b > 0 else res
    if not np.isfinite(rel) or (norm_b > 0 and rel > 1e-6):
        raise SolverError(f"slab {slab_index}: solver residual {rel:.3e}")
    return lam, rel


@dataclass
class SlabSolution:
    """Coefficient data of one solved slab plus the traces handed onward.

    ``top_trace_q`` and ``top_trace_lambda`` are exact polynomial time
    slices at t_{n+1} (no projection), in the spatial triangle basis and the
    per-edge interval basis respectively.  ``top_trace_zeta`` is the surface
    trace of v at t_{n+1}, the wave height the next slab consumes under the
    default handoff.
    """

    index: int
    t_start: float
    dt: float
    q_coeffs: np.ndarray          # (T, 2, nv)
    v_coeffs: np.ndarray          # (T, nv)
    lambda_coeffs: np.ndarray     # (F, nf)
    top_trace_q: np.ndarray       # (T, 2, ntri)
    top_trace_lambda: np.ndarray  # (n_surface, p+1)
    top_trace_zeta: np.ndarray = None   # (n_surface, p+1)
    residual: float = 0.0
    energy: object = None

    @property
    def t_end(self) -> float:
        return self.t_start + self.dt


def _top_traces(space: DiscreteSpace, slab, lam, q_coeffs):
    p1 = space.p + 1
    nT = len(q_coeffs)
    qc = q_coeffs.reshape(nT, 2, space.ntri, p1)
    top_q = qc @ space.LT_TOP
    surf = slab.surface_facets
    lc = lam[surf].reshape(len(surf), p1, p1)
    top_lam = lc @ space.LT_TOP
    return top_q, top_lam


def _surface_sides(slab):
    """(element, local edge, orientation) of each free-surface facet."""
    surf = slab.surface_facets
    elem = np.empty(len(surf), dtype=np.int64)
    ledge = np.empty(len(surf), dtype=np.int64)
    orient = np.empty(len(surf), dtype=np.int64)
    lookup = {int(f): k for k, f in enumerate(surf)}
    for t in range(slab.n_prisms):
        for le in range(3):
            k = lookup.get(int(slab.tri_facets[t, le]))
            if k is not None:
                elem[k], ledge[k], orient[k] = t, le, slab.tri_orient[t, le]
    return elem, ledge, orient


def _surface_v_trace(space: DiscreteSpace, sides, v_coeffs):
    """Edgewise projection of v's free-surface trace at the slab top.

    The trace of a prism polynomial along an edge at fixed time has degree
    at most p, so the quadrature projection onto the interval basis is exact.
    """
    elem, ledge, orient = sides
    tabs = space.SIDE_TOP[ledge, orient]              # (n_surf, nv, n_s)
    vals = np.einsum("fi,fik->fk", v_coeffs[elem], tabs)
    return vals @ (space.s_w[:, None] * space.INT.T)


def initial_traces(mesh: SpatialMesh, slab: SpaceTimeSlab, space: DiscreteSpace,
                   problem):
    """Unweighted elementwise/edgewise L2 projections of the initial data.

    q(0) = -grad(phi0) is projected onto the per-triangle polynomial space;
    the initial surface height onto each free-surface edge's interval space.
    """
    p = space.p
    rule = make_quadrature("triangle", 2 * p + 6)
    tri_tab = space.tri.values(rule.points)
    phys = slab.c[:, None, :] + rule.points[None, :, :] @ np.transpose(slab.B, (0, 2, 1))
    qvals = np.asarray(problem.initial_q(phys.reshape(-1, 2)), dtype=float)
    qvals = qvals.reshape(slab.n_prisms, rule.n_points, 2)
    # orthonormal reference basis: projection needs no mass solve
    q_minus = np.einsum("tqc,q,bq->tcb", qvals, rule.weights, tri_tab)

    line = make_quadrature("interval", 2 * p + 6)
    int_tab = space.interval.values(line.points)
    surf = slab.surface_facets
    lam_minus = np.zeros((len(surf), p + 1))
    for k, fi in enumerate(surf):
        x = slab.facet_points(fi, line.points[:, 0])
        z = np.asarray(problem.initial_zeta(x[:, 0]), dtype=float)
        lam_minus[k] = int_tab @ (line.weights * z)
    return q_minus, lam_minus


def _slab_count(T: float, dt: float):
    n = T / dt
    n_round = round(n)
    if abs(n - n_round) < 1e-9 and n_round >= 1:
        return n_round, None
    n_full = math.floor(n)
    rem = T - n_full * dt
    warnings.warn(
        f"final time {T} is not a multiple of dt={dt}; "
        f"appending a short final slab of length {rem:.3e}")
    return n_full, rem


def march(mesh: SpatialMesh, problem, p: int, dt: float, T: float,
          tau: float = 5.0, alpha: float = 0.1, time_quad_extra: int = 0,
          solver: str = "direct", iter_tol: float = 1e-10,
          energy_check: bool = False, checkpoint_every: int = 0,
          checkpoint_dir=None, resume=None, on_slab=None,
          monolithic: bool = False, t0: float = 0.0,
          keep_solutions: bool = True, lambda_handoff: str = "surface_v"):
    """March the HDG solution slab by slab from t0 to t0 + T.

    Returns the list of :class:`SlabSolution` (empty if ``keep_solutions``
    is False; use ``on_slab`` to stream results).  Initial traces are the
    L2 projections of the problem's data; afterwards each slab consumes the
    top traces of its predecessor.

    ``lambda_handoff`` selects the surface datum passed between slabs:
    ``surface_v`` (default) hands over the trace of v, the wave height,
    which reproduces the reference convergence tables including the fixed-h
    divergence; ``lambda_slice`` hands over the facet variable's own time
    slice, which avoids the dt^{-1} h^{p+1} error accumulation entirely.
    """
    if lambda_handoff not in ("surface_v", "lambda_slice"):
        raise ValueError(f"unknown lambda handoff {lambda_handoff!r}")
    space = DiscreteSpace(p, time_quad_extra)
    n_slabs, rem = _slab_count(T, dt)
    slab0 = extrude_slab(mesh, t0, dt, 0)
    ops = SlabOperators(slab0, space, tau, alpha)
    system = None
    if not monolithic:
        system = assemble_global(slab0, ops, solver=solver, iter_tol=iter_tol)

    flux_fns = {}
    for code in np.unique(slab0.facet_tag):
        tag = EdgeTag(code)
        g = problem.facet_flux(tag)
        if g is not None:
            flux_fns[tag] = g

    surf_sides = _surface_sides(slab0)

    start = 0
    if resume is not None:
        state = load_checkpoint(resume)
        _check_resume(state, mesh, slab0, space)
        start = state["slab"] + 1
        q_minus = np.asarray(state["q_trace"])
        lam_minus = np.asarray(state["lambda_trace"])
    else:
        q_minus, lam_minus = initial_traces(mesh, slab0, space, problem)

    solutions = []
    total = n_slabs + (1 if rem is not None else 0)
    for n in range(start, total):
        if rem is not None and n == n_slabs:
            slab_n = extrude_slab(mesh, t0 + n * dt, rem, n)
            ops = SlabOperators(slab_n, space, tau, alpha)
            system = None if monolithic else assemble_global(
                slab_n, ops, solver=solver, iter_tol=iter_tol)
        else:
            slab_n = replace(slab0, t_start=t0 + n * dt, index=n)

        b_e = ops.element_rhs(q_minus)
        b_facet = ops.facet_rhs(lam_minus, flux_fns, slab_n.t_start)
        if monolithic:
            lam, u, rel = _solve_monolithic(slab_n, ops, b_e, b_facet, n)
        else:
            h, rhs = ops.condense_rhs(b_e, b_facet)
            lam_flat, rel = solve_slab(system, rhs.ravel(), n)
            lam = lam_flat.reshape(slab_n.n_facets, space.nf)
            u = ops.back_substitute_all(h, lam)

        nv = space.nv
        q_coeffs = np.stack([u[:, :nv], u[:, nv:2 * nv]], axis=1)
        v_coeffs = u[:, 2 * nv:]
        top_q, top_lam = _top_traces(space, slab_n, lam, q_coeffs)
        top_zeta = _surface_v_trace(space, surf_sides, v_coeffs)
        sol = SlabSolution(index=n, t_start=slab_n.t_start, dt=slab_n.dt,
                           q_coeffs=q_coeffs, v_coeffs=v_coeffs,
                           lambda_coeffs=lam, top_trace_q=top_q,
                           top_trace_lambda=top_lam, top_trace_zeta=top_zeta,
                           residual=rel)
        if energy_check:
            sol.energy = energy_identity_check(
                ops, q_coeffs, v_coeffs, lam, q_minus, lam_minus,
                flux_fns=flux_fns, t_start=slab_n.t_start)
        if keep_solutions:
            solutions.append(sol)
        if on_slab is not None:
            on_slab(sol)
        q_minus = top_q
        lam_minus = top_zeta if lambda_handoff == "surface_v" else top_lam
        if checkpoint_every and (n + 1) % checkpoint_every == 0 and checkpoint_dir:
            write_checkpoint(checkpoint_dir, sol, space, lam_minus)
    return solutions


def _solve_monolithic(slab, ops, b_e, b_facet, slab_index):
    """Dense full-field solve used as the condensation oracle (small meshes)."""
    space = ops.space
    ne, nf = space.ne, space.nf
    nT, nF = slab.n_prisms, slab.n_facets
    n_tot = nT * ne + nF * nf
    if n_tot > 20000:
        raise SolverError(f"monolithic solve refused for {n_tot} unknowns")
    A = np.zeros((n_tot, n_tot))
    rhs = np.zeros(n_tot)
    off_f = nT * ne
    for e in range(nT):
        se = slice(e * ne, (e + 1) * ne)
        A[se, se] = ops.A_ee[e]
        rhs[se] = b_e[e]
        for le in range(3):
            f = slab.tri_facets[e, le]
            sf = slice(off_f + f * nf, off_f + (f + 1) * nf)
            sl = slice(le * nf, (le + 1) * nf)
            A[se, sf] += ops.A_ef[e][:, sl]
            A[sf, se] += ops.A_fe[e][sl, :]
            A[sf, sf] += ops.A_ff[e][sl, sl]
    rhs[off_f:] += b_facet.ravel()
    try:
        sol = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"slab {slab_index}: monolithic solve failed") from exc
    norm_b = np.linalg.norm(rhs)
    rel = np.linalg.norm(A @ sol - rhs) / (norm_b if norm_b > 0 else 1.0)
    u = sol[:off_f].reshape(nT, ne)
    lam = sol[off_f:].reshape(nF, nf)
    return lam, u, rel


def _check_resume(state, mesh, slab, space):
    counts = state.get("counts", {})
    want = {"n_triangles": mesh.n_triangles,
            "n_surface": len(slab.surface_facets),
            "tri_dim": space.ntri}
    for key, val in want.items():
        if counts.get(key) != val:
            raise SolverError(
                f"checkpoint mismatch: {key}={counts.get(key)} but run has {val}")
    if state.get("p") != space.p:
        raise SolverError(f"checkpoint p={state.get('p')} differs from run p={space.p}")


def write_checkpoint(directory, sol: SlabSolution, space: DiscreteSpace,
                     lam_handout: np.ndarray | None = None):
    """Serialize the slab's top traces (JSON header + flat arrays).

    ``lam_handout`` is the surface datum the next slab consumes (defaults to
    the facet variable's slice).
    """
    import pathlib

    if lam_handout is None:
        lam_handout = sol.top_trace_lambda
    path = pathlib.Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    out = path / f"checkpoint_{sol.index:05d}.json"
    payload = {
        "slab": sol.index,
        "t": sol.t_end,
        "p": space.p,
        "counts": {
            "n_triangles": sol.top_trace_q.shape[0],
            "n_surface": lam_handout.shape[0],
            "tri_dim": sol.top_trace_q.shape[2],
        },
        "q_trace": sol.top_trace_q.ravel().tolist(),
        "lambda_trace": lam_handout.ravel().tolist(),
    }
    with open(out, "w") as fh:
        json.dump(payload, fh)
    return out


def load_checkpoint(path):
    with open(path) as fh:
        state = json.load(fh)
    c = state["counts"]
    state["q_trace"] = np.asarray(state["q_trace"]).reshape(
        c["n_triangles"], 2, c["tri_dim"])
    p1 = int(round(len(state["lambda_trace"]) / max(c["n_surface"], 1)))
    state["lambda_trace"] = np.asarray(state["lambda_trace"]).reshape(
        c["n_surface"], p1)
    return state
