"""Error norms, convergence studies, profiles and report emission.

Errors against analytic solutions are unweighted L2 norms: the velocity
over the whole space-time domain and the surface trace over the lateral
free-surface boundary, both integrated with elevated quadrature against the
smooth exact fields.  Reports are deterministic CSV files; figures are
rendered next to them.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .basis import SpaceKind, make_basis, make_quadrature
from .march import march
from .mesh import apply_periodic, build_structured_mesh, extrude_slab, read_mesh_file
from .problems import (HarmonicWave, HarmonicWaveProblem, WaveMakerProblem,
                       WaveMakerSpec)

__all__ = [
    "ConfigError",
    "RunConfig",
    "ConvergenceReport",
    "error_q_spacetime",
    "error_lambda_surface",
    "run_study",
    "surface_profile",
    "surface_profile_csv",
    "run_simulation",
    "write_run_json",
]

SCHEMA_VERSION = "st-hdg-report-v1"

# Linear-wave study defaults (domain [-1,1] x [-1,0], wavelength 1, wave
# height 0.05).  Spatial families refine the structured grid by 2 per level;
# the time-study meshes are desk-scale choices fine enough that the temporal
# error dominates over the first four step halvings.
SPACE_STUDY = {1: {"dt": 1e-5, "steps": 200, "base_m": 3},
               2: {"dt": 1e-4, "steps": 20, "base_m": 3},
               3: {"dt": 1e-4, "steps": 10, "base_m": 3}}
TIME_STUDY_MESH = {1: (96, 96), 2: (96, 48), 3: (64, 32)}


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    """Resolved run/study configuration; defaults reproduce the reference
    setup tau=5, alpha=0.1."""

    problem: str = "harmonic"
    p: int = 1
    nx: int = 24
    ny: int = 24
    domain: tuple = (-1.0, 1.0, 1.0)
    mesh_file: str | None = None
    dt: float = 0.25
    T: float = 1.0
    tau: float = 5.0
    alpha: float = 0.1
    study: str = "spacetime"
    levels: int = 4
    out_dir: str = "out"
    solver: str = "direct"
    checkpoint_every: int = 0
    time_quad_extra: int = 0
    wavemaker_literal: bool = False
    profile_times: tuple = ()
    points_per_edge: int = 10
    figures: bool = True
    energy_check: bool = False
    wavemaker_nx: int = 64
    wavemaker_ny: int = 4
    lambda_handoff: str = "surface_v"

    def validate(self):
        if self.problem not in ("harmonic", "wavemaker"):
            raise ConfigError(f"unknown problem {self.problem!r}")
        if self.study not in ("space", "time", "spacetime", "fixed_h"):
            raise ConfigError(f"unknown study {self.study!r}")
        if self.p < 1:
            raise ConfigError(f"p must be >= 1, got {self.p}")
        if self.dt <= 0 or self.T <= 0:
            raise ConfigError(f"dt and T must be positive (dt={self.dt}, T={self.T})")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.solver not in ("direct", "iterative"):
            raise ConfigError(f"unknown solver {self.solver!r}")
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.lambda_handoff not in ("surface_v", "lambda_slice"):
            raise ConfigError(f"unknown lambda_handoff {self.lambda_handoff!r}")
        return self

    @classmethod
    def from_file(cls, path):
        text_path = str(path)
        try:
            if text_path.endswith(".toml"):
                try:
                    import tomllib
                except ImportError:
                    import tomli as tomllib
                with open(path, "rb") as fh:
                    data = tomllib.load(fh)
            else:
                with open(path) as fh:
                    data = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except Exception as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        return cls().apply(data)

    def apply(self, overrides: dict) -> "RunConfig":
        known = set(self.__dataclass_fields__)
        bad = set(overrides) - known
        if bad:
            raise ConfigError(f"unknown config keys: {sorted(bad)}")
        clean = {}
        for key, val in overrides.items():
            if val is None:
                continue
            if key in ("domain", "profile_times") and isinstance(val, (list, tuple)):
                val = tuple(float(v) for v in val)
            clean[key] = val
        return replace(self, **clean)

    def resolved(self) -> dict:
        out = asdict(self)
        out["domain"] = list(self.domain)
        out["profile_times"] = list(self.profile_times)
        return out

    def config_hash(self) -> str:
        payload = self.resolved()
        payload.pop("out_dir", None)
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ConvergenceReport:
    """Rows of a refinement study plus identifying metadata."""

    rows: list = field(default_factory=list)
    p: int = 1
    study: str = ""
    config_hash: str = ""

    COLUMNS = ("level", "dofs", "dt", "h", "err_q", "order_q",
               "err_lambda", "order_lambda")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(f"# schema={SCHEMA_VERSION} study={self.study} "
                     f"p={self.p} config={self.config_hash}\n")
            writer = csv.writer(fh)
            writer.writerow(self.COLUMNS)
            for row in self.rows:
                writer.writerow([
                    row["level"], row["dofs"],
                    f"{row['dt']:.12g}", f"{row['h']:.12e}",
                    f"{row['err_q']:.12e}",
                    "" if row["order_q"] is None else f"{row['order_q']:.4f}",
                    f"{row['err_lambda']:.12e}",
                    "" if row["order_lambda"] is None else f"{row['order_lambda']:.4f}",
                ])
        return path


class _ErrorTables:
    """Elevated quadrature tables for error integration at degree p."""

    def __init__(self, p: int):
        deg = 2 * p + 4
        tri = make_quadrature("triangle", deg)
        n_t = (deg + 2) // 2
        t_pts, t_w = np.polynomial.legendre.leggauss(n_t)
        line = make_quadrature("interval", deg)
        self.t_pts, self.n_t = t_pts, n_t
        vol = np.column_stack([
            np.repeat(t_pts, tri.n_points),
            np.tile(tri.points, (n_t, 1)),
        ])
        self.vol_ref = vol
        self.vol_w = (t_w[:, None] * tri.weights[None, :]).ravel()
        prism = make_basis(SpaceKind.PRISM_PP, p)
        self.PHI = prism.values(vol)
        facet = make_basis(SpaceKind.FACET_Q, p)
        self.s_pts, self.s_w = line.points[:, 0], line.weights
        fac = np.column_stack([
            np.repeat(t_pts, line.n_points),
            np.tile(self.s_pts, n_t),
        ])
        self.fac_w = (t_w[:, None] * self.s_w[None, :]).ravel()
        self.fac_s = np.tile(self.s_pts, n_t)
        self.CHI = facet.values(fac)


def _group_by_dt(solutions):
    groups = {}
    for sol in solutions:
        groups.setdefault(sol.dt, []).append(sol)
    return groups


def error_q_spacetime(mesh, p, solutions, exact_q):
    """Unweighted L2 error of q over the union of all solved slabs."""
    if not solutions:
        raise ValueError("no slab solutions to integrate")
    tab = _ErrorTables(p)
    total = 0.0
    for dt, sols in _group_by_dt(solutions).items():
        slab = extrude_slab(mesh, sols[0].t_start, dt)
        J = 0.5 * dt * np.abs(slab.detB)
        xy = slab.c[:, None, :] + tab.vol_ref[None, :, 1:] @ np.transpose(slab.B, (0, 2, 1))
        flat = xy.reshape(-1, 2)
        nT = slab.n_prisms
        for sol in sols:
            t = sol.t_start + (1.0 + tab.vol_ref[:, 0]) * dt / 2.0
            qe = np.asarray(exact_q(flat, np.tile(t, nT)), dtype=float)
            qe = qe.reshape(nT, -1, 2)
            qh = np.einsum("tcb,bk->tck", sol.q_coeffs, tab.PHI)
            diff = (qe[:, :, 0] - qh[:, 0])**2 + (qe[:, :, 1] - qh[:, 1])**2
            total += float(np.einsum("t,tk,k->", J, diff, tab.vol_w))
    return math.sqrt(total)


def error_lambda_surface(mesh, p, solutions, exact_zeta):
    """Unweighted L2 error of the surface trace over Gamma_S x (0, T)."""
    if not solutions:
        raise ValueError("no slab solutions to integrate")
    tab = _ErrorTables(p)
    total = 0.0
    for dt, sols in _group_by_dt(solutions).items():
        slab = extrude_slab(mesh, sols[0].t_start, dt)
        surf = slab.surface_facets
        jf = 0.25 * dt * slab.facet_len[surf]
        x1 = np.stack([slab.facet_points(fi, tab.fac_s)[:, 0] for fi in surf])
        for sol in sols:
            t = sol.t_start + (1.0 + np.repeat(tab.t_pts, len(tab.s_pts))) * dt / 2.0
            ze = np.asarray(exact_zeta(x1, t[None, :]), dtype=float)
            lh = sol.lambda_coeffs[surf] @ tab.CHI
            total += float(np.einsum("f,fk,k->", jf, (ze - lh)**2, tab.fac_w))
    return math.sqrt(total)


def _wave_problem():
    wave = HarmonicWave.from_wavelength(1.0, 0.05)
    return wave, HarmonicWaveProblem(wave)


def _harmonic_mesh(nx, ny, domain=(-1.0, 1.0, 1.0)):
    return apply_periodic(build_structured_mesh(nx, ny, domain=domain,
                                                side_mode="periodic"))


def _study_row(level, mesh, p, dt, err_q, err_lambda, prev):
    dofs = mesh.n_active_edges * (p + 1) ** 2
    order_q = order_l = None
    if prev is not None:
        order_q = math.log2(prev[0] / err_q)
        order_l = math.log2(prev[1] / err_lambda)
    return {"level": level, "dofs": dofs, "dt": dt, "h": mesh.h_max(),
            "err_q": err_q, "order_q": order_q,
            "err_lambda": err_lambda, "order_lambda": order_l}


def run_study(config: RunConfig, collect_energy=None) -> ConvergenceReport:
    """Run one refinement study of the harmonic-wave problem.

    ``collect_energy`` (optional list) receives every slab energy report
    when ``config.energy_check`` is on.
    """
    config.validate()
    if config.problem != "harmonic":
        raise ConfigError("convergence studies require the harmonic problem")
    wave, problem = _wave_problem()
    p = config.p
    rows = []
    prev = None

    def one_level(level, mesh, dt, T):
        nonlocal prev
        sols = march(mesh, problem, p, dt, T, tau=config.tau, alpha=config.alpha,
                     time_quad_extra=config.time_quad_extra, solver=config.solver,
                     energy_check=config.energy_check,
                     lambda_handoff=config.lambda_handoff)
        if config.energy_check and collect_energy is not None:
            collect_energy.extend(s.energy for s in sols)
        err_q = error_q_spacetime(mesh, p, sols, problem.exact_q)
        err_l = error_lambda_surface(mesh, p, sols, problem.exact_zeta)
        rows.append(_study_row(level, mesh, p, dt, err_q, err_l, prev))
        prev = (err_q, err_l)

    if config.study == "space":
        if p not in SPACE_STUDY:
            raise ConfigError(f"no spatial-study defaults for p={p}")
        spec = SPACE_STUDY[p]
        dt = spec["dt"]
        T = spec["dt"] * spec["steps"]
        for level in range(config.levels):
            m = spec["base_m"] * 2**level
            one_level(level, _harmonic_mesh(m, m), dt, T)
    elif config.study == "time":
        nx, ny = TIME_STUDY_MESH.get(p, TIME_STUDY_MESH[2])
        mesh = _harmonic_mesh(nx, ny)
        for level in range(config.levels):
            one_level(level, mesh, 1.0 / 2**level, 1.0)
    elif config.study == "spacetime":
        for level in range(config.levels):
            m = 3 * 2**level
            one_level(level, _harmonic_mesh(m, m), 0.25 / 2**level, 1.0)
    else:  # fixed_h
        mesh = _harmonic_mesh(24, 24)
        for level in range(config.levels):
            one_level(level, mesh, 1.0 / 2**level, 1.0)

    return ConvergenceReport(rows=rows, p=p, study=config.study,
                             config_hash=config.config_hash())


def surface_profile(mesh, p, solutions, t, points_per_edge=10):
    """Sample the discrete wave height along the free surface at time t.

    At a slab interface the earlier slab's top trace is evaluated, so
    requesting t = t_n reproduces ``top_trace_lambda`` exactly.  Returns
    (x1, zeta) sorted by facet order.
    """
    if not solutions:
        raise ValueError("no slab solutions to sample")
    t0 = solutions[0].t_start
    t_end = solutions[-1].t_end
    eps = 1e-12 * max(1.0, abs(t_end))
    if t < t0 - eps or t > t_end + eps:
        raise ValueError(f"requested time {t} outside [{t0}, {t_end}]")
    sol = solutions[0]
    for cand in solutions:
        if t > cand.t_start + eps:
            sol = cand
    that = np.clip(2.0 * (t - sol.t_start) / sol.dt - 1.0, -1.0, 1.0)

    slab = extrude_slab(mesh, sol.t_start, sol.dt)
    facet = make_basis(SpaceKind.FACET_Q, p)
    s = np.linspace(-1.0, 1.0, points_per_edge)
    tab = facet.values(np.column_stack([np.full_like(s, that), s]))
    surf = slab.surface_facets
    xs, zs = [], []
    for fi in surf:
        xs.append(slab.facet_points(fi, s)[:, 0])
        zs.append(sol.lambda_coeffs[fi] @ tab)
    x1 = np.concatenate(xs)
    zeta = np.concatenate(zs)
    order = np.argsort(x1, kind="stable")
    return x1[order], zeta[order]


def surface_profile_csv(mesh, p, solutions, times, out_dir, points_per_edge=10):
    """Write one (x1, zeta) CSV per requested time; returns the paths."""
    import pathlib

    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in times:
        x1, zeta = surface_profile(mesh, p, solutions, t, points_per_edge)
        path = out / f"profile_t{t:g}.csv"
        with open(path, "w", newline="") as fh:
            fh.write(f"# schema={SCHEMA_VERSION} t={t:g}\n")
            writer = csv.writer(fh)
            writer.writerow(("x1", "zeta"))
            for xv, zv in zip(x1, zeta):
                writer.writerow((f"{xv:.12e}", f"{zv:.12e}"))
        paths.append(path)
    return paths


def build_problem_mesh(config: RunConfig):
    """Mesh and problem objects for a single simulation run."""
    if config.problem == "harmonic":
        wave, problem = _wave_problem()
        if config.mesh_file:
            mesh = apply_periodic(read_mesh_file(config.mesh_file))
        else:
            mesh = _harmonic_mesh(config.nx, config.ny, config.domain)
        return mesh, problem
    spec = WaveMakerSpec(dt=config.dt, T_final=config.T)
    problem = WaveMakerProblem(spec, literal=config.wavemaker_literal)
    if config.mesh_file:
        mesh = read_mesh_file(config.mesh_file)
    else:
        mesh = build_structured_mesh(config.wavemaker_nx, config.wavemaker_ny,
                                     domain=spec.domain, side_mode="tank")
    return mesh, problem


def run_simulation(config: RunConfig):
    """March one configured problem; returns (mesh, problem, solutions)."""
    config.validate()
    mesh, problem = build_problem_mesh(config)
    checkpoint_dir = None
    if config.checkpoint_every:
        import pathlib

        checkpoint_dir = pathlib.Path(config.out_dir) / "checkpoints"
    sols = march(mesh, problem, config.p, config.dt, config.T,
                 tau=config.tau, alpha=config.alpha,
                 time_quad_extra=config.time_quad_extra, solver=config.solver,
                 energy_check=config.energy_check,
                 checkpoint_every=config.checkpoint_every,
                 checkpoint_dir=checkpoint_dir,
                 lambda_handoff=config.lambda_handoff)
    return mesh, problem, sols


def write_run_json(config: RunConfig, out_dir, extra=None):
    """Persist the resolved configuration and an environment stamp."""
    import pathlib

    import scipy

    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema": SCHEMA_VERSION,
        "config": config.resolved(),
        "config_hash": config.config_hash(),
        "environment": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "platform": platform.platform(),
        },
    }
    if extra:
        payload.update(extra)
    path = out / "run.json"
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    return path
