"""Spatial triangulations of the flow domain and their prismatic extrusion.

The flow domain is {-H + b(x1) < x2 < 0, L < x1 < R} with a flat free
surface at x2 = 0 and piecewise-linear bottom topography b.  The structured
generator triangulates an nx-by-ny grid whose rows are sheared vertically so
the bottom row follows -H + b while the top row stays at x2 = 0; each cell
splits along the lower-left to upper-right diagonal.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .basis import PrismGeometry

__all__ = [
    "MeshError",
    "EdgeTag",
    "FacetRole",
    "SpatialMesh",
    "SpaceTimeSlab",
    "build_structured_mesh",
    "apply_periodic",
    "extrude_slab",
    "write_mesh_file",
    "read_mesh_file",
]

# local edges of the reference triangle, (vertex, vertex) in CCW order
LOCAL_EDGES = ((0, 1), (1, 2), (2, 0))


class MeshError(Exception):
    pass


class EdgeTag(enum.IntEnum):
    INTERIOR = 0
    FREE_SURFACE = 1
    BOTTOM = 2
    PERIODIC_LEFT = 3
    PERIODIC_RIGHT = 4
    WAVE_MAKER = 5
    WALL = 6


_TAG_NAMES = {
    EdgeTag.FREE_SURFACE: "FreeSurface",
    EdgeTag.BOTTOM: "Bottom",
    EdgeTag.PERIODIC_LEFT: "PeriodicLeft",
    EdgeTag.PERIODIC_RIGHT: "PeriodicRight",
    EdgeTag.WAVE_MAKER: "WaveMaker",
    EdgeTag.WALL: "Wall",
    EdgeTag.INTERIOR: "Interior",
}
_TAG_FROM_NAME = {v: k for k, v in _TAG_NAMES.items()}


class FacetRole(enum.IntEnum):
    INTERIOR = 0
    FREE_SURFACE = 1
    NEUMANN = 2       # bottom and solid walls, homogeneous q.n
    WAVE_MAKER = 3    # q.n prescribed by time-dependent data


@dataclass(frozen=True)
class SpatialMesh:
    """Immutable triangulation with edge adjacency and boundary tags."""

    vertices: np.ndarray          # (V, 2)
    triangles: np.ndarray         # (T, 3) CCW
    edges: np.ndarray             # (E, 2) sorted vertex pairs
    edge_tags: np.ndarray         # (E,) EdgeTag codes
    edge_tris: np.ndarray         # (E, 2) owning triangles, -1 if none
    tri_edges: np.ndarray         # (T, 3) edge index per local edge
    periodic_pairs: tuple = field(default=())   # ((left_edge, right_edge), ...)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_active_edges(self) -> int:
        return self.n_edges - len(self.periodic_pairs)

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices
        t = self.triangles
        d1 = v[t[:, 1]] - v[t[:, 0]]
        d2 = v[t[:, 2]] - v[t[:, 0]]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def edge_lengths(self) -> np.ndarray:
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def shape_regularity(self) -> np.ndarray:
        """Per-triangle ratio circumradius / inradius."""
        v = self.vertices
        t = self.triangles
        a = np.linalg.norm(v[t[:, 1]] - v[t[:, 2]], axis=1)
        b = np.linalg.norm(v[t[:, 2]] - v[t[:, 0]], axis=1)
        c = np.linalg.norm(v[t[:, 0]] - v[t[:, 1]], axis=1)
        area = self.triangle_areas()
        circum = a * b * c / (4.0 * area)
        inr = 2.0 * area / (a + b + c)
        return circum / inr

    def h_max(self) -> float:
        """Largest circumradius over the mesh."""
        v = self.vertices
        t = self.triangles
        a = np.linalg.norm(v[t[:, 1]] - v[t[:, 2]], axis=1)
        b = np.linalg.norm(v[t[:, 2]] - v[t[:, 0]], axis=1)
        c = np.linalg.norm(v[t[:, 0]] - v[t[:, 1]], axis=1)
        return float(np.max(a * b * c / (4.0 * self.triangle_areas())))

    def periodic_partner(self, edge: int) -> int:
        for le, re in self.periodic_pairs:
            if edge == le:
                return re
            if edge == re:
                return le
        return edge

    def validate(self, c_r: float | None = None) -> None:
        owners = np.sum(self.edge_tris >= 0, axis=1)
        boundary = self.edge_tags != EdgeTag.INTERIOR
        if not np.all(owners[boundary] == 1):
            raise MeshError("boundary edge with owner count != 1")
        if not np.all(owners[~boundary] == 2):
            raise MeshError("interior edge with owner count != 2")
        euler = self.n_vertices - self.n_edges + self.n_triangles
        if euler != 1:
            raise MeshError(f"Euler relation violated: V-E+F = {euler} != 1")
        if np.any(self.triangle_areas() <= 0):
            raise MeshError("non-positive triangle area (orientation or degeneracy)")
        if c_r is not None:
            worst = float(np.max(self.shape_regularity()))
            if worst > c_r:
                raise MeshError(f"shape regularity {worst:.3f} exceeds c_r={c_r}")


def build_structured_mesh(nx, ny, domain=(-1.0, 1.0, 1.0), bottom_profile=None,
                          side_mode="periodic"):
    """Triangulate the flow domain with an nx-by-ny sheared grid.

    ``domain`` is (L, R, H); ``bottom_profile`` maps x1 to b(x1) >= 0 with
    b < H (defaults to a flat bottom b = 0).  ``side_mode`` selects the
    vertical-wall tags: "periodic" for PeriodicLeft/Right, "tank" for
    WaveMaker (left) and Wall (right).
    """
    if nx < 1 or ny < 1:
        raise MeshError(f"nx, ny must be >= 1, got ({nx}, {ny})")
    if side_mode not in ("periodic", "tank"):
        raise MeshError(f"unknown side_mode {side_mode!r}")
    L, R, H = domain
    if R <= L or H <= 0:
        raise MeshError(f"invalid domain (L={L}, R={R}, H={H})")
    b = bottom_profile if bottom_profile is not None else (lambda x1: 0.0 * np.asarray(x1))

    x1 = np.linspace(L, R, nx + 1)
    bot = -H + np.asarray(b(x1), dtype=float)
    if np.any(bot >= 0.0):
        raise MeshError("bottom profile reaches the free surface (b >= H)")

    # vertex id = i * (ny + 1) + j, column-major, row j=ny on the surface
    frac = np.arange(ny + 1) / ny
    verts = np.empty(((nx + 1) * (ny + 1), 2))
    for i in range(nx + 1):
        rows = slice(i * (ny + 1), (i + 1) * (ny + 1))
        verts[rows, 0] = x1[i]
        verts[rows, 1] = bot[i] * (1.0 - frac)

    def vid(i, j):
        return i * (ny + 1) + j

    tris = []
    for i in range(nx):
        for j in range(ny):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v11, v01 = vid(i + 1, j + 1), vid(i, j + 1)
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    triangles = np.asarray(tris, dtype=np.int64)

    nominal = (R - L) * H / (2.0 * nx * ny)
    tri_areas = 0.5 * np.abs(
        (verts[triangles[:, 1], 0] - verts[triangles[:, 0], 0])
        * (verts[triangles[:, 2], 1] - verts[triangles[:, 0], 1])
        - (verts[triangles[:, 1], 1] - verts[triangles[:, 0], 1])
        * (verts[triangles[:, 2], 0] - verts[triangles[:, 0], 0]))
    if np.any(tri_areas <= 1e-10 * nominal):
        raise MeshError("degenerate triangle from extreme bottom shearing")
    return _finish_mesh(verts, triangles, _structured_tagger(nx, ny, side_mode))


def _structured_tagger(nx, ny, side_mode):
    left = EdgeTag.PERIODIC_LEFT if side_mode == "periodic" else EdgeTag.WAVE_MAKER
    right = EdgeTag.PERIODIC_RIGHT if side_mode == "periodic" else EdgeTag.WALL

    def tag(va, vb):
        ia, ja = divmod(va, ny + 1)
        ib, jb = divmod(vb, ny + 1)
        if ja == ny and jb == ny:
            return EdgeTag.FREE_SURFACE
        if ja == 0 and jb == 0:
            return EdgeTag.BOTTOM
        if ia == 0 and ib == 0:
            return left
        if ia == nx and ib == nx:
            return right
        raise MeshError(f"untagged boundary edge ({va}, {vb})")

    return tag


def _finish_mesh(verts, triangles, boundary_tagger):
    """Build edge arrays and adjacency; tag boundary edges via the callback."""
    edge_index: dict[tuple[int, int], int] = {}
    edges = []
    edge_tris = []
    tri_edges = np.empty((len(triangles), 3), dtype=np.int64)
    for ti, tri in enumerate(triangles):
        for le, (a, b) in enumerate(LOCAL_EDGES):
            key = (min(tri[a], tri[b]), max(tri[a], tri[b]))
            ei = edge_index.get(key)
            if ei is None:
                ei = len(edges)
                edge_index[key] = ei
                edges.append(key)
                edge_tris.append([ti, -1])
            else:
                if edge_tris[ei][1] != -1:
                    raise MeshError(f"edge {key} has more than two owners")
                edge_tris[ei][1] = ti
            tri_edges[ti, le] = ei
    edges = np.asarray(edges, dtype=np.int64)
    edge_tris = np.asarray(edge_tris, dtype=np.int64)
    tags = np.empty(len(edges), dtype=np.int64)
    for ei in range(len(edges)):
        if edge_tris[ei, 1] == -1:
            tags[ei] = boundary_tagger(*edges[ei])
        else:
            tags[ei] = EdgeTag.INTERIOR
    mesh = SpatialMesh(np.asarray(verts, dtype=float), triangles, edges, tags,
                       edge_tris, tri_edges)
    mesh.validate()
    return mesh


def apply_periodic(mesh: SpatialMesh, tol: float = 1e-9) -> SpatialMesh:
    """Pair PeriodicLeft with PeriodicRight edges by matching x2 endpoints.

    Paired edges share one facet unknown downstream and are treated as
    interior for assembly.  Raises :class:`MeshError` naming any edge that
    cannot be matched.
    """
    lefts = np.flatnonzero(mesh.edge_tags == EdgeTag.PERIODIC_LEFT)
    rights = np.flatnonzero(mesh.edge_tags == EdgeTag.PERIODIC_RIGHT)
    if len(lefts) == 0 and len(rights) == 0:
        return replace(mesh, periodic_pairs=())
    if len(lefts) != len(rights):
        raise MeshError(
            f"periodic edge count mismatch: {len(lefts)} left vs {len(rights)} right")

    scale = max(mesh.edge_lengths().max(), 1.0)

    def x2_interval(ei):
        ys = np.sort(mesh.vertices[mesh.edges[ei], 1])
        return ys[0], ys[1]

    right_by_interval = {ei: x2_interval(ei) for ei in rights}
    pairs = []
    for le in lefts:
        want = x2_interval(le)
        match = None
        for re, have in right_by_interval.items():
            if abs(have[0] - want[0]) < tol * scale and abs(have[1] - want[1]) < tol * scale:
                match = re
                break
        if match is None:
            raise MeshError(f"unmatched periodic edge {le} (x2 span {want})")
        del right_by_interval[match]
        pairs.append((int(le), int(match)))
    pairs.sort()
    return replace(mesh, periodic_pairs=tuple(pairs))


_ROLE_FROM_TAG = {
    EdgeTag.INTERIOR: FacetRole.INTERIOR,
    EdgeTag.FREE_SURFACE: FacetRole.FREE_SURFACE,
    EdgeTag.BOTTOM: FacetRole.NEUMANN,
    EdgeTag.WALL: FacetRole.NEUMANN,
    EdgeTag.WAVE_MAKER: FacetRole.WAVE_MAKER,
}


@dataclass(frozen=True)
class SpaceTimeSlab:
    """Prismatic extrusion of a spatial mesh over one time interval.

    Facets are the lateral quadrilaterals e x I_n, one per active edge after
    periodic identification, ordered by their primary (left) edge index.
    Facet parametrization: s = -1 sits at the primary edge endpoint with the
    smaller vertex id (for periodic facets, sides are matched by x2 so both
    sides traverse the facet identically).
    """

    mesh: SpatialMesh
    t_start: float
    dt: float
    index: int
    B: np.ndarray              # (T, 2, 2) spatial Jacobians
    c: np.ndarray              # (T, 2)
    detB: np.ndarray           # (T,)
    Binv: np.ndarray           # (T, 2, 2)
    facet_edge: np.ndarray     # (F,) primary edge id
    facet_partner: np.ndarray  # (F,) partner edge id or -1
    facet_role: np.ndarray     # (F,) FacetRole codes
    facet_tag: np.ndarray      # (F,) EdgeTag of the primary boundary edge
    facet_len: np.ndarray      # (F,)
    facet_p0: np.ndarray       # (F, 2) physical point at s = -1 (primary side)
    facet_p1: np.ndarray       # (F, 2) physical point at s = +1
    tri_facets: np.ndarray     # (T, 3) facet index per local edge
    tri_orient: np.ndarray     # (T, 3) 0 if local edge runs s=-1 -> s=+1, else 1
    tri_normal: np.ndarray     # (T, 3, 2) outward spatial normals
    surface_facets: np.ndarray  # indices into facets with FREE_SURFACE role

    @property
    def t_end(self) -> float:
        return self.t_start + self.dt

    @property
    def n_prisms(self) -> int:
        return len(self.B)

    @property
    def n_facets(self) -> int:
        return len(self.facet_edge)

    def prism_volumes(self) -> np.ndarray:
        return np.abs(self.detB) / 2.0 * self.dt

    def prism(self, i: int) -> PrismGeometry:
        return PrismGeometry(self.B[i], self.c[i], self.t_start, self.dt)

    def facet_points(self, f: int, s: np.ndarray) -> np.ndarray:
        """Physical spatial coordinates on facet f at parameters s (primary side)."""
        s = np.asarray(s, dtype=float)[:, None]
        mid = 0.5 * (self.facet_p0[f] + self.facet_p1[f])
        half = 0.5 * (self.facet_p1[f] - self.facet_p0[f])
        return mid + s * half

    def time_of(self, that: np.ndarray) -> np.ndarray:
        return self.t_start + (1.0 + np.asarray(that)) * self.dt / 2.0


def extrude_slab(mesh: SpatialMesh, t_start: float, dt: float, n: int = 0) -> SpaceTimeSlab:
    """Extrude every triangle into a prism over [t_start, t_start + dt]."""
    if dt <= 0:
        raise MeshError(f"slab thickness must be positive, got dt={dt}")
    v = mesh.vertices
    t = mesh.triangles
    B = np.stack([np.stack([v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]]], axis=2)])[0]
    c = v[t[:, 0]]
    detB = B[:, 0, 0] * B[:, 1, 1] - B[:, 0, 1] * B[:, 1, 0]
    Binv = np.empty_like(B)
    Binv[:, 0, 0] = B[:, 1, 1] / detB
    Binv[:, 0, 1] = -B[:, 0, 1] / detB
    Binv[:, 1, 0] = -B[:, 1, 0] / detB
    Binv[:, 1, 1] = B[:, 0, 0] / detB

    # facet list: skip right halves of periodic pairs, keep edge order
    partner_of = dict(mesh.periodic_pairs)           # left -> right
    merged = {re: le for le, re in mesh.periodic_pairs}
    facet_of_edge = np.full(mesh.n_edges, -1, dtype=np.int64)
    facet_edge, facet_partner = [], []
    for ei in range(mesh.n_edges):
        if ei in merged:
            continue
        facet_of_edge[ei] = len(facet_edge)
        facet_edge.append(ei)
        facet_partner.append(partner_of.get(ei, -1))
    facet_edge = np.asarray(facet_edge, dtype=np.int64)
    facet_partner = np.asarray(facet_partner, dtype=np.int64)
    for re, le in merged.items():
        facet_of_edge[re] = facet_of_edge[le]

    n_f = len(facet_edge)
    facet_role = np.empty(n_f, dtype=np.int64)
    facet_tag = np.empty(n_f, dtype=np.int64)
    facet_len = np.empty(n_f)
    facet_p0 = np.empty((n_f, 2))
    facet_p1 = np.empty((n_f, 2))
    for fi, ei in enumerate(facet_edge):
        tag = EdgeTag(mesh.edge_tags[ei])
        if facet_partner[fi] >= 0:
            facet_role[fi] = FacetRole.INTERIOR
        elif tag in (EdgeTag.PERIODIC_LEFT, EdgeTag.PERIODIC_RIGHT):
            raise MeshError(
                f"edge {ei} carries an unpaired periodic tag; "
                "run apply_periodic before extruding")
        else:
            facet_role[fi] = _ROLE_FROM_TAG[tag]
        facet_tag[fi] = tag
        a, b = mesh.edges[ei]
        facet_p0[fi] = v[a]
        facet_p1[fi] = v[b]
        facet_len[fi] = np.hypot(*(v[b] - v[a]))

    tri_facets = np.empty((mesh.n_triangles, 3), dtype=np.int64)
    tri_orient = np.empty((mesh.n_triangles, 3), dtype=np.int64)
    tri_normal = np.empty((mesh.n_triangles, 3, 2))
    for ti in range(mesh.n_triangles):
        tri = mesh.triangles[ti]
        for le, (la, lb) in enumerate(LOCAL_EDGES):
            va, vb = int(tri[la]), int(tri[lb])
            ei = mesh.tri_edges[ti, le]
            fi = facet_of_edge[ei]
            tri_facets[ti, le] = fi
            d = v[vb] - v[va]
            ell = np.hypot(*d)
            # outward normal of a CCW triangle on edge va -> vb
            tri_normal[ti, le] = np.array([d[1], -d[0]]) / ell
            if ei == facet_edge[fi]:
                # orientation against the primary edge's sorted vertex pair
                tri_orient[ti, le] = 0 if va == mesh.edges[ei][0] else 1
            else:
                # periodic partner side: match endpoints by x2
                prim = mesh.edges[facet_edge[fi]]
                y0 = v[prim[0], 1]
                tri_orient[ti, le] = 0 if abs(v[va, 1] - y0) <= abs(v[vb, 1] - y0) else 1

    surface = np.flatnonzero(facet_role == FacetRole.FREE_SURFACE)
    return SpaceTimeSlab(
        mesh=mesh, t_start=float(t_start), dt=float(dt), index=n,
        B=B, c=c, detB=detB, Binv=Binv,
        facet_edge=facet_edge, facet_partner=facet_partner,
        facet_role=facet_role, facet_tag=facet_tag, facet_len=facet_len,
        facet_p0=facet_p0, facet_p1=facet_p1,
        tri_facets=tri_facets, tri_orient=tri_orient, tri_normal=tri_normal,
        surface_facets=surface,
    )


def write_mesh_file(mesh: SpatialMesh, path) -> None:
    """Plain-text export: `v x1 x2`, `t i j k`, `e i j TAG` records."""
    with open(path, "w") as fh:
        for x1, x2 in mesh.vertices:
            fh.write(f"v {x1:.17g} {x2:.17g}\n")
        for i, j, k in mesh.triangles:
            fh.write(f"t {i} {j} {k}\n")
        for ei in range(mesh.n_edges):
            tag = EdgeTag(mesh.edge_tags[ei])
            if tag != EdgeTag.INTERIOR:
                a, b = mesh.edges[ei]
                fh.write(f"e {a} {b} {_TAG_NAMES[tag]}\n")


def read_mesh_file(path) -> SpatialMesh:
    """Read the plain-text format written by :func:`write_mesh_file`."""
    verts, tris, tagged = [], [], {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            kind = parts[0]
            try:
                if kind == "v":
                    verts.append((float(parts[1]), float(parts[2])))
                elif kind == "t":
                    tris.append((int(parts[1]), int(parts[2]), int(parts[3])))
                elif kind == "e":
                    key = (min(int(parts[1]), int(parts[2])),
                           max(int(parts[1]), int(parts[2])))
                    tagged[key] = _TAG_FROM_NAME[parts[3]]
                else:
                    raise MeshError(f"{path}:{ln}: unknown record {kind!r}")
            except (IndexError, ValueError, KeyError) as exc:
                raise MeshError(f"{path}:{ln}: malformed record: {line.strip()!r}") from exc
    if not verts or not tris:
        raise MeshError(f"{path}: no vertices or triangles")

    def tagger(a, b):
        try:
            return tagged[(min(a, b), max(a, b))]
        except KeyError:
            raise MeshError(f"{path}: boundary edge ({a}, {b}) has no tag record")

    return _finish_mesh(np.asarray(verts, dtype=float),
                        np.asarray(tris, dtype=np.int64), tagger)
