"""P1 finite elements on triangulated 2D domains.

The mesher places boundary points exactly on the boundary (circle rings,
polygon edges, slit lines), fills the interior with a hexagonal lattice
clipped away from the boundary, Delaunay-triangulates, filters triangles by
centroid membership and runs a few Laplacian smoothing passes.  Interior
slit vertices are then DUPLICATED, one copy per side, so the mesh topology
realizes the two-sided boundary; slit tips stay single and carry the "tip"
label.  Punctured domains mesh exactly like their un-punctured parents: a
point has empty 2D footprint and P1 spaces ignore it.

Systems are assembled as sparse CSR stiffness matrices with one-point (a at
centroid) quadrature and lumped mass vectors, and solved by direct sparse
factorization; with Dirichlet data eliminated the interior block is SPD.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.linalg import splu
from scipy.spatial import Delaunay, cKDTree

from .geometry import (
    Ball,
    Box,
    Csg,
    Domain,
    Polygon,
    PuncturedBall,
    SlitBall,
    SIDE_ABOVE,
    SIDE_BELOW,
    SIDE_NONE,
    SIDE_TIP,
    SIDE_NAMES,
)

MIN_ANGLE_DEG = 20.0


class MeshError(RuntimeError):
    pass


@dataclass
class Mesh:
    vertices: np.ndarray          # (n, 2)
    triangles: np.ndarray         # (m, 3) ccw
    boundary: np.ndarray          # (n,) bool
    component: np.ndarray         # (n,) int32 code into component_names
    side: np.ndarray              # (n,) int8 side code
    component_names: tuple
    h: float
    domain: Optional[Domain] = None
    _cache: dict = dataclass_field(default_factory=dict, repr=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def boundary_indices(self) -> np.ndarray:
        return np.flatnonzero(self.boundary)

    @property
    def interior_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary)

    # -- per-triangle geometry (cached) -----------------------------------

    def _geometry(self):
        if "geom" not in self._cache:
            v = self.vertices[self.triangles]
            e1 = v[:, 1] - v[:, 0]
            e2 = v[:, 2] - v[:, 0]
            area = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
            if np.any(area <= 0):
                raise MeshError("mesh has non-ccw or degenerate triangles")
            # gradients of the three hat functions on each triangle
            grads = np.empty((len(self.triangles), 3, 2))
            for k, (i, j) in enumerate(((1, 2), (2, 0), (0, 1))):
                edge = v[:, j] - v[:, i]
                grads[:, k, 0] = -edge[:, 1]
                grads[:, k, 1] = edge[:, 0]
            grads /= (2.0 * area)[:, None, None]
            self._cache["geom"] = (area, grads)
        return self._cache["geom"]

    @property
    def areas(self) -> np.ndarray:
        return self._geometry()[0]

    @property
    def hat_gradients(self) -> np.ndarray:
        return self._geometry()[1]

    @property
    def lumped_mass(self) -> np.ndarray:
        if "mass" not in self._cache:
            mass = np.zeros(self.n_vertices)
            np.add.at(mass, self.triangles.ravel(),
                      np.repeat(self.areas / 3.0, 3))
            self._cache["mass"] = mass
        return self._cache["mass"]

    @property
    def centroids(self) -> np.ndarray:
        if "centroid" not in self._cache:
            self._cache["centroid"] = self.vertices[self.triangles].mean(axis=1)
        return self._cache["centroid"]

    def min_angle_deg(self) -> float:
        v = self.vertices[self.triangles]
        angles = []
        for k in range(3):
            a = v[:, (k + 1) % 3] - v[:, k]
            b = v[:, (k + 2) % 3] - v[:, k]
            cosang = (a * b).sum(1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            angles.append(np.degrees(np.arccos(np.clip(cosang, -1, 1))))
        return float(np.min(angles))

    def max_edge(self) -> float:
        v = self.vertices[self.triangles]
        e = [np.linalg.norm(v[:, i] - v[:, j], axis=1) for i, j in ((0, 1), (1, 2), (2, 0))]
        return float(np.max(e))

    # -- point location / interpolation ------------------------------------

    def _locator(self):
        if "tree" not in self._cache:
            self._cache["tree"] = cKDTree(self.centroids)
        return self._cache["tree"]

    def locate(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Containing triangle index and barycentric coordinates per point.

        Falls back to the best candidate (clipped coordinates) for points a
        floating-point hair outside; duplicated slit vertices are harmless
        because location works on triangles, which are side-disjoint.
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        k = min(24, self.n_triangles)
        _, cand = self._locator().query(pts, k=k)
        if k == 1:
            cand = cand[:, None]
        best_tri = np.full(len(pts), -1, dtype=np.int64)
        best_bary = np.full((len(pts), 3), -np.inf)
        best_min = np.full(len(pts), -np.inf)
        v = self.vertices
        tri = self.triangles
        for col in range(cand.shape[1]):
            t = cand[:, col]
            a, b, c = v[tri[t, 0]], v[tri[t, 1]], v[tri[t, 2]]
            # solve for barycentric coordinates
            det = (b[:, 1] - c[:, 1]) * (a[:, 0] - c[:, 0]) + (c[:, 0] - b[:, 0]) * (a[:, 1] - c[:, 1])
            w0 = ((b[:, 1] - c[:, 1]) * (pts[:, 0] - c[:, 0]) + (c[:, 0] - b[:, 0]) * (pts[:, 1] - c[:, 1])) / det
            w1 = ((c[:, 1] - a[:, 1]) * (pts[:, 0] - c[:, 0]) + (a[:, 0] - c[:, 0]) * (pts[:, 1] - c[:, 1])) / det
            w2 = 1.0 - w0 - w1
            bary = np.stack([w0, w1, w2], axis=1)
            mn = bary.min(axis=1)
            better = mn > best_min
            best_min[better] = mn[better]
            best_tri[better] = t[better]
            best_bary[better] = bary[better]
            if np.all(best_min >= -1e-12):
                break
        bary = np.clip(best_bary, 0.0, None)
        bary /= bary.sum(axis=1, keepdims=True)
        return best_tri, bary

    def interpolate(self, values: np.ndarray, pts: np.ndarray) -> np.ndarray:
        t, bary = self.locate(pts)
        return (values[self.triangles[t]] * bary).sum(axis=1)

    def boundary_bindings(self) -> dict:
        """Expression bindings (x, y, theta, side) for the boundary vertices."""
        idx = self.boundary_indices
        pts = self.vertices[idx]
        center = self.domain.angular_center if self.domain is not None else pts.mean(axis=0)
        return {
            "x": pts[:, 0],
            "y": pts[:, 1],
            "z": np.zeros(len(idx)),
            "theta": np.arctan2(pts[:, 1] - center[1], pts[:, 0] - center[0]),
            "side": self.side[idx].astype(float),
            "u": np.zeros(len(idx)),
        }


@dataclass
class DiscreteField:
    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if len(self.values) != self.mesh.n_vertices:
            raise MeshError("field length does not match vertex count")

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        return self.mesh.interpolate(self.values, pts)

    def at(self, x) -> float:
        return float(self(np.asarray(x, dtype=float)[None, :])[0])


# --------------------------------------------------------------------------
# meshing
# --------------------------------------------------------------------------


def triangulate(domain: Domain, h: float, smooth_iters: int = 3) -> Mesh:
    """Triangulate a 2D catalog shape with target edge length <= h."""
    if domain.dim != 2:
        raise MeshError("only 2D domains can be triangulated")
    if isinstance(domain, Box):
        return _mesh_box(domain, h)
    if isinstance(domain, Ball):
        return _mesh_via_delaunay(domain, _ring_points(domain, h), (), h, smooth_iters)
    if isinstance(domain, PuncturedBall):
        mesh = _mesh_via_delaunay(domain.ball, _ring_points(domain.ball, h), (), h, smooth_iters)
        mesh.domain = domain
        return mesh
    if isinstance(domain, SlitBall):
        return _mesh_slit(domain, h, smooth_iters)
    if isinstance(domain, Polygon):
        return _mesh_via_delaunay(domain, _polygon_points(domain, h), (), h, smooth_iters)
    raise MeshError(f"no mesher for domain type {type(domain).__name__}")


SPACING_FACTOR = 0.62


def _ring_points(ball: Ball, h: float):
    n = max(12, int(np.ceil(2 * np.pi * ball.radius / (SPACING_FACTOR * h))))
    ang = 2 * np.pi * np.arange(n) / n
    pts = ball.center + ball.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return [("outer", SIDE_NONE, pts)]


def _polygon_points(poly: Polygon, h: float):
    groups = []
    for ci, ring in enumerate((poly.vertices,) + poly.holes):
        pts = []
        m = len(ring)
        for i in range(m):
            p, q = ring[i], ring[(i + 1) % m]
            L = np.linalg.norm(q - p)
            k = max(1, int(np.ceil(L / (SPACING_FACTOR * h))))
            for s in range(k):
                pts.append(p + (q - p) * (s / k))
        name = "outer" if ci == 0 else f"hole{ci - 1}"
        groups.append((name, SIDE_NONE, np.array(pts)))
    return groups


def _hex_lattice(domain: Domain, h: float, clearance: float):
    lo, hi = domain.bounding_box
    s = SPACING_FACTOR * h
    dy = s * np.sqrt(3) / 2
    rows = int(np.ceil((hi[1] - lo[1]) / dy)) + 2
    cols = int(np.ceil((hi[0] - lo[0]) / s)) + 2
    pts = []
    # deterministic offset keeps lattice nodes off special points (center,
    # puncture)
    x0 = lo[0] + 0.123 * s
    y0 = lo[1] + 0.217 * dy
    for r in range(rows):
        y = y0 + r * dy
        off = 0.5 * s if r % 2 else 0.0
        xs = x0 + off + s * np.arange(cols)
        pts.append(np.stack([xs, np.full(cols, y)], axis=1))
    pts = np.concatenate(pts)
    ok = domain.inside_many(pts)
    pts = pts[ok]
    d = domain.distance_many(pts)
    return pts[d > clearance * s], s


def _mesh_box(box: Box, h: float) -> Mesh:
    nx = max(2, int(np.ceil((box.hi[0] - box.lo[0]) * np.sqrt(2.0) / h)))
    ny = max(2, int(np.ceil((box.hi[1] - box.lo[1]) * np.sqrt(2.0) / h)))
    xs = np.linspace(box.lo[0], box.hi[0], nx + 1)
    ys = np.linspace(box.lo[1], box.hi[1], ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    verts = np.stack([X.ravel(), Y.ravel()], axis=1)
    idx = lambda i, j: i * (ny + 1) + j
    tris = []
    for i in range(nx):
        for j in range(ny):
            a, b, c, d = idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)
            tris.append((a, b, c))
            tris.append((a, c, d))
    tris = np.array(tris, dtype=np.int64)
    onb = (
        np.isclose(verts[:, 0], box.lo[0]) | np.isclose(verts[:, 0], box.hi[0])
        | np.isclose(verts[:, 1], box.lo[1]) | np.isclose(verts[:, 1], box.hi[1])
    )
    mesh = Mesh(
        vertices=verts,
        triangles=tris,
        boundary=onb,
        component=np.zeros(len(verts), dtype=np.int32),
        side=np.full(len(verts), SIDE_NONE, dtype=np.int8),
        component_names=("outer",),
        h=h,
        domain=box,
    )
    _check_quality(mesh)
    return mesh


def _mesh_via_delaunay(domain, boundary_groups, extra_groups, h, smooth_iters,
                       quality_check=True) -> Mesh:
    interior, s = _hex_lattice(domain, h, clearance=0.55)
    fixed_pts = [g[2] for g in boundary_groups] + [g[2] for g in extra_groups]
    fixed = np.concatenate(fixed_pts) if fixed_pts else np.empty((0, 2))
    n_fixed = len(fixed)

    pts = np.concatenate([fixed, interior])
    for _ in range(max(smooth_iters, 0)):
        tri = _filtered_delaunay(domain, pts)
        pts = _smooth_once(domain, pts, tri, n_fixed, s)
    tris = _filtered_delaunay(domain, pts)
    used = np.unique(tris)
    remap = -np.ones(len(pts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    verts = pts[used]
    tris = remap[tris]

    onb = np.zeros(len(verts), dtype=bool)
    comp = np.zeros(len(verts), dtype=np.int32)
    side = np.full(len(verts), SIDE_NONE, dtype=np.int8)
    names = []
    offset = 0
    for name, side_code, gpts in boundary_groups + list(extra_groups):
        if name not in names:
            names.append(name)
        code = names.index(name)
        g_idx = remap[np.arange(offset, offset + len(gpts))]
        g_idx = g_idx[g_idx >= 0]
        onb[g_idx] = True
        comp[g_idx] = code
        side[g_idx] = side_code
        offset += len(gpts)

    mesh = Mesh(
        vertices=verts,
        triangles=tris,
        boundary=onb,
        component=comp,
        side=side,
        component_names=tuple(names) if names else ("outer",),
        h=h,
        domain=domain,
    )
    if quality_check:
        _check_quality(mesh)
    return mesh


def _filtered_delaunay(domain, pts) -> np.ndarray:
    dela = Delaunay(pts)
    tris = dela.simplices
    cent = pts[tris].mean(axis=1)
    keep = domain.inside_many(cent)
    tris = tris[keep]
    v = pts[tris]
    area = 0.5 * (
        (v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1])
        - (v[:, 1, 1] - v[:, 0, 1]) * (v[:, 2, 0] - v[:, 0, 0])
    )
    flip = area < 0
    tris[flip] = tris[flip][:, ::-1]
    return tris


def _smooth_once(domain, pts, tris, n_fixed, s):
    n = len(pts)
    neighbor_sum = np.zeros((n, 2))
    neighbor_cnt = np.zeros(n)
    for (i, j) in ((0, 1), (1, 2), (2, 0)):
        a = tris[:, i]
        b = tris[:, j]
        np.add.at(neighbor_sum, a, pts[b])
        np.add.at(neighbor_cnt, a, 1.0)
        np.add.at(neighbor_sum, b, pts[a])
        np.add.at(neighbor_cnt, b, 1.0)
    movable = np.zeros(n, dtype=bool)
    movable[n_fixed:] = neighbor_cnt[n_fixed:] > 0
    new = pts.copy()
    new[movable] = neighbor_sum[movable] / neighbor_cnt[movable, None]
    # keep smoothed nodes inside and clear of the boundary band
    ok = domain.inside_many(new[movable])
    d = np.full(ok.shape, 0.0)
    if np.any(ok):
        d[ok] = domain.distance_many(new[movable][ok])
    bad = ~ok | (d <= 0.5 * s)
    mov_idx = np.flatnonzero(movable)
    new[mov_idx[bad]] = pts[mov_idx[bad]]
    return new


def _mesh_slit(domain: SlitBall, h: float, smooth_iters: int) -> Mesh:
    ring = _ring_points(domain.ball, h)
    a, b = domain.a, domain.b
    L = np.linalg.norm(b - a)
    k = max(2, int(np.ceil(L / (SPACING_FACTOR * h))))
    ts = np.linspace(0.0, 1.0, k + 1)
    slit_pts = a + ts[:, None] * (b - a)
    groups = ring + [("slit", SIDE_ABOVE, slit_pts)]
    mesh = _mesh_via_delaunay(domain, groups, (), h, smooth_iters, quality_check=False)

    # identify slit vertices by coordinates
    slit_idx = []
    for p in slit_pts:
        d = np.linalg.norm(mesh.vertices - p, axis=1)
        j = int(np.argmin(d))
        if d[j] > 1e-9:
            raise MeshError("slit vertex lost during meshing")
        slit_idx.append(j)
    slit_idx = np.array(slit_idx)
    tips = {slit_idx[0], slit_idx[-1]}
    inner = [j for j in slit_idx if j not in tips]

    # verify the slit is resolved as a chain of edges
    edge_set = set()
    for t in mesh.triangles:
        for i, j in ((0, 1), (1, 2), (2, 0)):
            edge_set.add(frozenset((t[i], t[j])))
    for u, v in zip(slit_idx[:-1], slit_idx[1:]):
        if frozenset((u, v)) not in edge_set:
            raise MeshError("slit edge missing from triangulation")

    # duplicate interior slit vertices; triangles below the slit use copies
    verts = mesh.vertices
    tris = mesh.triangles.copy()
    n0 = len(verts)
    dup_of = {}
    new_rows = []
    for j in inner:
        dup_of[j] = n0 + len(new_rows)
        new_rows.append(verts[j])
    verts = np.vstack([verts, np.array(new_rows)]) if new_rows else verts

    cent_side = domain.side_of(verts[tris].mean(axis=1))
    below = cent_side < 0
    for j, j2 in dup_of.items():
        mask = below[:, None] & (tris == j)
        tris[mask] = j2

    onb = np.concatenate([mesh.boundary, np.ones(len(new_rows), dtype=bool)])
    comp = np.concatenate([mesh.component, np.full(len(new_rows), 1, dtype=np.int32)])
    side = np.concatenate([mesh.side, np.full(len(new_rows), SIDE_BELOW, dtype=np.int8)])
    for j in inner:
        side[j] = SIDE_ABOVE
        comp[j] = 1
        onb[j] = True
    for j in tips:
        side[j] = SIDE_TIP
        comp[j] = 1
        onb[j] = True

    out = Mesh(
        vertices=verts,
        triangles=tris,
        boundary=onb,
        component=comp,
        side=side,
        component_names=mesh.component_names,
        h=h,
        domain=domain,
    )
    _check_quality(out)
    return out


def _check_quality(mesh: Mesh):
    ang = mesh.min_angle_deg()
    if ang < MIN_ANGLE_DEG:
        raise MeshError(f"mesh quality failure: min angle {ang:.2f} deg < {MIN_ANGLE_DEG}")
    if mesh.max_edge() > mesh.h * (1 + 1e-9):
        raise MeshError(f"mesh sizing failure: max edge {mesh.max_edge():.4f} > h")


# --------------------------------------------------------------------------
# assembly and solves
# --------------------------------------------------------------------------


class FemSystem:
    """Assembled stiffness/mass pair with a cached interior factorization.

    The bilinear form is (a grad u, grad v) with a evaluated per triangle at
    the centroid.  Dirichlet values are eliminated; the interior block is SPD
    and factored once, so repeated solves (Picard iterations, Green columns,
    bump families) are back-substitutions.
    """

    def __init__(self, mesh: Mesh, field):
        self.mesh = mesh
        self.field = field
        self.stiffness = _assemble_stiffness(mesh, field)
        self.interior = mesh.interior_indices
        self.dirichlet = mesh.boundary_indices
        K = self.stiffness
        self._K_ii = K[self.interior][:, self.interior].tocsc()
        self._K_ib = K[self.interior][:, self.dirichlet].tocsr()
        self._lu = splu(self._K_ii)
        self.last_residual = 0.0

    def solve_dirichlet(self, psi_boundary: np.ndarray) -> DiscreteField:
        """A-harmonic extension of boundary data (weak Dirichlet problem)."""
        psi_boundary = np.asarray(psi_boundary, dtype=float)
        if not np.all(np.isfinite(psi_boundary)):
            raise MeshError("boundary values must be finite")
        u = np.zeros(self.mesh.n_vertices)
        u[self.dirichlet] = psi_boundary
        rhs = -self._K_ib @ psi_boundary
        u[self.interior] = self._lu.solve(rhs)
        self._record_residual(rhs, u)
        return DiscreteField(self.mesh, u)

    def solve_load(self, f_vertex_values: np.ndarray) -> DiscreteField:
        """Solve -A u = f with zero boundary trace (Green operator applied
        to a vertex-sampled density, lumped-mass load)."""
        f = np.asarray(f_vertex_values, dtype=float)
        rhs_full = self.mesh.lumped_mass * f
        return self.solve_load_vector(rhs_full)

    def solve_load_vector(self, rhs_full: np.ndarray) -> DiscreteField:
        u = np.zeros(self.mesh.n_vertices)
        rhs = rhs_full[self.interior]
        u[self.interior] = self._lu.solve(rhs)
        self._record_residual(rhs, u)
        return DiscreteField(self.mesh, u)

    def green_column(self, y, weight: float = 1.0) -> DiscreteField:
        """Green function column: unit (or ``weight``) Dirac load at the
        interior vertex nearest to y."""
        y = np.asarray(y, dtype=float)
        vid = self.nearest_interior_vertex(y)
        rhs_full = np.zeros(self.mesh.n_vertices)
        rhs_full[vid] = weight
        return self.solve_load_vector(rhs_full)

    def nearest_interior_vertex(self, y) -> int:
        d = np.linalg.norm(self.mesh.vertices - np.asarray(y, dtype=float), axis=1)
        d[self.mesh.boundary] = np.inf
        return int(np.argmin(d))

    def energy(self, u: np.ndarray, v: np.ndarray) -> float:
        return float(u @ (self.stiffness @ v))

    def _record_residual(self, rhs, u):
        resid = self._K_ii @ u[self.interior] - rhs
        scale = max(float(np.linalg.norm(rhs)), 1e-300)
        self.last_residual = float(np.linalg.norm(resid)) / scale
        if self.last_residual > 1e-10 and np.linalg.norm(rhs) > 1e-13:
            raise MeshError(f"linear solve residual {self.last_residual:.2e} > 1e-10")


def _assemble_stiffness(mesh: Mesh, field) -> csr_matrix:
    area = mesh.areas
    grads = mesh.hat_gradients
    a_mats = field.a_many(mesh.centroids)
    # local 3x3 blocks: area * grad_i . a . grad_j
    ag = np.einsum("tij,tkj->tki", a_mats, grads)
    local = np.einsum("tki,tli->tkl", ag, grads) * area[:, None, None]
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    K = coo_matrix((local.ravel(), (rows, cols)),
                   shape=(mesh.n_vertices, mesh.n_vertices))
    return K.tocsr()


# -- module-level operation wrappers ----------------------------------------


def solve_weak(mesh: Mesh, field, psi_values: np.ndarray) -> DiscreteField:
    return FemSystem(mesh, field).solve_dirichlet(psi_values)


def green_apply(mesh: Mesh, field, f_values: np.ndarray) -> DiscreteField:
    return FemSystem(mesh, field).solve_load(f_values)


def green_column(mesh: Mesh, field, y, weight: float = 1.0) -> DiscreteField:
    return FemSystem(mesh, field).green_column(y, weight)


def breve_norm(u: DiscreteField, delta: DiscreteField) -> float:
    """L2 norm plus delta-weighted gradient seminorm, by edge-midpoint
    quadrature (exact for the quadratic integrands of P1 fields)."""
    if u.mesh is not delta.mesh and u.mesh.n_vertices != delta.mesh.n_vertices:
        raise MeshError("fields live on different meshes")
    mesh = u.mesh
    tris = mesh.triangles
    area = mesh.areas
    uv = u.values[tris]
    dv = delta.values[tris]
    mid_u = np.stack([(uv[:, 0] + uv[:, 1]) / 2,
                      (uv[:, 1] + uv[:, 2]) / 2,
                      (uv[:, 2] + uv[:, 0]) / 2], axis=1)
    l2_sq = float(np.sum(area[:, None] / 3.0 * mid_u ** 2))
    grads = mesh.hat_gradients
    gu = np.einsum("tk,tki->ti", uv, grads)
    dbar = dv.mean(axis=1)
    grad_sq = float(np.sum(area * np.maximum(dbar, 0.0) * (gu ** 2).sum(axis=1)))
    return np.sqrt(l2_sq) + np.sqrt(grad_sq)


def trace_values(u: DiscreteField):
    """Boundary restriction keyed by (vertex, component, side)."""
    mesh = u.mesh
    idx = mesh.boundary_indices
    return [
        {
            "vertex": int(i),
            "position": mesh.vertices[i].copy(),
            "component": mesh.component_names[mesh.component[i]],
            "side": SIDE_NAMES[int(mesh.side[i])],
            "value": float(u.values[i]),
        }
        for i in idx
    ]


def integrate(mesh: Mesh, vertex_values: np.ndarray) -> float:
    """Integral over the domain of a P1 field (lumped quadrature)."""
    return float(mesh.lumped_mass @ np.asarray(vertex_values, dtype=float))


# -- exports -----------------------------------------------------------------


def mesh_to_off(mesh: Mesh) -> str:
    lines = ["OFF", f"{mesh.n_vertices} {mesh.n_triangles} 0"]
    for v in mesh.vertices:
        lines.append(f"{v[0]!r} {v[1]!r} 0.0")
    for t in mesh.triangles:
        lines.append(f"3 {t[0]} {t[1]} {t[2]}")
    return "\n".join(lines) + "\n"


def field_to_csv(u: DiscreteField) -> str:
    mesh = u.mesh
    lines = ["vertex_id,x,y,value,boundary_flag,side"]
    for i in range(mesh.n_vertices):
        side = SIDE_NAMES[int(mesh.side[i])] or ""
        flag = mesh.component_names[mesh.component[i]] if mesh.boundary[i] else "interior"
        lines.append(
            f"{i},{mesh.vertices[i,0]!r},{mesh.vertices[i,1]!r},{u.values[i]!r},{flag},{side}"
        )
    return "\n".join(lines) + "\n"
