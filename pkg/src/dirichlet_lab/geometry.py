"""Bounded open subsets of R^2 / R^3 with inside tests, boundary distance,
segment exit classification and exhaustion sequences.

The shape catalog deliberately includes irregular examples: a slit disk whose
slit carries a two-sided label space {above, below, tip}, and a punctured
disk whose removed point is a zero-width (polar) boundary component.  Exit
detection against polar components uses a small capture radius and is
reported separately; diffusion paths are never absorbed there.

All domain objects are immutable after construction and safe to share across
concurrent samplers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

TOL_GEOM = 1e-12        # exact shapes
TOL_GEOM_CSG = 1e-9     # composite shapes (bisection refinement)
PUNCTURE_CAPTURE_FRACTION = 1e-6   # capture radius = fraction * diameter

SIDE_NONE = 0
SIDE_ABOVE = 1
SIDE_BELOW = -1
SIDE_TIP = 2

SIDE_NAMES = {SIDE_NONE: None, SIDE_ABOVE: "above", SIDE_BELOW: "below", SIDE_TIP: "tip"}
SIDE_CODES = {None: SIDE_NONE, "above": SIDE_ABOVE, "below": SIDE_BELOW, "tip": SIDE_TIP}


class GeometryError(ValueError):
    pass


class NoCrossingError(GeometryError):
    """Segment was expected to cross the boundary but no crossing was found;
    signals a stepper bug."""


@dataclass(frozen=True)
class BoundaryPoint:
    """A point of the (possibly two-sided) boundary.

    ``side`` is only meaningful on duplicated components such as a slit.
    """

    position: np.ndarray
    component: str = "outer"
    side: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))


def _as_points(x) -> np.ndarray:
    pts = np.asarray(x, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    return pts


class Domain:
    """Base class; concrete shapes implement the vectorized "_many" methods."""

    dim: int
    components: tuple

    # -- scalar conveniences --------------------------------------------

    def inside(self, x) -> bool:
        return bool(self.inside_many(_as_points(x))[0])

    def distance_to_boundary(self, x) -> float:
        x = np.asarray(x, dtype=float)
        if not self.inside(x):
            raise GeometryError(f"point {x.tolist()} is not inside the domain")
        return float(self.distance_many(x[None, :])[0])

    # -- vectorized interface --------------------------------------------

    def inside_many(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def distance_many(self, pts: np.ndarray) -> np.ndarray:
        """Distance to the full boundary, polar components included."""
        raise NotImplementedError

    def wos_distance_many(self, pts: np.ndarray) -> np.ndarray:
        """Distance to the non-polar part of the boundary (safe sphere radius)."""
        return self.distance_many(pts)

    def project_boundary_many(self, pts: np.ndarray):
        """Nearest non-polar boundary point per row: (positions, components, sides)."""
        raise NotImplementedError

    # -- exit classification ----------------------------------------------

    def classify_exit(self, x_prev, x_next) -> BoundaryPoint:
        """First crossing of the segment [x_prev, x_next] with the boundary.

        The side label is taken from the approach direction (the x_prev side).
        """
        x_prev = np.asarray(x_prev, dtype=float)
        x_next = np.asarray(x_next, dtype=float)
        hit = self._first_crossing(x_prev, x_next)
        if hit is None:
            raise NoCrossingError(
                f"segment {x_prev.tolist()} -> {x_next.tolist()} does not cross the boundary"
            )
        return hit[1]

    def crossing_parameter(self, x_prev, x_next):
        """Like :meth:`classify_exit` but also returns t in (0, 1]."""
        x_prev = np.asarray(x_prev, dtype=float)
        x_next = np.asarray(x_next, dtype=float)
        hit = self._first_crossing(x_prev, x_next)
        if hit is None:
            raise NoCrossingError(
                f"segment {x_prev.tolist()} -> {x_next.tolist()} does not cross the boundary"
            )
        return hit

    def _first_crossing(self, a, b):
        raise NotImplementedError

    def interior_crossing_many(self, a_pts: np.ndarray, b_pts: np.ndarray):
        """Detect segments crossing a two-sided interior boundary sheet even
        though both endpoints test inside (slit domains).  Returns
        (mask, positions, components, sides) with rows defined where mask."""
        n = len(a_pts)
        return (np.zeros(n, dtype=bool), np.zeros_like(a_pts),
                np.zeros(n, dtype=np.int32), np.zeros(n, dtype=np.int8))

    # -- misc ---------------------------------------------------------------

    @property
    def bounding_box(self):
        raise NotImplementedError

    @property
    def diameter(self) -> float:
        lo, hi = self.bounding_box
        return float(np.linalg.norm(hi - lo))

    @property
    def polar_points(self) -> np.ndarray:
        """Zero-capacity point components, shape (k, dim)."""
        return np.empty((0, self.dim))

    @property
    def puncture_capture_radius(self) -> float:
        return PUNCTURE_CAPTURE_FRACTION * self.diameter

    @property
    def angular_center(self) -> np.ndarray:
        lo, hi = self.bounding_box
        return (lo + hi) / 2.0

    def exhaustion(self, n: int) -> "OffsetDomain":
        """n-th member of an increasing exhaustion by distance offsets."""
        if n < 1:
            raise GeometryError("exhaustion index must be >= 1")
        r = self.diameter * 2.0 ** (-n - 1)
        return OffsetDomain(self, r)


# --------------------------------------------------------------------------
# primitive shapes
# --------------------------------------------------------------------------


class Ball(Domain):
    def __init__(self, center, radius: float):
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        if self.radius <= 0:
            raise GeometryError("ball radius must be positive")
        self.dim = self.center.size
        self.components = ("outer",)

    def inside_many(self, pts):
        r = np.linalg.norm(pts - self.center, axis=1)
        return r < self.radius

    def distance_many(self, pts):
        r = np.linalg.norm(pts - self.center, axis=1)
        return self.radius - r

    def project_boundary_many(self, pts):
        v = pts - self.center
        r = np.linalg.norm(v, axis=1)
        safe = np.where(r > 0, r, 1.0)
        pos = self.center + v * (self.radius / safe)[:, None]
        # a point at the exact center projects to an arbitrary boundary point
        pos[r == 0] = self.center + self.radius * np.eye(self.dim)[0]
        comps = np.zeros(len(pts), dtype=np.int32)
        sides = np.full(len(pts), SIDE_NONE, dtype=np.int8)
        return pos, comps, sides

    def _first_crossing(self, a, b):
        t = _ray_sphere_exit(a, b, self.center, self.radius)
        if t is None:
            return None
        pos = a + t * (b - a)
        pos = self.center + (pos - self.center) * (self.radius / np.linalg.norm(pos - self.center))
        return t, BoundaryPoint(pos, "outer", None)

    @property
    def bounding_box(self):
        return self.center - self.radius, self.center + self.radius

    @property
    def diameter(self):
        return 2.0 * self.radius

    @property
    def angular_center(self):
        return self.center


def _ray_sphere_exit(a, b, center, radius):
    """Smallest t in (0, 1] with |a + t(b-a) - center| = radius, else None."""
    d = b - a
    f = a - center
    A = float(d @ d)
    if A == 0.0:
        return None
    B = 2.0 * float(f @ d)
    C = float(f @ f) - radius * radius
    disc = B * B - 4 * A * C
    if disc < 0:
        return None
    s = np.sqrt(disc)
    for t in sorted(((-B - s) / (2 * A), (-B + s) / (2 * A))):
        if 1e-14 < t <= 1.0 + 1e-14:
            return min(t, 1.0)
    return None


class Box(Domain):
    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        if np.any(self.hi <= self.lo):
            raise GeometryError("box needs hi > lo componentwise")
        self.dim = self.lo.size
        self.components = ("outer",)

    def inside_many(self, pts):
        return np.all((pts > self.lo) & (pts < self.hi), axis=1)

    def distance_many(self, pts):
        return np.minimum((pts - self.lo).min(axis=1), (self.hi - pts).min(axis=1))

    def project_boundary_many(self, pts):
        # nearest face per point
        gaps = np.concatenate([pts - self.lo, self.hi - pts], axis=1)
        k = np.argmin(gaps, axis=1)
        pos = pts.copy()
        rows = np.arange(len(pts))
        axis = k % self.dim
        is_hi = k >= self.dim
        pos[rows, axis] = np.where(is_hi, self.hi[axis], self.lo[axis])
        comps = np.zeros(len(pts), dtype=np.int32)
        sides = np.full(len(pts), SIDE_NONE, dtype=np.int8)
        return pos, comps, sides

    def _first_crossing(self, a, b):
        d = b - a
        best = None
        for axis in range(self.dim):
            if d[axis] == 0.0:
                continue
            for plane in (self.lo[axis], self.hi[axis]):
                t = (plane - a[axis]) / d[axis]
                if 1e-14 < t <= 1.0 + 1e-14:
                    p = a + min(t, 1.0) * d
                    others = [i for i in range(self.dim) if i != axis]
                    if np.all(p[others] >= self.lo[others] - TOL_GEOM) and np.all(
                        p[others] <= self.hi[others] + TOL_GEOM
                    ):
                        p = p.copy()
                        p[axis] = plane
                        if best is None or t < best[0]:
                            best = (min(t, 1.0), BoundaryPoint(p, "outer", None))
        return best

    @property
    def bounding_box(self):
        return self.lo.copy(), self.hi.copy()

    @property
    def diameter(self):
        return float(np.linalg.norm(self.hi - self.lo))


class Polygon(Domain):
    """Simple polygon (optionally with polygonal holes), d = 2 only."""

    def __init__(self, vertices, holes=()):
        self.vertices = np.asarray(vertices, dtype=float)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2 or len(self.vertices) < 3:
            raise GeometryError("polygon needs >= 3 planar vertices")
        self.holes = tuple(np.asarray(h, dtype=float) for h in holes)
        self.dim = 2
        self.components = ("outer",) + tuple(f"hole{i}" for i in range(len(self.holes)))
        self._rings = (self.vertices,) + self.holes

    @staticmethod
    def _edges(ring):
        return ring, np.roll(ring, -1, axis=0)

    @staticmethod
    def _winding_inside(pts, ring):
        # even-odd rule ray cast along +x
        x, y = pts[:, 0], pts[:, 1]
        inside = np.zeros(len(pts), dtype=bool)
        a, b = Polygon._edges(ring)
        for (x1, y1), (x2, y2) in zip(a, b):
            cond = (y1 > y) != (y2 > y)
            with np.errstate(divide="ignore", invalid="ignore"):
                xs = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            hit = cond & (x < xs)
            inside ^= hit
        return inside

    def inside_many(self, pts):
        ok = Polygon._winding_inside(pts, self.vertices)
        for h in self.holes:
            ok &= ~Polygon._winding_inside(pts, h)
        # points within tol of any edge are boundary, hence outside
        ok &= self.distance_many(pts) > 0
        return ok

    def distance_many(self, pts):
        best = np.full(len(pts), np.inf)
        for ring in self._rings:
            a, b = Polygon._edges(ring)
            for p1, p2 in zip(a, b):
                best = np.minimum(best, _dist_point_segment(pts, p1, p2))
        return best

    def project_boundary_many(self, pts):
        best = np.full(len(pts), np.inf)
        pos = np.zeros_like(pts)
        comp = np.zeros(len(pts), dtype=np.int32)
        for ci, ring in enumerate(self._rings):
            a, b = Polygon._edges(ring)
            for p1, p2 in zip(a, b):
                proj = _project_point_segment(pts, p1, p2)
                d = np.linalg.norm(pts - proj, axis=1)
                take = d < best
                best[take] = d[take]
                pos[take] = proj[take]
                comp[take] = ci
        sides = np.full(len(pts), SIDE_NONE, dtype=np.int8)
        return pos, comp, sides

    def _first_crossing(self, a, b):
        best = None
        for ci, ring in enumerate(self._rings):
            va, vb = Polygon._edges(ring)
            for p1, p2 in zip(va, vb):
                t = _segment_segment_t(a, b, p1, p2)
                if t is not None and (best is None or t < best[0]):
                    best = (t, BoundaryPoint(a + t * (b - a), self.components[ci], None))
        return best

    @property
    def bounding_box(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def diameter(self):
        d = self.vertices[:, None, :] - self.vertices[None, :, :]
        return float(np.sqrt((d ** 2).sum(-1)).max())


def _dist_point_segment(pts, p1, p2):
    v = p2 - p1
    L2 = float(v @ v)
    if L2 == 0:
        return np.linalg.norm(pts - p1, axis=1)
    t = np.clip(((pts - p1) @ v) / L2, 0.0, 1.0)
    proj = p1 + t[:, None] * v
    return np.linalg.norm(pts - proj, axis=1)


def _project_point_segment(pts, p1, p2):
    v = p2 - p1
    L2 = float(v @ v)
    if L2 == 0:
        return np.broadcast_to(p1, pts.shape).copy()
    t = np.clip(((pts - p1) @ v) / L2, 0.0, 1.0)
    return p1 + t[:, None] * v


def _segment_segment_t(a, b, p1, p2):
    """Parameter t in (0,1] where segment a->b crosses segment p1->p2, or None."""
    r = b - a
    s = p2 - p1
    denom = r[0] * s[1] - r[1] * s[0]
    q = p1 - a
    if abs(denom) < 1e-300:
        return None
    t = (q[0] * s[1] - q[1] * s[0]) / denom
    u = (q[0] * r[1] - q[1] * r[0]) / denom
    if 1e-14 < t <= 1.0 + 1e-14 and -1e-12 <= u <= 1.0 + 1e-12:
        return min(t, 1.0)
    return None


class SlitBall(Domain):
    """Ball with a closed slit segment removed; the slit is two-sided.

    d = 2 only.  Side labels follow the approach direction relative to the
    slit normal (rotate slit direction by +90 degrees); crossings within
    ``TOL_GEOM`` of a tip are labeled "tip".
    """

    def __init__(self, radius: float, slit, center=(0.0, 0.0)):
        self.ball = Ball(center, radius)
        self.slit = np.asarray(slit, dtype=float)
        if self.slit.shape != (2, 2):
            raise GeometryError("slit must be a 2-point planar segment")
        self.dim = 2
        ends_inside = self.ball.inside_many(self.slit)
        if not np.all(ends_inside):
            raise GeometryError("slit must lie strictly inside the ball")
        self.a, self.b = self.slit[0], self.slit[1]
        tangent = self.b - self.a
        L = np.linalg.norm(tangent)
        if L == 0:
            raise GeometryError("slit is degenerate")
        self.normal = np.array([-tangent[1], tangent[0]]) / L
        self.components = ("outer", "slit")

    def side_of(self, pts) -> np.ndarray:
        return (_as_points(pts) - self.a) @ self.normal

    def inside_many(self, pts):
        ok = self.ball.inside_many(pts)
        on_slit = _dist_point_segment(pts, self.a, self.b) <= 0.0
        return ok & ~on_slit

    def distance_many(self, pts):
        return np.minimum(
            self.ball.distance_many(pts), _dist_point_segment(pts, self.a, self.b)
        )

    def project_boundary_many(self, pts):
        pos_c, comp_c, side_c = self.ball.project_boundary_many(pts)
        d_c = np.linalg.norm(pts - pos_c, axis=1)
        pos_s = _project_point_segment(pts, self.a, self.b)
        d_s = np.linalg.norm(pts - pos_s, axis=1)
        use_slit = d_s < d_c
        pos = np.where(use_slit[:, None], pos_s, pos_c)
        comp = np.where(use_slit, 1, 0).astype(np.int32)
        side = np.full(len(pts), SIDE_NONE, dtype=np.int8)
        sign = self.side_of(pts)
        near_tip = np.minimum(
            np.linalg.norm(pos_s - self.a, axis=1), np.linalg.norm(pos_s - self.b, axis=1)
        ) <= TOL_GEOM
        side[use_slit & (sign > 0)] = SIDE_ABOVE
        side[use_slit & (sign <= 0)] = SIDE_BELOW
        side[use_slit & near_tip] = SIDE_TIP
        return pos, comp, side

    def _first_crossing(self, a, b):
        hits = []
        t_ball = _ray_sphere_exit(a, b, self.ball.center, self.ball.radius)
        if t_ball is not None:
            p = a + t_ball * (b - a)
            hits.append((t_ball, BoundaryPoint(p, "outer", None)))
        t_slit = _segment_segment_t(a, b, self.a, self.b)
        if t_slit is not None:
            p = a + t_slit * (b - a)
            if min(np.linalg.norm(p - self.a), np.linalg.norm(p - self.b)) <= TOL_GEOM:
                side = "tip"
            else:
                side = "above" if self.side_of(a)[0] > 0 else "below"
            hits.append((t_slit, BoundaryPoint(p, "slit", side)))
        if not hits:
            return None
        return min(hits, key=lambda h: h[0])

    def interior_crossing_many(self, a_pts, b_pts):
        n = len(a_pts)
        pos = np.zeros_like(a_pts)
        comp = np.zeros(n, dtype=np.int32)
        side = np.zeros(n, dtype=np.int8)
        sa = (a_pts - self.a) @ self.normal
        sb = (b_pts - self.a) @ self.normal
        flip = (sa > 0) != (sb > 0)
        if not np.any(flip):
            return np.zeros(n, dtype=bool), pos, comp, side
        t = np.zeros(n)
        t[flip] = sa[flip] / (sa[flip] - sb[flip])
        p = a_pts + t[:, None] * (b_pts - a_pts)
        tangent = self.b - self.a
        L = np.linalg.norm(tangent)
        along = (p - self.a) @ (tangent / L)
        mask = flip & (along >= -TOL_GEOM) & (along <= L + TOL_GEOM)
        pos[mask] = p[mask]
        comp[mask] = 1
        side[mask] = np.where(sa[mask] > 0, SIDE_ABOVE, SIDE_BELOW)
        near_tip = mask & (np.minimum(np.abs(along), np.abs(L - along)) <= TOL_GEOM)
        side[near_tip] = SIDE_TIP
        return mask, pos, comp, side

    @property
    def bounding_box(self):
        return self.ball.bounding_box

    @property
    def diameter(self):
        return self.ball.diameter

    @property
    def angular_center(self):
        return self.ball.center


class PuncturedBall(Domain):
    """Ball minus one interior point.  The point is polar in d >= 2: paths
    never hit it, but exit detection keeps a capture radius and reports any
    capture."""

    def __init__(self, radius: float, removed, center=(0.0, 0.0)):
        self.ball = Ball(center, radius)
        self.removed = np.asarray(removed, dtype=float)
        self.dim = self.removed.size
        if not self.ball.inside(self.removed):
            raise GeometryError("removed point must lie strictly inside the ball")
        self.components = ("outer", "puncture")

    def inside_many(self, pts):
        ok = self.ball.inside_many(pts)
        at_rm = np.linalg.norm(pts - self.removed, axis=1) <= 0.0
        return ok & ~at_rm

    def distance_many(self, pts):
        return np.minimum(
            self.ball.distance_many(pts), np.linalg.norm(pts - self.removed, axis=1)
        )

    def wos_distance_many(self, pts):
        return self.ball.distance_many(pts)

    def project_boundary_many(self, pts):
        return self.ball.project_boundary_many(pts)

    def _first_crossing(self, a, b):
        # captures against the puncture are checked separately by the stepper
        # via polar_points; only the outer sphere terminates paths here
        return self.ball._first_crossing(a, b)

    @property
    def bounding_box(self):
        return self.ball.bounding_box

    @property
    def diameter(self):
        return self.ball.diameter

    @property
    def polar_points(self):
        return self.removed[None, :]

    @property
    def angular_center(self):
        return self.ball.center


class Csg(Domain):
    """Union / intersection / difference of shapes.

    The reported boundary distance is a safe lower bound (exact away from
    trim seams); walk-on-spheres stays correct because the inscribed ball is
    always contained in the domain.  Exit classification refines the inside
    flip along the segment by bisection to TOL_GEOM_CSG.
    """

    def __init__(self, op: str, shapes):
        if op not in ("union", "intersection", "difference"):
            raise GeometryError(f"unknown csg op '{op}'")
        if len(shapes) < 2:
            raise GeometryError("csg needs at least two shapes")
        self.op = op
        self.shapes = tuple(shapes)
        self.dim = self.shapes[0].dim
        self.components = ("outer",)

    def inside_many(self, pts):
        flags = [s.inside_many(pts) for s in self.shapes]
        if self.op == "union":
            out = flags[0]
            for f in flags[1:]:
                out = out | f
            return out
        if self.op == "intersection":
            out = flags[0]
            for f in flags[1:]:
                out = out & f
            return out
        out = flags[0]
        for f in flags[1:]:
            out = out & ~f
        return out

    def distance_many(self, pts):
        if self.op == "union":
            # largest inscribed radius among members containing the point
            stack = []
            for s in self.shapes:
                d = s.distance_many(pts).copy()
                d[~s.inside_many(pts)] = -np.inf
                stack.append(d)
            return np.maximum.reduce(stack)
        if self.op == "intersection":
            return np.minimum.reduce([s.distance_many(pts) for s in self.shapes])
        # difference: gap to a removed shape seen from outside it; ball/box
        # distance fields are signed so the absolute value is that gap
        base = self.shapes[0].distance_many(pts)
        for s in self.shapes[1:]:
            base = np.minimum(base, np.abs(s.distance_many(pts)))
        return base

    def project_boundary_many(self, pts):
        best = np.full(len(pts), np.inf)
        pos = np.zeros_like(pts)
        for s in self.shapes:
            p, _, _ = s.project_boundary_many(pts)
            d = np.linalg.norm(pts - p, axis=1)
            take = d < best
            best[take] = d[take]
            pos[take] = p[take]
        comps = np.zeros(len(pts), dtype=np.int32)
        sides = np.full(len(pts), SIDE_NONE, dtype=np.int8)
        return pos, comps, sides

    def _first_crossing(self, a, b):
        if self.inside(b):
            return None
        lo_t, hi_t = 0.0, 1.0
        # bisection on the inside flag
        for _ in range(200):
            mid = 0.5 * (lo_t + hi_t)
            if self.inside(a + mid * (b - a)):
                lo_t = mid
            else:
                hi_t = mid
            if (hi_t - lo_t) * np.linalg.norm(b - a) < TOL_GEOM_CSG:
                break
        t = hi_t
        return t, BoundaryPoint(a + t * (b - a), "outer", None)

    @property
    def bounding_box(self):
        los, his = zip(*(s.bounding_box for s in self.shapes))
        if self.op == "union":
            return np.minimum.reduce(los), np.maximum.reduce(his)
        return los[0], his[0]

    @property
    def polar_points(self):
        pts = [s.polar_points for s in self.shapes]
        return np.concatenate(pts, axis=0)


class OffsetDomain(Domain):
    """Inward offset {x in D : dist(x, boundary of D) > r}; realizes the
    exhaustion D_n strictly inside D_{n+1} strictly inside D."""

    def __init__(self, base: Domain, r: float):
        if r <= 0:
            raise GeometryError("offset must be positive")
        self.base = base
        self.r = float(r)
        self.dim = base.dim
        self.components = ("offset",)

    def inside_many(self, pts):
        ok = self.base.inside_many(pts)
        d = np.full(len(pts), -np.inf)
        d[ok] = self.base.distance_many(pts[ok])
        return ok & (d > self.r)

    def distance_many(self, pts):
        return self.base.distance_many(pts) - self.r

    def wos_distance_many(self, pts):
        return self.base.wos_distance_many(pts) - self.r

    def project_boundary_many(self, pts):
        # move toward the base boundary by the excess distance
        proj, _, _ = self.base.project_boundary_many(pts)
        v = proj - pts
        L = np.linalg.norm(v, axis=1)
        safe = np.where(L > 0, L, 1.0)
        excess = self.base.wos_distance_many(pts) - self.r
        pos = pts + v * (excess / safe)[:, None]
        comps = np.zeros(len(pts), dtype=np.int32)
        sides = np.full(len(pts), SIDE_NONE, dtype=np.int8)
        return pos, comps, sides

    def _first_crossing(self, a, b):
        fb = float(self.base.wos_distance_many(b[None, :])[0]) - self.r
        if fb > 0:
            return None
        lo_t, hi_t = 0.0, 1.0
        for _ in range(100):
            mid = 0.5 * (lo_t + hi_t)
            fm = float(self.base.wos_distance_many((a + mid * (b - a))[None, :])[0]) - self.r
            if fm > 0:
                lo_t = mid
            else:
                hi_t = mid
            if (hi_t - lo_t) * np.linalg.norm(b - a) < TOL_GEOM_CSG:
                break
        t = hi_t
        return t, BoundaryPoint(a + t * (b - a), "offset", None)

    @property
    def bounding_box(self):
        lo, hi = self.base.bounding_box
        return lo + self.r, hi - self.r

    @property
    def diameter(self):
        return max(self.base.diameter - 2 * self.r, 0.0)

    @property
    def polar_points(self):
        return np.empty((0, self.dim))

    @property
    def angular_center(self):
        return self.base.angular_center


# --------------------------------------------------------------------------
# JSON loading
# --------------------------------------------------------------------------


def domain_from_json(spec: dict) -> Domain:
    """Build a domain from its scenario-file JSON description."""
    kind = spec.get("type")
    if kind == "ball":
        return Ball(spec.get("center", [0.0, 0.0]), spec["radius"])
    if kind == "box":
        return Box(spec["lo"], spec["hi"])
    if kind == "polygon":
        return Polygon(spec["vertices"], spec.get("holes", ()))
    if kind == "slit_ball":
        return SlitBall(spec["radius"], spec["slit"], spec.get("center", (0.0, 0.0)))
    if kind == "punctured_ball":
        center = spec.get("center", [0.0] * len(spec["removed"]))
        return PuncturedBall(spec["radius"], spec["removed"], center)
    if kind == "csg":
        shapes = [domain_from_json(s) for s in spec["shapes"]]
        return Csg(spec["op"], shapes)
    raise GeometryError(f"unknown domain type '{kind}'")


SHAPE_TYPES = ("ball", "box", "polygon", "slit_ball", "punctured_ball", "csg")
