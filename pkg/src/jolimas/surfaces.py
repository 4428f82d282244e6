"""Surface models and the geometric queries the pipeline needs.

Every query is batched: points/directions may be (3,) or (N, 3). Walking
is step-and-project (move in the tangent plane, snap back with
closest_point), deliberately avoiding geodesic integration.

Variants: Plane, Cylinder, Sphere, EllipsoidSurface (all parametric,
closed-form or Newton projections), TriangleMesh (point-triangle /
Moller-Trumbore), GridSurface (depth + normal grids registered to a
camera, bilinear interpolation).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import MeshFormatError, OffSurface, StalledWalk
from .geom import CameraView, PlaneH, camera_from_record, camera_to_record

ON_SURFACE_TOL = 1e-6
_RAY_EPS = 1e-9


def _batched(points):
    p = np.asarray(points, dtype=float)
    single = p.ndim == 1
    return (p[None, :] if single else p), single


def _unit_rows(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@dataclass(frozen=True)
class SurfacePoint:
    """A point on a surface with its unit outward normal."""

    position: np.ndarray
    normal: np.ndarray
    surface: "Surface"

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "normal", np.asarray(self.normal, dtype=float).reshape(3))


class Surface:
    """Base class; subclasses implement the _impl batched queries."""

    def normals(self, points):
        """Unit outward normals at on-surface points; OffSurface otherwise."""
        p, single = _batched(points)
        d = np.abs(self.distance(p))
        if np.any(d > ON_SURFACE_TOL):
            raise OffSurface(f"point is {d.max():.3g} from the surface")
        n = self._normals(p)
        return n[0] if single else n

    def normal_at(self, point):
        return self.normals(point)

    def closest_point(self, points, hint=None):
        """Nearest surface point(s); `hint` resolves ambiguous queries."""
        p, single = _batched(points)
        if hint is None:
            h = p
        else:
            h, _ = _batched(hint)
            h = np.broadcast_to(h, p.shape)
        q = self._closest(p, h)
        return q[0] if single else q

    def intersect_rays(self, origin, dirs):
        """(t, hit) of the nearest positive-parameter intersections."""
        d, single = _batched(dirs)
        o = np.broadcast_to(np.asarray(origin, dtype=float), d.shape)
        t, hit = self._intersect(o, d)
        if single:
            return t[0], hit[0]
        return t, hit

    def point_at(self, position) -> SurfacePoint:
        """SurfacePoint at an on-surface position."""
        return SurfacePoint(position=position, normal=self.normals(position), surface=self)

    # subclass interface -------------------------------------------------
    def _normals(self, p):  # (N,3) -> (N,3), p assumed on-surface
        raise NotImplementedError

    def _closest(self, p, hint):  # (N,3),(N,3) -> (N,3)
        raise NotImplementedError

    def _intersect(self, o, d):  # (N,3),(N,3) -> (t (N,), hit (N,))
        raise NotImplementedError

    def distance(self, points):  # (N,3) -> (N,) unsigned distance estimate
        p, single = _batched(points)
        r = np.linalg.norm(p - self._closest(p, p), axis=-1)
        return r[0] if single else r

    def sample_points(self, nu, nv):  # coarse parametric coverage, (N,3)
        raise NotImplementedError


def tangent_plane(sp: SurfacePoint) -> PlaneH:
    """Tangent plane at a surface point: n = normal, d = -n.position."""
    return PlaneH.from_point_normal(sp.position, sp.normal)


def walk_batch(surface: Surface, positions, directions, step):
    """One step-and-project move for a batch of walkers.

    Returns (new_positions, new_normals, new_directions, stalled_mask);
    directions are re-projected onto the new tangent planes.
    """
    positions = np.asarray(positions, dtype=float)
    directions = np.asarray(directions, dtype=float)
    raw = positions + step * directions
    new_pos = surface._closest(raw, positions)
    advance = np.linalg.norm(new_pos - positions, axis=-1)
    stalled = advance < 0.1 * step
    n = surface._normals(new_pos)
    d = directions - np.sum(directions * n, axis=-1, keepdims=True) * n
    norms = np.linalg.norm(d, axis=-1, keepdims=True)
    bad = norms[..., 0] < 1e-12
    if np.any(bad):  # direction collapsed onto the normal: keep the old one
        d[bad] = directions[bad]
        norms = np.linalg.norm(d, axis=-1, keepdims=True)
    return new_pos, n, d / norms, stalled


def walk_on_surface(surface: Surface, start: SurfacePoint, tangent_dir, step):
    """Single-walker wrapper with precondition checks; returns (SurfacePoint, dir)."""
    t = np.asarray(tangent_dir, dtype=float)
    if step <= 0:
        raise ValueError("step must be positive")
    if abs(t @ start.normal) > 1e-6:
        raise ValueError("tangent_dir must be orthogonal to the start normal")
    pos, nrm, d, stalled = walk_batch(surface, start.position[None], t[None], step)
    if stalled[0]:
        raise StalledWalk(f"walk advanced less than {0.1 * step:.3g}")
    return SurfacePoint(position=pos[0], normal=nrm[0], surface=surface), d[0]


# ---------------------------------------------------------------------------
# parametric variants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Plane(Surface):
    """Plane n.x + d = 0, optionally bounded to a rectangular sheet."""

    plane: PlaneH
    center: np.ndarray | None = None  # sheet center (bounded variants)
    e1: np.ndarray | None = None
    e2: np.ndarray | None = None
    half_w: float | None = None
    half_h: float | None = None

    def __post_init__(self):
        for name in ("center", "e1", "e2"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.asarray(v, dtype=float).reshape(3))

    @staticmethod
    def xy(width=None, height=None):
        """Plane z = 0, optionally bounded, axes (x, y)."""
        bounded = width is not None
        return Plane(
            plane=PlaneH(n=(0.0, 0.0, 1.0), d=0.0),
            center=np.zeros(3) if bounded else None,
            e1=np.array([1.0, 0.0, 0.0]) if bounded else None,
            e2=np.array([0.0, 1.0, 0.0]) if bounded else None,
            half_w=width / 2.0 if bounded else None,
            half_h=height / 2.0 if bounded else None,
        )

    @property
    def bounded(self):
        return self.half_w is not None

    def _inside(self, p):
        if not self.bounded:
            return np.ones(p.shape[:-1], dtype=bool)
        rel = p - self.center
        return (np.abs(rel @ self.e1) <= self.half_w) & (np.abs(rel @ self.e2) <= self.half_h)

    def _normals(self, p):
        return np.broadcast_to(self.plane.n, p.shape).copy()

    def _closest(self, p, hint):
        return self.plane.project(p)

    def _intersect(self, o, d):
        denom = d @ self.plane.n
        num = -(o @ self.plane.n + self.plane.d)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        hit = (np.abs(denom) > _RAY_EPS) & (t > _RAY_EPS)
        pts = o + t[..., None] * d
        hit &= self._inside(pts)
        return np.where(hit, t, np.inf), hit

    def distance(self, points):
        p, single = _batched(points)
        r = np.abs(self.plane.signed_distance(p))
        return r[0] if single else r

    def sample_points(self, nu, nv):
        if not self.bounded:
            raise ValueError("cannot sample an unbounded plane")
        u = np.linspace(-self.half_w, self.half_w, nu)
        v = np.linspace(-self.half_h, self.half_h, nv)
        U, V = np.meshgrid(u, v, indexing="ij")
        return self.center + U.reshape(-1, 1) * self.e1 + V.reshape(-1, 1) * self.e2


@dataclass(frozen=True)
class Cylinder(Surface):
    """Circular cylinder, optionally bounded to an angular/axial sheet.

    `ref_dir` marks angle zero (from the axis toward the sheet's tangency
    line); the sheet spans |angle| <= half_angle, |axial| <= half_length.
    """

    axis_point: np.ndarray
    axis_dir: np.ndarray
    radius: float
    ref_dir: np.ndarray | None = None
    half_angle: float | None = None
    half_length: float | None = None

    def __post_init__(self):
        a = np.asarray(self.axis_point, dtype=float).reshape(3)
        u = np.asarray(self.axis_dir, dtype=float).reshape(3)
        u = u / np.linalg.norm(u)
        object.__setattr__(self, "axis_point", a)
        object.__setattr__(self, "axis_dir", u)
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.ref_dir is None:
            k = int(np.argmin(np.abs(u)))
            axis = np.zeros(3)
            axis[k] = 1.0
            r1 = np.cross(u, axis)
        else:
            r1 = np.asarray(self.ref_dir, dtype=float).reshape(3)
            r1 = r1 - (r1 @ u) * u
        r1 = r1 / np.linalg.norm(r1)
        object.__setattr__(self, "ref_dir", r1)

    @property
    def bounded(self):
        return self.half_angle is not None

    @property
    def _ref2(self):
        return np.cross(self.axis_dir, self.ref_dir)

    def _angles_axial(self, p):
        rel = p - self.axis_point
        ax = rel @ self.axis_dir
        perp = rel - ax[..., None] * self.axis_dir
        ang = np.arctan2(perp @ self._ref2, perp @ self.ref_dir)
        return ang, ax

    def _inside(self, p):
        if not self.bounded:
            return np.ones(p.shape[:-1], dtype=bool)
        ang, ax = self._angles_axial(p)
        return (np.abs(ang) <= self.half_angle) & (np.abs(ax) <= self.half_length)

    def _normals(self, p):
        rel = p - self.axis_point
        perp = rel - (rel @ self.axis_dir)[..., None] * self.axis_dir
        return _unit_rows(perp)

    def _closest(self, p, hint):
        rel = p - self.axis_point
        ax = (rel @ self.axis_dir)[..., None] * self.axis_dir
        perp = rel - ax
        norms = np.linalg.norm(perp, axis=-1, keepdims=True)
        ambiguous = norms[..., 0] < 1e-9 * self.radius
        if np.any(ambiguous):
            hrel = hint - self.axis_point
            hperp = hrel - (hrel @ self.axis_dir)[..., None] * self.axis_dir
            perp = np.where(ambiguous[..., None], hperp, perp)
            norms = np.linalg.norm(perp, axis=-1, keepdims=True)
        return self.axis_point + ax + self.radius * perp / norms

    def _intersect(self, o, d):
        rel = o - self.axis_point
        op = rel - (rel @ self.axis_dir)[..., None] * self.axis_dir
        dp = d - (d @ self.axis_dir)[..., None] * self.axis_dir
        a = np.sum(dp * dp, axis=-1)
        b = np.sum(op * dp, axis=-1)
        c = np.sum(op * op, axis=-1) - self.radius**2
        disc = b * b - a * c
        ok = (disc >= 0) & (a > _RAY_EPS**2)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t = np.full(o.shape[:-1], np.inf)
        hit = np.zeros(o.shape[:-1], dtype=bool)
        with np.errstate(divide="ignore", invalid="ignore"):
            for root in ((-b - sq) / a, (-b + sq) / a):
                cand = ok & ~hit & (root > _RAY_EPS)
                if np.any(cand):
                    pts = o + root[..., None] * d
                    cand &= self._inside(pts)
                    t = np.where(cand, root, t)
                    hit |= cand
        return t, hit

    def distance(self, points):
        p, single = _batched(points)
        rel = p - self.axis_point
        perp = rel - (rel @ self.axis_dir)[..., None] * self.axis_dir
        r = np.abs(np.linalg.norm(perp, axis=-1) - self.radius)
        return r[0] if single else r

    def sample_points(self, nu, nv):
        if not self.bounded:
            raise ValueError("cannot sample an unbounded cylinder")
        ang = np.linspace(-self.half_angle, self.half_angle, nu)
        ax = np.linspace(-self.half_length, self.half_length, nv)
        A, X = np.meshgrid(ang, ax, indexing="ij")
        perp = np.outer(np.cos(A.ravel()), self.ref_dir) + np.outer(np.sin(A.ravel()), self._ref2)
        return self.axis_point + X.reshape(-1, 1) * self.axis_dir + self.radius * perp


@dataclass(frozen=True)
class Sphere(Surface):
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    def _normals(self, p):
        return _unit_rows(p - self.center)

    def _closest(self, p, hint):
        rel = p - self.center
        norms = np.linalg.norm(rel, axis=-1, keepdims=True)
        ambiguous = norms[..., 0] < 1e-9 * self.radius
        if np.any(ambiguous):
            hrel = hint - self.center
            rel = np.where(ambiguous[..., None], hrel, rel)
            norms = np.linalg.norm(rel, axis=-1, keepdims=True)
        return self.center + self.radius * rel / norms

    def _intersect(self, o, d):
        rel = self.center - o
        b = np.sum(rel * d, axis=-1)
        c = np.sum(rel * rel, axis=-1) - self.radius**2
        disc = b * b - c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t = np.where(ok & (b - sq > _RAY_EPS), b - sq, np.where(ok & (b + sq > _RAY_EPS), b + sq, np.inf))
        hit = np.isfinite(t)
        return t, hit

    def distance(self, points):
        p, single = _batched(points)
        r = np.abs(np.linalg.norm(p - self.center, axis=-1) - self.radius)
        return r[0] if single else r

    def sample_points(self, nu, nv):
        th = np.linspace(0.0, np.pi, nv + 2)[1:-1]
        ph = np.linspace(0.0, 2 * np.pi, nu, endpoint=False)
        T, P = np.meshgrid(th, ph, indexing="ij")
        st = np.sin(T.ravel())
        return self.center + self.radius * np.stack(
            [st * np.cos(P.ravel()), st * np.sin(P.ravel()), np.cos(T.ravel())], axis=-1
        )


@dataclass(frozen=True)
class EllipsoidSurface(Surface):
    center: np.ndarray
    axes: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(self, "axes", np.asarray(self.axes, dtype=float).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        if np.any(self.axes <= 0):
            raise ValueError("semi-axes must be positive")

    def _to_local(self, p):
        return (p - self.center) @ self.rotation  # rows . R == R^T p

    def _to_world(self, q):
        return q @ self.rotation.T + self.center

    def _normals(self, p):
        q = self._to_local(p)
        g = q / self.axes**2
        return _unit_rows(g @ self.rotation.T)

    def _closest(self, p, hint):
        q = self._to_local(p)
        a2 = self.axes**2
        # Solve sum a_i^2 q_i^2 / (a_i^2 + t)^2 = 1 for t (monotone, convex);
        # safeguarded Newton within a bisection bracket.
        qq = q * q
        lo = np.full(q.shape[:-1], -a2.min() * (1.0 - 1e-12))
        hi = np.linalg.norm(q * self.axes[None, :], axis=-1) + a2.max()
        # handle q exactly at the center via the hint
        deg = np.linalg.norm(q, axis=-1) < 1e-12 * self.axes.min()
        if np.any(deg):
            qh = self._to_local(hint)
            q = np.where(deg[..., None], qh, q)
            qq = q * q

        def f(t):
            return np.sum(a2 * qq / (a2 + t[..., None]) ** 2, axis=-1) - 1.0

        t = np.zeros(q.shape[:-1])
        ft = f(t)
        lo = np.where(ft > 0, np.maximum(lo, t), lo)
        hi = np.where(ft < 0, np.minimum(hi, t), hi)
        t = 0.5 * (lo + hi)
        for _ in range(24):
            ft = f(t)
            lo = np.where(ft > 0, t, lo)
            hi = np.where(ft <= 0, t, hi)
            df = -2.0 * np.sum(a2 * qq / (a2 + t[..., None]) ** 3, axis=-1)
            with np.errstate(divide="ignore", invalid="ignore"):
                tn = t - ft / df
            inside = (tn > lo) & (tn < hi) & np.isfinite(tn)
            t = np.where(inside, tn, 0.5 * (lo + hi))
        proj = a2 * q / (a2 + t[..., None])
        # renormalize exactly onto the surface
        scale = np.sqrt(np.sum(proj**2 / a2, axis=-1, keepdims=True))
        return self._to_world(proj / scale)

    def _intersect(self, o, d):
        q = self._to_local(o) / self.axes
        w = (d @ self.rotation) / self.axes
        a = np.sum(w * w, axis=-1)
        b = np.sum(q * w, axis=-1)
        c = np.sum(q * q, axis=-1) - 1.0
        disc = b * b - a * c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-b - sq) / a
            t2 = (-b + sq) / a
        t = np.where(ok & (t1 > _RAY_EPS), t1, np.where(ok & (t2 > _RAY_EPS), t2, np.inf))
        return t, np.isfinite(t)

    def distance(self, points):
        p, single = _batched(points)
        r = np.linalg.norm(p - self._closest(p, p), axis=-1)
        return r[0] if single else r

    def sample_points(self, nu, nv):
        th = np.linspace(0.0, np.pi, nv + 2)[1:-1]
        ph = np.linspace(0.0, 2 * np.pi, nu, endpoint=False)
        T, P = np.meshgrid(th, ph, indexing="ij")
        st = np.sin(T.ravel())
        q = np.stack([st * np.cos(P.ravel()), st * np.sin(P.ravel()), np.cos(T.ravel())], axis=-1)
        return self._to_world(q * self.axes)


# ---------------------------------------------------------------------------
# triangle mesh
# ---------------------------------------------------------------------------


class TriangleMesh(Surface):
    """Indexed triangle mesh with smooth per-vertex normals.

    Face data and chunked bounding boxes are precomputed once; queries
    are vectorized over faces.
    """

    def __init__(self, vertices, faces, vertex_normals):
        self.vertices = np.asarray(vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(faces, dtype=int).reshape(-1, 3)
        normals = np.asarray(vertex_normals, dtype=float).reshape(-1, 3)
        if normals.shape != self.vertices.shape:
            raise MeshFormatError("need one normal per vertex (smooth shading)")
        self.vertex_normals = _unit_rows(normals)
        self.v0 = self.vertices[self.faces[:, 0]]
        self.e1 = self.vertices[self.faces[:, 1]] - self.v0
        self.e2 = self.vertices[self.faces[:, 2]] - self.v0
        tri = np.stack([self.v0, self.v0 + self.e1, self.v0 + self.e2], axis=1)
        self._tri_lo = tri.min(axis=1)
        self._tri_hi = tri.max(axis=1)
        self._scale = float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    def _closest_faces(self, p):
        """Closest point on each face for each query point -> (N,F,3), (N,F)."""
        # Ericson's point-triangle projection, vectorized over (points, faces)
        a = self.v0[None]
        ab = self.e1[None]
        ac = self.e2[None]
        pt = p[:, None, :]
        ap = pt - a
        d1 = np.sum(ab * ap, axis=-1)
        d2 = np.sum(ac * ap, axis=-1)
        bp = pt - (a + ab)
        d3 = np.sum(ab * bp, axis=-1)
        d4 = np.sum(ac * bp, axis=-1)
        cp = pt - (a + ac)
        d5 = np.sum(ab * cp, axis=-1)
        d6 = np.sum(ac * cp, axis=-1)
        va = d3 * d6 - d5 * d4
        vb = d5 * d2 - d1 * d6
        vc = d1 * d4 - d3 * d2
        denom = va + vb + vc
        with np.errstate(divide="ignore", invalid="ignore"):
            v = vb / denom
            w = vc / denom
            v_ab = d1 / (d1 - d3)
            w_ac = d2 / (d2 - d6)
            w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        v = np.nan_to_num(v)
        w = np.nan_to_num(w)
        # region tests in priority order
        vert_a = (d1 <= 0) & (d2 <= 0)
        vert_b = (d3 >= 0) & (d4 <= d3)
        vert_c = (d6 >= 0) & (d5 <= d6)
        edge_ab = ~vert_a & ~vert_b & ~vert_c & (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        edge_ac = ~vert_a & ~vert_b & ~vert_c & ~edge_ab & (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        edge_bc = (
            ~vert_a & ~vert_b & ~vert_c & ~edge_ab & ~edge_ac & (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        )
        interior = ~(vert_a | vert_b | vert_c | edge_ab | edge_ac | edge_bc)
        vv = np.where(vert_a, 0.0, np.where(vert_b, 1.0, np.where(vert_c, 0.0, 0.0)))
        ww = np.where(vert_c, 1.0, 0.0)
        vv = np.where(edge_ab, np.clip(np.nan_to_num(v_ab), 0, 1), vv)
        vv = np.where(edge_bc, 1.0 - np.clip(np.nan_to_num(w_bc), 0, 1), vv)
        ww = np.where(edge_ac, np.clip(np.nan_to_num(w_ac), 0, 1), ww)
        ww = np.where(edge_bc, np.clip(np.nan_to_num(w_bc), 0, 1), ww)
        vv = np.where(interior, np.clip(v, 0, 1), vv)
        ww = np.where(interior, np.clip(w, 0, 1), ww)
        q = a + vv[..., None] * ab + ww[..., None] * ac
        dist2 = np.sum((pt - q) ** 2, axis=-1)
        return q, dist2, vv, ww

    def _closest_with_bary(self, p):
        q, dist2, vv, ww = self._closest_faces(p)
        idx = np.argmin(dist2, axis=1)
        rows = np.arange(p.shape[0])
        return q[rows, idx], idx, vv[rows, idx], ww[rows, idx]

    def _interp_normals(self, faces_idx, v, w):
        f = self.faces[faces_idx]
        n = (
            (1.0 - v - w)[..., None] * self.vertex_normals[f[:, 0]]
            + v[..., None] * self.vertex_normals[f[:, 1]]
            + w[..., None] * self.vertex_normals[f[:, 2]]
        )
        return _unit_rows(n)

    def _normals(self, p):
        _, idx, v, w = self._closest_with_bary(p)
        return self._interp_normals(idx, v, w)

    def _closest(self, p, hint):
        q, _, _, _ = self._closest_with_bary(p)
        return q

    def _intersect(self, o, d):
        t_out = np.full(o.shape[:-1], np.inf)
        chunk = max(1, int(2e6 // max(len(self.faces), 1)))
        for s in range(0, o.shape[0], chunk):
            oo = o[s : s + chunk, None, :]
            dd = d[s : s + chunk, None, :]
            # slab test against face AABBs prunes most of the work
            with np.errstate(divide="ignore", invalid="ignore"):
                t_lo = (self._tri_lo[None] - oo) / dd
                t_hi = (self._tri_hi[None] - oo) / dd
            t_near = np.nanmax(np.minimum(t_lo, t_hi), axis=-1)
            t_far = np.nanmin(np.maximum(t_lo, t_hi), axis=-1)
            box = (t_far >= t_near) & (t_far > 0)
            pvec = np.cross(dd, self.e2[None])
            det = np.sum(self.e1[None] * pvec, axis=-1)
            ok = box & (np.abs(det) > 1e-14)
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / det
                tvec = oo - self.v0[None]
                u = np.sum(tvec * pvec, axis=-1) * inv
                qvec = np.cross(tvec, self.e1[None])
                v = np.sum(dd * qvec, axis=-1) * inv
                t = np.sum(self.e2[None] * qvec, axis=-1) * inv
            ok &= (u >= -1e-12) & (v >= -1e-12) & (u + v <= 1 + 1e-12) & (t > _RAY_EPS)
            t = np.where(ok, t, np.inf)
            t_out[s : s + chunk] = t.min(axis=1)
        return t_out, np.isfinite(t_out)

    def distance(self, points):
        p, single = _batched(points)
        q, _, _, _ = self._closest_with_bary(p)
        r = np.linalg.norm(p - q, axis=-1)
        return r[0] if single else r

    def sample_points(self, nu, nv):
        centroids = (self.v0 + (self.e1 + self.e2) / 3.0)
        want = nu * nv
        if len(centroids) <= want:
            return centroids
        stride = max(1, len(centroids) // want)
        return centroids[::stride]


def save_mesh(mesh: TriangleMesh, path):
    """OFF-style text with a parallel per-vertex `normals` section."""
    with open(path, "w") as fh:
        fh.write("OFF\n")
        fh.write(f"{len(mesh.vertices)} {len(mesh.faces)} 0\n")
        for v in mesh.vertices:
            fh.write(f"{float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")
        fh.write("normals\n")
        for n in mesh.vertex_normals:
            fh.write(f"{float(n[0])!r} {float(n[1])!r} {float(n[2])!r}\n")


def load_mesh(path) -> TriangleMesh:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0] != "OFF":
        raise MeshFormatError(f"{path}: missing OFF header")
    try:
        nv, nf, _ = (int(x) for x in lines[1].split())
        verts = np.array([[float(x) for x in lines[2 + i].split()] for i in range(nv)])
        faces = []
        for i in range(nf):
            parts = lines[2 + nv + i].split()
            if int(parts[0]) != 3:
                raise MeshFormatError(f"{path}: only triangle faces are supported")
            faces.append([int(parts[1]), int(parts[2]), int(parts[3])])
        cursor = 2 + nv + nf
    except (ValueError, IndexError) as exc:
        raise MeshFormatError(f"{path}: malformed OFF section ({exc})") from exc
    if cursor >= len(lines) or lines[cursor] != "normals":
        warnings.warn(f"{path}: no smooth per-vertex normals; mesh rejected")
        raise MeshFormatError(f"{path}: per-vertex normals section required")
    try:
        normals = np.array([[float(x) for x in lines[cursor + 1 + i].split()] for i in range(nv)])
    except (ValueError, IndexError) as exc:
        raise MeshFormatError(f"{path}: malformed normals section ({exc})") from exc
    return TriangleMesh(verts, np.array(faces), normals)


# ---------------------------------------------------------------------------
# depth + normal grid
# ---------------------------------------------------------------------------


def _bilinear(grid, uv):
    """Sample grid[v, u, ...] bilinearly at continuous (u, v), clamped."""
    h, w = grid.shape[:2]
    u = np.clip(uv[..., 0], 0.0, w - 1.0)
    v = np.clip(uv[..., 1], 0.0, h - 1.0)
    u0 = np.clip(np.floor(u).astype(int), 0, w - 2) if w > 1 else np.zeros_like(u, dtype=int)
    v0 = np.clip(np.floor(v).astype(int), 0, h - 2) if h > 1 else np.zeros_like(v, dtype=int)
    fu = (u - u0)[..., None] if grid.ndim == 3 else (u - u0)
    fv = (v - v0)[..., None] if grid.ndim == 3 else (v - v0)
    g00 = grid[v0, u0]
    g01 = grid[v0, u0 + 1] if w > 1 else g00
    g10 = grid[v0 + 1, u0] if h > 1 else g00
    g11 = grid[v0 + 1, u0 + 1] if w > 1 and h > 1 else g00
    return (1 - fv) * ((1 - fu) * g00 + fu * g01) + fv * ((1 - fu) * g10 + fu * g11)


_GRID_NEIGHBOURS = (
    ((slice(1, None), slice(None)), (slice(None, -1), slice(None))),
    ((slice(None, -1), slice(None)), (slice(1, None), slice(None))),
    ((slice(None), slice(1, None)), (slice(None), slice(None, -1))),
    ((slice(None), slice(None, -1)), (slice(None), slice(1, None))),
)


def _neighbour_mean(d, valid):
    acc = np.zeros_like(d)
    cnt = np.zeros_like(d)
    for sl_to, sl_from in _GRID_NEIGHBOURS:
        acc[sl_to] += np.where(valid[sl_from], d[sl_from], 0.0)
        cnt[sl_to] += valid[sl_from]
    return acc, cnt


def fill_grid_holes(depth):
    """Fill invalid depth entries (<= 0 or NaN) by 4-neighbour averaging,
    iterated to convergence."""
    d = np.array(depth, dtype=float)
    hole = ~np.isfinite(d) | (d <= 0)
    if not np.any(hole):
        return d
    if np.all(hole):
        raise ValueError("depth grid contains no valid samples")
    d[hole] = 0.0
    valid = ~hole
    # propagate inward until every hole pixel has a value
    while not np.all(valid):
        acc, cnt = _neighbour_mean(d, valid)
        newly = hole & ~valid & (cnt > 0)
        if not np.any(newly):
            break
        d = np.where(newly, acc / np.maximum(cnt, 1.0), d)
        valid |= newly
    # Jacobi relaxation over the hole pixels
    everywhere = np.ones_like(valid)
    tol = 1e-10 * max(1.0, float(np.abs(d).max()))
    for _ in range(10000):
        acc, cnt = _neighbour_mean(d, everywhere)
        new = np.where(hole, acc / np.maximum(cnt, 1.0), d)
        change = float(np.abs(new - d).max())
        d = new
        if change < tol:
            break
    return d


class GridSurface(Surface):
    """Depth + normal grids registered to a camera (one sample per pixel)."""

    def __init__(self, depth, normals, camera: CameraView):
        depth = np.asarray(depth, dtype=float)
        if depth.shape != (camera.height, camera.width):
            raise ValueError("depth grid must match the registration camera size")
        self.depth = fill_grid_holes(depth)
        n = np.asarray(normals, dtype=float)
        if n.shape == (3, camera.height, camera.width):
            n = np.moveaxis(n, 0, -1)
        if n.shape != (camera.height, camera.width, 3):
            raise ValueError("normal grid must be (H,W,3) or (3,H,W)")
        self.normal_grid = _unit_rows(n)
        self.camera = camera
        self._cell = float(np.median(self.depth) / camera.fx)

    def _pixels_of(self, p):
        return self.camera.project_points(p)

    def _points_of(self, uv, depth):
        c = self.camera
        x = (uv[..., 0] - c.cx) / c.fx
        y = (uv[..., 1] - c.cy) / c.fy
        pc = np.stack([x * depth, y * depth, depth], axis=-1)
        return (pc - c.translation) @ c.rotation

    def _normals(self, p):
        uv = self._pixels_of(p)
        return _unit_rows(_bilinear(self.normal_grid, uv))

    def _closest(self, p, hint):
        uv = self._pixels_of(p)
        z = _bilinear(self.depth, uv)
        return self._points_of(uv, z)

    def _intersect(self, o, d):
        cam = self.camera
        same_origin = np.allclose(o[0], cam.center, atol=1e-9) and np.allclose(o, o[0])
        if same_origin:
            dc = d @ cam.rotation.T
            z = dc[..., 2]
            ok = z > _RAY_EPS
            uv = np.stack(
                [cam.fx * dc[..., 0] / np.where(ok, z, 1.0) + cam.cx,
                 cam.fy * dc[..., 1] / np.where(ok, z, 1.0) + cam.cy],
                axis=-1,
            )
            ok &= (uv[..., 0] >= 0) & (uv[..., 0] <= cam.width - 1)
            ok &= (uv[..., 1] >= 0) & (uv[..., 1] <= cam.height - 1)
            depth = _bilinear(self.depth, uv)
            t = np.where(ok, depth / np.where(ok, z, 1.0), np.inf)
            return t, ok
        return self._march_rays(o, d)

    def _march_rays(self, o, d, n_steps=256):
        cam = self.camera
        t_max = float(self.depth.max() + np.linalg.norm(o[0] - cam.center)) * 2.0
        ts = np.linspace(1e-3, t_max, n_steps)
        t_hit = np.full(o.shape[0], np.inf)
        hit = np.zeros(o.shape[0], dtype=bool)
        prev_f = None
        prev_t = None
        for t in ts:
            p = o + t * d
            pc = p @ cam.rotation.T + cam.translation
            z = pc[..., 2]
            vis = z > _RAY_EPS
            uv = np.stack(
                [cam.fx * pc[..., 0] / np.where(vis, z, 1.0) + cam.cx,
                 cam.fy * pc[..., 1] / np.where(vis, z, 1.0) + cam.cy],
                axis=-1,
            )
            inb = vis & (uv[..., 0] >= 0) & (uv[..., 0] <= cam.width - 1)
            inb &= (uv[..., 1] >= 0) & (uv[..., 1] <= cam.height - 1)
            f = np.where(inb, z - _bilinear(self.depth, uv), np.nan)
            if prev_f is not None:
                crossed = ~hit & np.isfinite(prev_f) & np.isfinite(f) & (prev_f < 0) & (f >= 0)
                if np.any(crossed):
                    frac = prev_f[crossed] / (prev_f[crossed] - f[crossed])
                    t_hit[crossed] = prev_t + frac * (t - prev_t)
                    hit[crossed] = True
            prev_f, prev_t = f, t
        return t_hit, hit

    def distance(self, points):
        p, single = _batched(points)
        r = np.linalg.norm(p - self._closest(p, p), axis=-1)
        return r[0] if single else r

    def normals(self, points):  # grid field is defined over the whole footprint
        p, single = _batched(points)
        n = self._normals(p)
        return n[0] if single else n

    def sample_points(self, nu, nv):
        cam = self.camera
        us = np.linspace(1.0, cam.width - 2.0, nu)
        vs = np.linspace(1.0, cam.height - 2.0, nv)
        U, V = np.meshgrid(us, vs, indexing="ij")
        uv = np.stack([U.ravel(), V.ravel()], axis=-1)
        return self._points_of(uv, _bilinear(self.depth, uv))


def save_grid_surface(surface: GridSurface, prefix):
    """Write depth (16-bit grayscale PNG + scale sidecar), normals (.npy, 3 planes)
    and the registration camera (camera JSON)."""
    from PIL import Image

    depth = surface.depth
    scale = float(depth.max()) / 65535.0 if depth.max() > 0 else 1.0
    q = np.round(depth / scale).astype(np.uint16)
    Image.fromarray(q).save(f"{prefix}_depth.png")
    with open(f"{prefix}_depth.json", "w") as fh:
        json.dump({"depth_scale": scale}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    np.save(f"{prefix}_normals.npy", np.moveaxis(surface.normal_grid, -1, 0).astype(np.float32))
    with open(f"{prefix}_camera.json", "w") as fh:
        json.dump(camera_to_record(surface.camera), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_grid_surface(prefix) -> GridSurface:
    from PIL import Image

    q = np.asarray(Image.open(f"{prefix}_depth.png"), dtype=float)
    with open(f"{prefix}_depth.json") as fh:
        scale = json.load(fh)["depth_scale"]
    normals = np.load(f"{prefix}_normals.npy").astype(float)
    with open(f"{prefix}_camera.json") as fh:
        camera = camera_from_record(json.load(fh))
    return GridSurface(q * scale, normals, camera)


# ---------------------------------------------------------------------------
# plane -> cylinder morph
# ---------------------------------------------------------------------------


def morph_surface(kappa, extent):
    """Bend the flat sheet `extent` = (width, height) around its center line.

    kappa = 0 gives the plane z = 0; kappa > 0 gives the cylinder of radius
    1/kappa tangent to z = 0 along the y axis, with sheet arc length (and
    hence area) preserved: the sheet subtends an angle kappa * width.
    """
    width, height = float(extent[0]), float(extent[1])
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    if kappa == 0.0:
        return Plane.xy(width, height)
    r = 1.0 / kappa
    return Cylinder(
        axis_point=np.array([0.0, 0.0, -r]),
        axis_dir=np.array([0.0, 1.0, 0.0]),
        radius=r,
        ref_dir=np.array([0.0, 0.0, 1.0]),
        half_angle=kappa * width / 2.0,
        half_length=height / 2.0,
    )


def pixel_footprint(view: CameraView, depth):
    """World length of one pixel at the given camera depth."""
    return float(depth) / view.fx
