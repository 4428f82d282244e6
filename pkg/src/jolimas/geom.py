"""Homogeneous geometry kernel: cameras, planes, reflections, conics,
quadrics, ellipse algebra and direct least-squares ellipse fitting.

Conventions (fixed here, used everywhere else):
  - world->camera pose, pixel intrinsics, camera looks along +z,
    image u right / v down, pixel centers at integer coordinates;
  - conics/quadrics are symmetric homogeneous matrices defined up to
    scale; `normalize_homogeneous` fixes scale and sign for comparison
    and serialization;
  - mirrored cameras are kept as raw 3x4 ProjectionMap values because
    reflection flips handedness, which is legal for projection but not
    for a physical camera.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, NotAnEllipse, NotAnEllipsoid, ParseError

# Relative eigenvalue threshold for conic classification.
CONIC_CLASS_RTOL = 1e-8


def _as_unit(v, tol=1e-12):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if abs(n - 1.0) > tol:
        v = v / n
    return v


@dataclass(frozen=True)
class PlaneH:
    """Plane n.x + d = 0 with unit normal n."""

    n: np.ndarray
    d: float

    def __post_init__(self):
        n = np.asarray(self.n, dtype=float)
        if abs(np.linalg.norm(n) - 1.0) > 1e-12:
            raise ValueError("plane normal must be unit length")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "d", float(self.d))

    def signed_distance(self, p):
        p = np.asarray(p, dtype=float)
        return p @ self.n + self.d

    def basis(self):
        """Deterministic in-plane orthonormal basis (e1, e2) with e1 x e2 = n."""
        n = self.n
        k = int(np.argmin(np.abs(n)))
        axis = np.zeros(3)
        axis[k] = 1.0
        e1 = np.cross(axis, n)
        e1 = e1 / np.linalg.norm(e1)
        e2 = np.cross(n, e1)
        return e1, e2

    def project(self, p):
        """Orthogonal projection of p onto the plane."""
        p = np.asarray(p, dtype=float)
        s = p @ self.n + self.d
        return p - np.multiply.outer(s, self.n)

    def to_2d(self, points):
        """Plane coordinates of 3D points (assumed on or near the plane)."""
        e1, e2 = self.basis()
        origin = -self.d * self.n
        rel = np.asarray(points, dtype=float) - origin
        return np.stack([rel @ e1, rel @ e2], axis=-1)

    def to_3d(self, uv):
        e1, e2 = self.basis()
        origin = -self.d * self.n
        uv = np.asarray(uv, dtype=float)
        return origin + np.multiply.outer(uv[..., 0], e1) + np.multiply.outer(uv[..., 1], e2)

    @staticmethod
    def from_point_normal(point, normal):
        n = _as_unit(normal)
        return PlaneH(n=n, d=-float(np.dot(n, np.asarray(point, dtype=float))))


@dataclass(frozen=True)
class CameraView:
    """Physical pinhole camera: pixel intrinsics + world->camera pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray
    id: str = ""

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-8):
            raise ValueError("rotation must be orthonormal")
        if np.linalg.det(R) < 0:
            raise ValueError("rotation must have det +1; mirrored cameras are ProjectionMap")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    def projection(self):
        return ProjectionMap(self.K @ np.hstack([self.rotation, self.translation[:, None]]))

    def project_points(self, points):
        """World points (...,3) -> pixel coordinates (...,2). Depth must be > 0."""
        p = np.asarray(points, dtype=float)
        pc = p @ self.rotation.T + self.translation
        z = pc[..., 2]
        u = self.fx * pc[..., 0] / z + self.cx
        v = self.fy * pc[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1)

    def depths(self, points):
        p = np.asarray(points, dtype=float)
        return (p @ self.rotation.T + self.translation)[..., 2]

    def pixel_rays(self, pixels):
        """Unit world-space ray directions through pixel centers (...,2)->(...,3)."""
        uv = np.asarray(pixels, dtype=float)
        d = np.stack(
            [(uv[..., 0] - self.cx) / self.fx, (uv[..., 1] - self.cy) / self.fy, np.ones(uv.shape[:-1])],
            axis=-1,
        )
        d = d @ self.rotation  # R^T applied to rows
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def contains(self, pixels, margin=0.0):
        uv = np.asarray(pixels, dtype=float)
        return (
            (uv[..., 0] >= margin)
            & (uv[..., 0] <= self.width - 1 - margin)
            & (uv[..., 1] >= margin)
            & (uv[..., 1] <= self.height - 1 - margin)
        )


@dataclass(frozen=True)
class ProjectionMap:
    """Raw 3x4 homogeneous projection, defined up to scale (rank 3)."""

    matrix: np.ndarray

    def __post_init__(self):
        M = np.asarray(self.matrix, dtype=float).reshape(3, 4)
        if np.linalg.matrix_rank(M) != 3:
            raise ValueError("projection matrix must have rank 3")
        object.__setattr__(self, "matrix", M)

    @property
    def center(self):
        M = self.matrix
        return -np.linalg.solve(M[:, :3], M[:, 3])

    def project_points(self, points):
        p = np.asarray(points, dtype=float)
        ph = p @ self.matrix[:, :3].T + self.matrix[:, 3]
        return ph[..., :2] / ph[..., 2:3]

    def pixel_lines(self, pixels):
        """Direction of the 3D line through each pixel (not oriented)."""
        uv = np.asarray(pixels, dtype=float)
        uvh = np.concatenate([uv, np.ones(uv.shape[:-1] + (1,))], axis=-1)
        d = np.linalg.solve(self.matrix[:, :3], uvh[..., None])[..., 0]
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def backproject_to_plane(self, pixels, plane: PlaneH):
        """Intersect the pixel lines with a plane (line-plane, sign-free)."""
        c = self.center
        d = self.pixel_lines(pixels)
        denom = d @ plane.n
        t = -(c @ plane.n + plane.d) / denom
        return c + t[..., None] * d


@dataclass(frozen=True)
class Ellipse:
    """Image ellipse: center, semi-axes a >= b > 0, orientation in [0, pi)."""

    cx: float
    cy: float
    a: float
    b: float
    theta: float

    def __post_init__(self):
        a, b, theta = float(self.a), float(self.b), float(self.theta)
        if b > a:
            a, b = b, a
            theta += np.pi / 2
        if not (a >= b > 0):
            raise ValueError("semi-axes must satisfy a >= b > 0")
        theta = theta % np.pi
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))

    @property
    def center(self):
        return np.array([self.cx, self.cy])

    def sample(self, n):
        """n boundary points, uniform in parametric angle."""
        t = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
        c, s = np.cos(self.theta), np.sin(self.theta)
        x = self.a * np.cos(t)
        y = self.b * np.sin(t)
        return np.stack([self.cx + c * x - s * y, self.cy + s * x + c * y], axis=-1)


@dataclass(frozen=True)
class EllipsoidShape:
    """Decoded ellipsoid: center, semi-axes (descending), rotation columns = axes."""

    center: np.ndarray
    axes: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(3)
        a = np.asarray(self.axes, dtype=float).reshape(3)
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        if np.any(a <= 0):
            raise ValueError("semi-axes must be positive")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-8):
            raise ValueError("rotation must be orthonormal")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "axes", a)
        object.__setattr__(self, "rotation", R)


# ---------------------------------------------------------------------------
# reflections and projections
# ---------------------------------------------------------------------------


def reflect_across_plane(plane: PlaneH):
    """4x4 homogeneous reflection H = [I - 2nn^T, -2dn; 0, 1]; H @ H = I."""
    H = np.eye(4)
    H[:3, :3] -= 2.0 * np.outer(plane.n, plane.n)
    H[:3, 3] = -2.0 * plane.d * plane.n
    return H


def mirror_camera(view: CameraView, plane: PlaneH) -> ProjectionMap:
    """Virtual camera: the view's projection composed with the plane reflection."""
    return ProjectionMap(view.projection().matrix @ reflect_across_plane(plane))


def project_dual_quadric(P, q_star):
    """Dual conic C* = P Q* P^T (defined up to scale)."""
    M = P.matrix if isinstance(P, ProjectionMap) else np.asarray(P, dtype=float)
    q = np.asarray(q_star, dtype=float)
    C = M @ q @ M.T
    return 0.5 * (C + C.T)


def adjoint(M):
    """Classical adjugate (transposed cofactor matrix) of a square matrix.

    Works on degenerate inputs; adj(adj(M)) = det(M)^(n-2) M.
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    out = np.empty_like(M)
    rows = np.arange(n)
    for i in range(n):
        for j in range(n):
            minor = M[np.ix_(rows != i, rows != j)]
            out[j, i] = (-1.0) ** (i + j) * np.linalg.det(minor)
    return out


def normalize_homogeneous(M):
    """Unit Frobenius norm with the largest-magnitude entry positive."""
    M = np.asarray(M, dtype=float)
    nrm = np.linalg.norm(M)
    if nrm == 0:
        return M.copy()
    M = M / nrm
    flat = np.abs(M).ravel()
    if M.ravel()[int(np.argmax(flat))] < 0:
        M = -M
    return M


def is_degenerate_conic(C, rtol=CONIC_CLASS_RTOL):
    """True when the (dual) conic has rank < 3 at relative tolerance."""
    s = np.linalg.svd(np.asarray(C, dtype=float), compute_uv=False)
    return s[-1] < rtol * s[0]


# ---------------------------------------------------------------------------
# ellipse <-> conic
# ---------------------------------------------------------------------------


def ellipse_to_conic(e: Ellipse):
    """Symmetric 3x3 conic matrix of the ellipse (point conic, x^T C x = 0)."""
    c, s = np.cos(e.theta), np.sin(e.theta)
    R = np.array([[c, -s], [s, c]])
    A2 = R @ np.diag([1.0 / e.a**2, 1.0 / e.b**2]) @ R.T
    ctr = e.center
    C = np.zeros((3, 3))
    C[:2, :2] = A2
    C[:2, 2] = -A2 @ ctr
    C[2, :2] = C[:2, 2]
    C[2, 2] = ctr @ A2 @ ctr - 1.0
    return C


def conic_to_ellipse(C) -> Ellipse:
    """Decode a real-ellipse conic; raises NotAnEllipse otherwise."""
    C = np.asarray(C, dtype=float)
    C = 0.5 * (C + C.T)
    A2 = C[:2, :2]
    evals, evecs = np.linalg.eigh(A2)
    scale = np.max(np.abs(evals))
    if scale == 0 or np.min(np.abs(evals)) < CONIC_CLASS_RTOL * scale:
        raise NotAnEllipse("2x2 block is (near) singular")
    if evals[0] * evals[1] < 0:
        raise NotAnEllipse("mixed-sign eigenvalues: not an ellipse")
    # Orient so the quadratic part is positive definite.
    if evals[0] < 0:
        C = -C
        A2 = -A2
        evals = -evals[::-1]
        evecs = evecs[:, ::-1]
    center = -np.linalg.solve(A2, C[:2, 2])
    c_at_center = center @ A2 @ center + 2.0 * (C[:2, 2] @ center) + C[2, 2]
    if c_at_center >= -CONIC_CLASS_RTOL * scale:
        raise NotAnEllipse("conic is empty or degenerate (no real points)")
    axes = np.sqrt(-c_at_center / evals)  # ascending evals -> descending axes
    a, b = axes[0], axes[1]
    v_major = evecs[:, 0]
    theta = float(np.arctan2(v_major[1], v_major[0])) % np.pi
    return Ellipse(cx=center[0], cy=center[1], a=a, b=b, theta=theta)


def ellipse_params_close(e1: Ellipse, e2: Ellipse, rtol=1e-9, atol=1e-9, angle_tol=1e-9):
    """Parameter comparison modulo pi and modulo axis swap for near-circles."""
    scale = max(e1.a, e2.a, 1.0)
    if abs(e1.cx - e2.cx) > atol + rtol * scale or abs(e1.cy - e2.cy) > atol + rtol * scale:
        return False
    if abs(e1.a - e2.a) > atol + rtol * e2.a or abs(e1.b - e2.b) > atol + rtol * e2.b:
        return False
    if abs(e1.a - e1.b) < 1e-6 * e1.a:
        return True  # near-circle: orientation is not comparable
    dth = abs(e1.theta - e2.theta) % np.pi
    return min(dth, np.pi - dth) <= angle_tol


# ---------------------------------------------------------------------------
# ellipse fitting (direct least squares with ellipse constraint)
# ---------------------------------------------------------------------------


def fit_ellipse(points) -> Ellipse:
    """Fit an ellipse to >= 5 2D points, constrained-eigenproblem style.

    Exact on noise-free samples; raises DegenerateInput on collinear data.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 5:
        raise DegenerateInput("need at least 5 2D points")
    # Condition the problem: center and isotropically scale the data.
    mean = pts.mean(axis=0)
    q = pts - mean
    scale = np.sqrt((q**2).sum(axis=1).mean())
    if scale < 1e-12:
        raise DegenerateInput("all points coincide")
    q = q / scale

    x, y = q[:, 0], q[:, 1]
    D1 = np.stack([x * x, x * y, y * y], axis=1)
    D2 = np.stack([x, y, np.ones_like(x)], axis=1)
    S1 = D1.T @ D1
    S2 = D1.T @ D2
    S3 = D2.T @ D2
    if np.linalg.matrix_rank(np.hstack([D1, D2])) < 5:
        raise DegenerateInput("scatter matrix is rank-deficient (collinear points?)")
    try:
        T = -np.linalg.solve(S3, S2.T)
    except np.linalg.LinAlgError as exc:
        raise DegenerateInput("scatter matrix is singular") from exc
    M = S1 + S2 @ T
    # Inverse of the ellipse-constraint matrix [[0,0,2],[0,-1,0],[2,0,0]].
    M = np.array([M[2] / 2.0, -M[1], M[0] / 2.0])
    evals, evecs = np.linalg.eig(M)
    real = np.abs(evals.imag) <= 1e-9 * (1.0 + np.abs(evals.real))
    ev = evecs.real
    cond = 4.0 * ev[0] * ev[2] - ev[1] ** 2
    good = np.where(real & (cond > 0))[0]
    if good.size == 0:
        raise DegenerateInput("no ellipse-class solution (degenerate data)")
    a1 = ev[:, good[0]]
    coeffs = np.concatenate([a1, T @ a1])  # A,B,C,D,E,F in scaled frame

    A, B, Cc, D, E, F = coeffs
    Cn = np.array([[A, B / 2.0, D / 2.0], [B / 2.0, Cc, E / 2.0], [D / 2.0, E / 2.0, F]])
    # Undo the conditioning transform: x = (X - mean)/scale.
    Tn = np.array([[1.0 / scale, 0.0, -mean[0] / scale], [0.0, 1.0 / scale, -mean[1] / scale], [0.0, 0.0, 1.0]])
    C = Tn.T @ Cn @ Tn
    try:
        return conic_to_ellipse(C)
    except NotAnEllipse as exc:
        raise DegenerateInput(f"fit did not produce a real ellipse: {exc}") from exc


# ---------------------------------------------------------------------------
# dual quadrics <-> ellipsoids
# ---------------------------------------------------------------------------


def encode_ellipsoid(shape: EllipsoidShape):
    """Dual quadric Q* = [R D^2 R^T - c c^T, -c; -c^T, -1] of the ellipsoid."""
    A = shape.rotation @ np.diag(shape.axes)
    Q = np.empty((4, 4))
    Q[:3, :3] = A @ A.T - np.outer(shape.center, shape.center)
    Q[:3, 3] = -shape.center
    Q[3, :3] = -shape.center
    Q[3, 3] = -1.0
    return Q


def decode_ellipsoid(q_star) -> EllipsoidShape:
    """Center/axes/orientation from a dual quadric; NotAnEllipsoid on failure."""
    Q = np.asarray(q_star, dtype=float)
    Q = 0.5 * (Q + Q.T)
    if abs(Q[3, 3]) < 1e-15 * np.abs(Q).max():
        raise NotAnEllipsoid("Q*[3,3] vanishes after normalization")
    Qn = Q / Q[3, 3]
    center = Qn[:3, 3]
    B = np.outer(center, center) - Qn[:3, :3]
    evals, evecs = np.linalg.eigh(B)
    scale = np.max(np.abs(evals))
    if scale <= 0 or np.any(evals < CONIC_CLASS_RTOL * scale):
        raise NotAnEllipsoid("centered block has non-positive eigenvalues")
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    R = evecs[:, order]
    if np.linalg.det(R) < 0:
        R = R * np.array([1.0, 1.0, -1.0])
    return EllipsoidShape(center=center, axes=np.sqrt(evals), rotation=R)


# ---------------------------------------------------------------------------
# camera file I/O
# ---------------------------------------------------------------------------


def camera_to_record(view: CameraView) -> dict:
    return {
        "id": view.id,
        "fx": view.fx,
        "fy": view.fy,
        "cx": view.cx,
        "cy": view.cy,
        "width": view.width,
        "height": view.height,
        "R": [float(v) for v in view.rotation.ravel()],
        "t": [float(v) for v in view.translation],
    }


def camera_from_record(rec: dict) -> CameraView:
    try:
        return CameraView(
            fx=float(rec["fx"]),
            fy=float(rec["fy"]),
            cx=float(rec["cx"]),
            cy=float(rec["cy"]),
            width=int(rec["width"]),
            height=int(rec["height"]),
            rotation=np.array(rec["R"], dtype=float).reshape(3, 3),
            translation=np.array(rec["t"], dtype=float),
            id=str(rec.get("id", "")),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(f"bad camera record (field {exc})") from exc


def save_cameras(views, path):
    with open(path, "w") as fh:
        json.dump([camera_to_record(v) for v in views], fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_cameras(path):
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return [camera_from_record(rec) for rec in data]


def look_at_camera(eye, target, fx, fy, cx, cy, width, height, up=(0.0, 0.0, 1.0), id=""):
    """Camera at `eye` whose optical axis points at `target` (v-down frame)."""
    eye = np.asarray(eye, dtype=float)
    f = np.asarray(target, dtype=float) - eye
    f = f / np.linalg.norm(f)
    up = np.asarray(up, dtype=float)
    y = -(up - f * (up @ f))
    ny = np.linalg.norm(y)
    if ny < 1e-9:
        # looking along up: fall back to a fixed lateral reference
        y = np.cross(f, np.array([1.0, 0.0, 0.0]))
        ny = np.linalg.norm(y)
    y = y / ny
    x = np.cross(y, f)
    R = np.stack([x, y, f])
    return CameraView(
        fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
        rotation=R, translation=-R @ eye, id=id,
    )
