import json

import numpy as np
import pytest

from jolimas.errors import DegenerateInput, NotAnEllipse, NotAnEllipsoid, ParseError
from jolimas.geom import (
    CameraView,
    Ellipse,
    EllipsoidShape,
    PlaneH,
    ProjectionMap,
    adjoint,
    conic_to_ellipse,
    decode_ellipsoid,
    ellipse_params_close,
    ellipse_to_conic,
    encode_ellipsoid,
    fit_ellipse,
    load_cameras,
    look_at_camera,
    mirror_camera,
    normalize_homogeneous,
    project_dual_quadric,
    reflect_across_plane,
    save_cameras,
)


def random_plane(rng):
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    return PlaneH(n=n, d=float(rng.normal()))


def random_camera(rng, id=""):
    # random rotation via QR, det fixed to +1
    Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return CameraView(
        fx=600.0 + 100 * rng.random(), fy=600.0 + 100 * rng.random(),
        cx=320.0, cy=240.0, width=640, height=480,
        rotation=Q.T, translation=rng.normal(size=3), id=id,
    )


class TestReflection:
    def test_axis_mirror(self):
        H = reflect_across_plane(PlaneH(n=(0.0, 0.0, 1.0), d=0.0))
        assert np.allclose(H, np.diag([1.0, 1.0, -1.0, 1.0]))

    def test_involution_many_planes(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            H = reflect_across_plane(random_plane(rng))
            assert np.abs(H @ H - np.eye(4)).max() < 1e-12

    def test_offset_plane(self):
        # plane z = 1 maps the origin to (0, 0, 2)
        H = reflect_across_plane(PlaneH(n=(0.0, 0.0, 1.0), d=-1.0))
        p = H @ np.array([0.0, 0.0, 0.0, 1.0])
        assert np.allclose(p[:3] / p[3], [0.0, 0.0, 2.0])


class TestMirrorCamera:
    def test_center_maps_under_reflection(self):
        rng = np.random.default_rng(3)
        view = random_camera(rng)
        plane = random_plane(rng)
        H = reflect_across_plane(plane)
        ps = mirror_camera(view, plane)
        c = np.append(view.center, 1.0)
        assert np.allclose(ps.center, (H @ c)[:3])

    def test_overhead_plane_center(self):
        view = look_at_camera((0.0, 0.0, 5.0), (0.0, 0.0, 0.0), 500, 500, 320, 240, 640, 480)
        ps = mirror_camera(view, PlaneH(n=(0.0, 0.0, 1.0), d=0.0))
        assert np.allclose(ps.center, [0.0, 0.0, -5.0], atol=1e-12)

    def test_projection_identity_on_reflected_points(self):
        rng = np.random.default_rng(11)
        view = random_camera(rng)
        plane = random_plane(rng)
        H = reflect_across_plane(plane)
        ps = mirror_camera(view, plane)
        P = view.projection().matrix
        X = rng.normal(size=(100, 4))
        X[:, 3] = 1.0
        lhs = (ps.matrix @ X.T).T
        rhs = (P @ (H @ X.T)).T
        assert np.allclose(lhs, rhs)


def silhouette_radius_oracle(cam_center, radius, n_rays=1_000_000, seed=0):
    """Brute-force image radius of a sphere silhouette: cast random rays in a
    cone toward the sphere at the origin and take the largest hit angle."""
    rng = np.random.default_rng(seed)
    d = np.linalg.norm(cam_center)
    cone = 1.5 * radius / d
    ax = -np.asarray(cam_center, dtype=float) / d
    # orthonormal frame around the viewing axis
    e1 = np.cross(ax, [1.0, 0.0, 0.0])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(ax, e1)
    ang = cone * np.sqrt(rng.random(n_rays))
    phi = 2 * np.pi * rng.random(n_rays)
    dirs = (
        np.outer(np.cos(ang), ax)
        + np.outer(np.sin(ang) * np.cos(phi), e1)
        + np.outer(np.sin(ang) * np.sin(phi), e2)
    )
    rel = -np.asarray(cam_center, dtype=float)
    proj = dirs @ rel
    miss2 = rel @ rel - proj**2
    hit = (miss2 <= radius**2) & (proj > 0)
    return np.tan(ang[hit].max())


class TestProjectDualQuadric:
    def test_unit_sphere_circle_radius(self):
        # oracle: ray-cast silhouette; analytic value r/sqrt(d^2-r^2) = 1/sqrt(24)
        oracle = silhouette_radius_oracle((0.0, 0.0, 5.0), 1.0)
        assert oracle == pytest.approx(1.0 / np.sqrt(24.0), abs=2e-3)
        view = look_at_camera((0.0, 0.0, 5.0), (0.0, 0.0, 0.0), 1.0, 1.0, 0.0, 0.0, 2, 2)
        q = np.diag([1.0, 1.0, 1.0, -1.0])
        cstar = project_dual_quadric(view.projection(), q)
        ell = conic_to_ellipse(adjoint(cstar))
        assert ell.a == pytest.approx(1.0 / np.sqrt(24.0), rel=1e-12)
        assert ell.b == pytest.approx(1.0 / np.sqrt(24.0), rel=1e-12)
        assert ell.a == pytest.approx(0.2041, abs=5e-5)

    def test_joint_translation_invariance(self):
        rng = np.random.default_rng(23)
        view = random_camera(rng)
        q = encode_ellipsoid(EllipsoidShape(rng.normal(size=3), [1.0, 0.7, 0.4], np.eye(3)))
        t = rng.normal(size=3)
        Ht = np.eye(4)
        Ht[:3, 3] = t
        q_shift = Ht @ q @ Ht.T
        view_shift = CameraView(
            fx=view.fx, fy=view.fy, cx=view.cx, cy=view.cy,
            width=view.width, height=view.height,
            rotation=view.rotation, translation=view.translation - view.rotation @ t,
        )
        c1 = normalize_homogeneous(project_dual_quadric(view.projection(), q))
        c2 = normalize_homogeneous(project_dual_quadric(view_shift.projection(), q_shift))
        assert np.abs(c1 - c2).max() < 1e-10

    def test_rigid_motion_equivariance(self):
        rng = np.random.default_rng(29)
        for _ in range(20):
            view = random_camera(rng)
            q = encode_ellipsoid(
                EllipsoidShape(rng.normal(size=3), np.sort(rng.random(3))[::-1] + 0.2, np.eye(3))
            )
            Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
            if np.linalg.det(Q) < 0:
                Q[:, 0] = -Q[:, 0]
            G = np.eye(4)
            G[:3, :3] = Q
            G[:3, 3] = rng.normal(size=3)
            moved_q = G @ q @ G.T
            moved_view = CameraView(
                fx=view.fx, fy=view.fy, cx=view.cx, cy=view.cy,
                width=view.width, height=view.height,
                rotation=view.rotation @ Q.T,
                translation=view.translation - view.rotation @ Q.T @ G[:3, 3],
            )
            c1 = normalize_homogeneous(project_dual_quadric(view.projection(), q))
            c2 = normalize_homogeneous(project_dual_quadric(moved_view.projection(), moved_q))
            assert np.linalg.norm(c1 - c2) < 1e-10

    def test_point_quadric_maps_to_point_conic(self):
        rng = np.random.default_rng(31)
        view = random_camera(rng)
        X = np.append(rng.normal(size=3), 1.0)
        q = np.outer(X, X)
        cstar = project_dual_quadric(view.projection(), q)
        x = view.projection().matrix @ X
        assert np.allclose(cstar, np.outer(x, x))
        assert np.linalg.matrix_rank(cstar) == 1


class TestAdjoint:
    def test_identity(self):
        assert np.allclose(adjoint(np.eye(3)), np.eye(3))

    def test_signature_flip(self):
        assert np.allclose(adjoint(np.diag([1.0, 1.0, -1.0])), np.diag([-1.0, -1.0, 1.0]))

    def test_double_application(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            M = rng.normal(size=(3, 3))
            M = M + M.T
            assert np.allclose(adjoint(adjoint(M)), np.linalg.det(M) * M, atol=1e-9)

    def test_4x4_inverse_relation(self):
        rng = np.random.default_rng(6)
        M = rng.normal(size=(4, 4))
        M = M + M.T + 5 * np.eye(4)
        assert np.allclose(adjoint(M), np.linalg.det(M) * np.linalg.inv(M))


class TestEllipseConic:
    def test_unit_circle(self):
        e = Ellipse(0.0, 0.0, 1.0, 1.0, 0.0)
        C = ellipse_to_conic(e)
        assert np.allclose(C, np.diag([1.0, 1.0, -1.0]))
        back = conic_to_ellipse(np.diag([1.0, 1.0, -1.0]))
        assert ellipse_params_close(e, back)

    def test_shifted_axis_aligned(self):
        # (x-3)^2/4 + (y-2)^2 = 1, expanded symbolically
        C = ellipse_to_conic(Ellipse(3.0, 2.0, 2.0, 1.0, 0.0))
        expected = np.array(
            [
                [0.25, 0.0, -0.75],
                [0.0, 1.0, -2.0],
                [-0.75, -2.0, 9.0 / 4.0 + 4.0 - 1.0],
            ]
        )
        assert np.allclose(C, expected)

    def test_round_trip_random(self):
        rng = np.random.default_rng(13)
        for _ in range(200):
            e = Ellipse(
                cx=rng.normal() * 10, cy=rng.normal() * 10,
                a=0.5 + 5 * rng.random(), b=0.1 + 0.3 * rng.random(),
                theta=rng.random() * np.pi,
            )
            back = conic_to_ellipse(ellipse_to_conic(e))
            assert ellipse_params_close(e, back, rtol=1e-9, angle_tol=1e-8)

    def test_scale_invariance(self):
        e = Ellipse(1.0, -2.0, 3.0, 1.5, 0.7)
        back = conic_to_ellipse(-17.3 * ellipse_to_conic(e))
        assert ellipse_params_close(e, back)

    def test_hyperbola_rejected(self):
        with pytest.raises(NotAnEllipse):
            conic_to_ellipse(np.diag([1.0, -1.0, -1.0]))

    def test_imaginary_ellipse_rejected(self):
        with pytest.raises(NotAnEllipse):
            conic_to_ellipse(np.diag([1.0, 1.0, 1.0]))


class TestFitEllipse:
    def test_exact_recovery(self):
        e = Ellipse(0.0, 0.0, 2.0, 1.0, 0.3)
        fit = fit_ellipse(e.sample(36))
        assert ellipse_params_close(e, fit, rtol=1e-9, atol=1e-9, angle_tol=1e-9)

    def test_exact_recovery_extreme_aspect(self):
        # a/b up to 50 must still be exact on clean samples
        for ab in (5.0, 20.0, 50.0):
            e = Ellipse(120.0, -40.0, ab * 2.0, 2.0, 1.1)
            fit = fit_ellipse(e.sample(24))
            assert ellipse_params_close(e, fit, rtol=1e-8, atol=1e-7, angle_tol=1e-7)

    def test_noise_center_error(self):
        # Monte-Carlo: sigma=0.2 px noise on a 40x20 ellipse, 1000 trials,
        # 95th percentile of center error stays below 0.3 px.
        rng = np.random.default_rng(42)
        e = Ellipse(320.0, 240.0, 40.0, 20.0, 0.5)
        base = e.sample(72)
        errs = []
        for _ in range(1000):
            fit = fit_ellipse(base + rng.normal(scale=0.2, size=base.shape))
            errs.append(np.hypot(fit.cx - e.cx, fit.cy - e.cy))
        assert np.percentile(errs, 95) < 0.3

    def test_collinear_rejected(self):
        pts = np.stack([np.arange(5.0), 2.0 * np.arange(5.0)], axis=1)
        with pytest.raises(DegenerateInput):
            fit_ellipse(pts)

    def test_too_few_points(self):
        with pytest.raises(DegenerateInput):
            fit_ellipse(np.zeros((4, 2)))


class TestEllipsoidCoding:
    def test_unit_sphere(self):
        shape = decode_ellipsoid(np.diag([1.0, 1.0, 1.0, -1.0]))
        assert np.allclose(shape.center, 0.0)
        assert np.allclose(shape.axes, 1.0)

    def test_translation_equivariance(self):
        H = np.eye(4)
        H[:3, 3] = [1.0, 2.0, 3.0]
        q = H @ np.diag([1.0, 1.0, 1.0, -1.0]) @ H.T
        shape = decode_ellipsoid(q)
        assert np.allclose(shape.center, [1.0, 2.0, 3.0])
        assert np.allclose(shape.axes, 1.0)

    def test_mixed_signature_rejected(self):
        with pytest.raises(NotAnEllipsoid):
            decode_ellipsoid(np.diag([1.0, 1.0, -1.0, -1.0]))

    def test_encode_decode_identity(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
            if np.linalg.det(Q) < 0:
                Q[:, 0] = -Q[:, 0]
            shape = EllipsoidShape(
                center=rng.normal(size=3) * 3,
                axes=np.sort(0.2 + rng.random(3))[::-1],
                rotation=Q,
            )
            back = decode_ellipsoid(encode_ellipsoid(shape))
            assert np.allclose(back.center, shape.center, atol=1e-9)
            assert np.allclose(back.axes, shape.axes, atol=1e-9)
            # rotations agree up to per-axis sign
            M = back.rotation.T @ shape.rotation
            assert np.allclose(np.abs(M), np.eye(3), atol=1e-7)

    def test_scale_invariance(self):
        q = encode_ellipsoid(EllipsoidShape([0.5, 0.0, -1.0], [2.0, 1.0, 0.5], np.eye(3)))
        s1 = decode_ellipsoid(q)
        s2 = decode_ellipsoid(-3.7 * q)
        assert np.allclose(s1.center, s2.center)
        assert np.allclose(s1.axes, s2.axes)


class TestCameraBasics:
    def test_project_backproject(self):
        rng = np.random.default_rng(19)
        view = random_camera(rng)
        pts = view.center + view.pixel_rays(np.array([[100.0, 200.0], [320.0, 240.0]])) * 3.0
        uv = view.project_points(pts)
        assert np.allclose(uv, [[100.0, 200.0], [320.0, 240.0]], atol=1e-9)

    def test_look_at_points_forward(self):
        view = look_at_camera((1.0, 2.0, 3.0), (0.0, 0.0, 0.0), 500, 500, 320, 240, 640, 480)
        # optical axis (camera z) points from eye toward target
        z = view.rotation[2]
        assert np.allclose(z, -np.array([1.0, 2.0, 3.0]) / np.linalg.norm([1.0, 2.0, 3.0]))
        uv = view.project_points(np.zeros(3))
        assert np.allclose(uv, [320.0, 240.0], atol=1e-9)
        assert np.linalg.det(view.rotation) == pytest.approx(1.0)

    def test_mirrored_rotation_rejected(self):
        R = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            CameraView(fx=1, fy=1, cx=0, cy=0, width=1, height=1, rotation=R, translation=np.zeros(3))

    def test_projection_map_rank_check(self):
        with pytest.raises(ValueError):
            ProjectionMap(np.zeros((3, 4)))

    def test_backproject_to_plane(self):
        view = look_at_camera((0.3, -0.2, 4.0), (0.0, 0.0, 0.0), 700, 700, 320, 240, 640, 480)
        plane = PlaneH(n=(0.0, 0.0, 1.0), d=0.0)
        pts = view.projection().backproject_to_plane(np.array([[320.0, 240.0], [100.0, 50.0]]), plane)
        assert np.allclose(pts[:, 2], 0.0, atol=1e-12)
        uv = view.project_points(pts)
        assert np.allclose(uv, [[320.0, 240.0], [100.0, 50.0]], atol=1e-8)


class TestCameraIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        views = [random_camera(rng, id=f"v{i}") for i in range(3)]
        path = tmp_path / "cams.json"
        save_cameras(views, path)
        loaded = load_cameras(path)
        for a, b in zip(views, loaded):
            assert a.id == b.id
            assert np.allclose(a.rotation, b.rotation)
            assert np.allclose(a.translation, b.translation)
            assert (a.fx, a.fy, a.cx, a.cy) == (b.fx, b.fy, b.cx, b.cy)

    def test_bad_record(self, tmp_path):
        path = tmp_path / "cams.json"
        path.write_text(json.dumps([{"id": "x", "fx": 1.0}]))
        with pytest.raises(ParseError):
            load_cameras(path)

    def test_bad_json(self, tmp_path):
        path = tmp_path / "cams.json"
        path.write_text("[{")
        with pytest.raises(ParseError):
            load_cameras(path)
