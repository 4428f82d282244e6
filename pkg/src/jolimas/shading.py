"""Torrance-Sparrow forward renderer and synthetic sequence generators.

The specular lobe is gain * exp(-(alpha/m)^2) with alpha the angle
between the surface normal and the half-way vector; Fresnel and
geometric attenuation are folded into the gain. A small Lambertian +
ambient term keeps segmentation thresholds honest; set diffuse = 0 for
pure specular rendering.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image as PILImage

from .errors import DegenerateHalfway
from .geom import CameraView, camera_from_record, camera_to_record, look_at_camera
from .surfaces import EllipsoidSurface, Surface, morph_surface

# Fixed quantization scale for 16-bit grayscale image files.
INTENSITY_SCALE = 2.0


@dataclass(frozen=True)
class Material:
    specular: float = 1.0  # lobe gain (K' of the simplified model)
    roughness: float = 0.08  # lobe width m, radians
    diffuse: float = 0.3  # Lambertian albedo
    ambient: float = 0.05

    def __post_init__(self):
        if self.specular <= 0 or self.roughness <= 0:
            raise ValueError("specular gain and roughness must be positive")
        if not 0.0 <= self.diffuse <= 1.0:
            raise ValueError("diffuse albedo must be within [0, 1]")


@dataclass(frozen=True)
class Scene:
    surface: Surface
    light: np.ndarray  # point light position
    material: Material
    views: tuple
    background: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "light", np.asarray(self.light, dtype=float).reshape(3))
        object.__setattr__(self, "views", tuple(self.views))
        if self.surface.distance(self.light) < 1e-9:
            raise ValueError("light must not lie on the surface")


@dataclass(frozen=True)
class Image:
    pixels: np.ndarray  # (height, width), nonnegative intensities

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float)
        if px.ndim != 2 or np.any(px < 0):
            raise ValueError("intensities must be a nonnegative 2D grid")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]


# ---------------------------------------------------------------------------
# lights and the shading chain
# ---------------------------------------------------------------------------


class PointLight:
    """Point light: direction toward the light varies with the surface point."""

    def __init__(self, position):
        self.position = np.asarray(position, dtype=float).reshape(3)

    def l_hat(self, points):
        d = self.position - np.asarray(points, dtype=float)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


class DirectionalLight:
    """Light at infinity: constant direction toward the light."""

    def __init__(self, direction):
        d = np.asarray(direction, dtype=float).reshape(3)
        self.direction = d / np.linalg.norm(d)

    def l_hat(self, points):
        p = np.asarray(points, dtype=float)
        return np.broadcast_to(self.direction, p.shape).copy()


def halfway_vector(light_pos, cam_center, point):
    """Unit bisector of the light and view directions at a surface point."""
    p = np.asarray(point, dtype=float)
    l_hat = np.asarray(light_pos, dtype=float) - p
    nl = np.linalg.norm(l_hat)
    v_hat = np.asarray(cam_center, dtype=float) - p
    nv = np.linalg.norm(v_hat)
    if nl < 1e-15 or nv < 1e-15:
        raise DegenerateHalfway("surface point coincides with light or camera")
    h = l_hat / nl + v_hat / nv
    nh = np.linalg.norm(h)
    if nh < 1e-9:
        raise DegenerateHalfway("light and view directions are opposite")
    return h / nh


def halfway_batch(l_hat, v_hat):
    """Batched half-way vectors; opposite directions yield a zero vector."""
    h = l_hat + v_hat
    n = np.linalg.norm(h, axis=-1, keepdims=True)
    return np.divide(h, n, out=np.zeros_like(h), where=n > 1e-12)


def incident_angle(normal, halfway):
    """Angle between normal and half-way vector, clamped to [0, pi]."""
    n = np.asarray(normal, dtype=float)
    h = np.asarray(halfway, dtype=float)
    return np.arccos(np.clip(np.sum(n * h, axis=-1), -1.0, 1.0))


def shade(material: Material, alpha, n_dot_l):
    """Intensity = ambient + diffuse * max(0, N.L) + gain * exp(-(alpha/m)^2)."""
    alpha = np.asarray(alpha, dtype=float)
    lobe = material.specular * np.exp(-((alpha / material.roughness) ** 2))
    return material.ambient + material.diffuse * np.maximum(0.0, n_dot_l) + lobe


def limit_angle_for_threshold(material: Material, tau, n_dot_l=None):
    """Incident angle at which the shaded intensity drops to tau.

    With n_dot_l given, the ambient + diffuse floor is subtracted first.
    """
    floor = material.ambient
    if n_dot_l is not None:
        floor = floor + material.diffuse * max(0.0, float(n_dot_l))
    ratio = (tau - floor) / material.specular
    if not 0.0 < ratio < 1.0:
        raise ValueError("threshold outside the specular lobe range")
    return material.roughness * np.sqrt(-np.log(ratio))


def mirror_reflection_point(plane_z0_light, cam_center):
    """Analytic brightest point on the plane z=0 for a point light/camera pair."""
    light = np.asarray(plane_z0_light, dtype=float)
    cam = np.asarray(cam_center, dtype=float)
    mirrored = light * np.array([1.0, 1.0, -1.0])
    t = cam[2] / (cam[2] - mirrored[2])
    return cam + t * (mirrored - cam)


def render(scene: Scene, view: CameraView) -> Image:
    """Ray-cast one view of the scene; deterministic given the scene."""
    w, h = view.width, view.height
    us, vs = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float), indexing="xy")
    uv = np.stack([us.ravel(), vs.ravel()], axis=-1)
    dirs = view.pixel_rays(uv)
    origin = view.center
    t, hit = scene.surface.intersect_rays(origin, dirs)
    out = np.full(w * h, float(scene.background))
    if np.any(hit):
        pts = origin + t[hit, None] * dirs[hit]
        n = scene.surface._normals(pts)
        light = PointLight(scene.light)
        l_hat = light.l_hat(pts)
        v_hat = origin - pts
        v_hat = v_hat / np.linalg.norm(v_hat, axis=-1, keepdims=True)
        alpha = incident_angle(n, halfway_batch(l_hat, v_hat))
        out[hit] = shade(scene.material, alpha, np.sum(n * l_hat, axis=-1))
    return Image(pixels=out.reshape(h, w))


def save_image(img: Image, path):
    """16-bit grayscale PNG at the fixed intensity scale (clips above)."""
    q = np.clip(img.pixels / INTENSITY_SCALE, 0.0, 1.0)
    PILImage.fromarray(np.round(q * 65535.0).astype(np.uint16)).save(path)


def load_image(path) -> Image:
    q = np.asarray(PILImage.open(path), dtype=float)
    return Image(pixels=q / 65535.0 * INTENSITY_SCALE)


# ---------------------------------------------------------------------------
# synthetic sequences
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraRig:
    """Shared intrinsics + placement parameters for generated views."""

    width: int = 640
    height: int = 480
    fx: float = 700.0
    fy: float = 700.0
    distance: float = 2.4
    elevation_deg: float = 55.0
    target: tuple = (0.45, 0.0, 0.0)

    @property
    def cx(self):
        return (self.width - 1) / 2.0

    @property
    def cy(self):
        return (self.height - 1) / 2.0

    def place(self, azimuth_deg, id="", distance=None, elevation_deg=None):
        dist = self.distance if distance is None else distance
        elev = np.radians(self.elevation_deg if elevation_deg is None else elevation_deg)
        az = np.radians(azimuth_deg)
        eye = dist * np.array([np.cos(elev) * np.cos(az), np.cos(elev) * np.sin(az), np.sin(elev)])
        return look_at_camera(
            eye, self.target, self.fx, self.fy, self.cx, self.cy, self.width, self.height, id=id
        )


@dataclass(frozen=True)
class MorphTemplate:
    """Plane-to-cylinder morph sequence parameters (desk-scale defaults)."""

    extent: tuple = (4.0, 3.0)
    light: tuple = (0.25, 0.0, 1.3)
    material: Material = field(default_factory=Material)
    background: float = 0.0
    rig: CameraRig = field(default_factory=CameraRig)
    azimuth_span_deg: float = 60.0
    jitter_deg: float = 0.8
    seed: int = 0

    def to_dict(self):
        return {
            "kind": "morph",
            "extent": list(self.extent),
            "light": list(self.light),
            "material": vars(self.material).copy(),
            "background": self.background,
            "rig": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(self.rig).items()},
            "azimuth_span_deg": self.azimuth_span_deg,
            "jitter_deg": self.jitter_deg,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d):
        rig_d = dict(d.get("rig", {}))
        if "target" in rig_d:
            rig_d["target"] = tuple(rig_d["target"])
        return MorphTemplate(
            extent=tuple(d.get("extent", (4.0, 3.0))),
            light=tuple(d.get("light", (0.25, 0.0, 1.3))),
            material=Material(**d.get("material", {})),
            background=d.get("background", 0.0),
            rig=CameraRig(**rig_d),
            azimuth_span_deg=d.get("azimuth_span_deg", 60.0),
            jitter_deg=d.get("jitter_deg", 0.8),
            seed=d.get("seed", 0),
        )


@dataclass(frozen=True)
class OrbitTemplate:
    """Ellipsoid-object orbit sequence parameters."""

    axes: tuple = (0.9, 0.55, 0.45)
    light: tuple = (0.3, 0.15, 1.8)
    material: Material = field(default_factory=Material)
    background: float = 0.0
    rig: CameraRig = field(
        default_factory=lambda: CameraRig(distance=2.6, elevation_deg=48.0, target=(0.0, 0.0, 0.0))
    )
    azimuth_start_deg: float = -8.0
    azimuth_span_deg: float = 70.0
    cluster_span_deg: float = 3.0
    reconstruction_frames: int = 6
    seed: int = 0

    def to_dict(self):
        return {
            "kind": "orbit",
            "axes": list(self.axes),
            "light": list(self.light),
            "material": vars(self.material).copy(),
            "background": self.background,
            "rig": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(self.rig).items()},
            "azimuth_start_deg": self.azimuth_start_deg,
            "azimuth_span_deg": self.azimuth_span_deg,
            "cluster_span_deg": self.cluster_span_deg,
            "reconstruction_frames": self.reconstruction_frames,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d):
        rig_d = dict(d.get("rig", {}))
        if "target" in rig_d:
            rig_d["target"] = tuple(rig_d["target"])
        kwargs = {k: d[k] for k in (
            "azimuth_start_deg", "azimuth_span_deg", "cluster_span_deg", "reconstruction_frames", "seed",
        ) if k in d}
        return OrbitTemplate(
            axes=tuple(d.get("axes", (0.9, 0.55, 0.45))),
            light=tuple(d.get("light", (0.3, 0.15, 1.8))),
            material=Material(**d.get("material", {})),
            background=d.get("background", 0.0),
            rig=CameraRig(**rig_d) if rig_d else OrbitTemplate.__dataclass_fields__["rig"].default_factory(),
            **kwargs,
        )


def gen_plane_cylinder_sequence(steps=50, views_per_step=6, kappa_max=1.0, template=None):
    """Morph sequence: curvature linearly spaced from 0 to kappa_max, each
    step observed from `views_per_step` poses on an arc facing the sheet."""
    if steps < 2 or views_per_step < 3:
        raise ValueError("need at least 2 steps and 3 views per step")
    tpl = template or MorphTemplate()
    rng = np.random.default_rng(tpl.seed)
    kappas = np.linspace(0.0, kappa_max, steps)
    base_az = np.linspace(-tpl.azimuth_span_deg / 2.0, tpl.azimuth_span_deg / 2.0, views_per_step)
    scenes = []
    for i, kappa in enumerate(kappas):
        surface = morph_surface(kappa, tpl.extent)
        views = []
        for j, az in enumerate(base_az):
            jit = rng.normal(scale=tpl.jitter_deg, size=2)
            views.append(
                tpl.rig.place(
                    az + jit[0],
                    elevation_deg=tpl.rig.elevation_deg + jit[1],
                    id=f"s{i:03d}v{j}",
                )
            )
        scenes.append(
            Scene(
                surface=surface,
                light=tpl.light,
                material=tpl.material,
                views=tuple(views),
                background=tpl.background,
                meta={"kappa": float(kappa), "step": i},
            )
        )
    return scenes


def gen_ellipsoid_sequence(frames=80, template=None):
    """Orbit around an unequal-axes ellipsoid; the first frames cluster near
    the starting pose and form the reconstruction set."""
    if frames < 7:
        raise ValueError("need at least 7 frames")
    tpl = template or OrbitTemplate()
    rng = np.random.default_rng(tpl.seed)
    surface = EllipsoidSurface(center=np.zeros(3), axes=np.asarray(tpl.axes, dtype=float))
    n_rec = tpl.reconstruction_frames
    az_cluster = tpl.azimuth_start_deg + np.linspace(0.0, tpl.cluster_span_deg, n_rec)
    az_sweep = tpl.azimuth_start_deg + tpl.cluster_span_deg + np.linspace(
        0.0, tpl.azimuth_span_deg, frames - n_rec
    )
    azimuths = np.concatenate([az_cluster, az_sweep])
    scenes = []
    for i, az in enumerate(azimuths):
        jit = rng.normal(scale=0.2, size=2)
        view = tpl.rig.place(az + jit[0], elevation_deg=tpl.rig.elevation_deg + jit[1], id=f"f{i:03d}")
        scenes.append(
            Scene(
                surface=surface,
                light=tpl.light,
                material=tpl.material,
                views=(view,),
                background=tpl.background,
                meta={"frame": i, "azimuth_deg": float(az), "reconstruction": i < n_rec},
            )
        )
    return scenes


def template_from_dict(d):
    kind = d.get("kind")
    if kind == "morph":
        return MorphTemplate.from_dict(d)
    if kind == "orbit":
        return OrbitTemplate.from_dict(d)
    raise ValueError(f"unknown sequence kind {kind!r}")


def save_scene_config(scene: Scene, path):
    """Scene snapshot: light, material, views, background (JSON)."""
    doc = {
        "light": [float(x) for x in scene.light],
        "material": vars(scene.material).copy(),
        "background": scene.background,
        "views": [camera_to_record(v) for v in scene.views],
        "meta": scene.meta,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def views_from_scene_config(path):
    with open(path) as fh:
        doc = json.load(fh)
    return [camera_from_record(r) for r in doc["views"]]
