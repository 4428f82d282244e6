"""Specularity detection: thresholding, contour tracing, brightest-point
estimation and back-projection onto the surface.

Detection is a fixed global threshold (the experiments control the
illumination); the contour is Moore-traced and then refined to subpixel
by interpolating the threshold crossing along each boundary pixel's
outward normal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import BackprojectionMiss, NoSpecularity
from .geom import CameraView, Ellipse, fit_ellipse
from .shading import Image
from .surfaces import Surface, SurfacePoint, _bilinear

MIN_BLOB_AREA = 20

# Moore neighbourhood in clockwise screen order (u right, v down), from East.
_MOORE = ((1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1))


@dataclass(frozen=True)
class Blob:
    """8-connected component of {I >= tau}."""

    mask: np.ndarray  # full-frame boolean
    bbox: tuple  # (u_min, v_min, u_max, v_max), inclusive
    area: int

    def touches_border(self):
        h, w = self.mask.shape
        u0, v0, u1, v1 = self.bbox
        return u0 == 0 or v0 == 0 or u1 == w - 1 or v1 == h - 1


@dataclass(frozen=True)
class SpecularObservation:
    """One view's detected specularity, lifted onto the surface."""

    view: CameraView
    contour_px: np.ndarray  # (N,2) ordered, closed (first/last adjacent)
    brightest_px: np.ndarray  # (2,) subpixel
    ellipse_img: Ellipse
    surface_point: SurfacePoint  # brightest point on S
    contour_surface: np.ndarray  # (N,3) contour back-projected onto S

    @property
    def view_id(self):
        return self.view.id


def segment(image: Image, tau, min_area=MIN_BLOB_AREA):
    """Blobs of {I >= tau}, area-descending; NoSpecularity when none qualify."""
    mask = image.pixels >= tau
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    blobs = []
    for k in range(1, n + 1):
        m = labels == k
        area = int(m.sum())
        if area < min_area:
            continue
        vs, us = np.nonzero(m)
        blobs.append(Blob(mask=m, bbox=(int(us.min()), int(vs.min()), int(us.max()), int(vs.max())), area=area))
    if not blobs:
        raise NoSpecularity(f"no component of at least {min_area} px above {tau}")
    return sorted(blobs, key=lambda b: b.area, reverse=True)


def select_blob(blobs, image: Image, prev_brightest=None):
    """Track one specularity: nearest brightest point to the previous frame's,
    falling back to the largest blob."""
    if prev_brightest is None or len(blobs) == 1:
        return blobs[0]
    prev = np.asarray(prev_brightest, dtype=float)
    return min(blobs, key=lambda b: np.linalg.norm(brightest_point(image, b) - prev))


def trace_boundary(mask):
    """Moore boundary tracing; returns integer pixel chain (N,2) as (u,v),
    oriented counter-clockwise in (u, v) coordinates."""
    vs, us = np.nonzero(mask)
    if len(us) == 0:
        raise ValueError("empty mask")
    k = np.lexsort((us, vs))[0]  # topmost, then leftmost
    start = (int(us[k]), int(vs[k]))
    h, w = mask.shape

    def on(p):
        return 0 <= p[0] < w and 0 <= p[1] < h and mask[p[1], p[0]]

    contour = [start]
    backtrack = (start[0] - 1, start[1])  # west neighbour, background by scan order
    cur = start
    first_state = None
    for _ in range(4 * mask.size):
        base = _MOORE.index((backtrack[0] - cur[0], backtrack[1] - cur[1]))
        nxt = None
        for step in range(1, 9):
            d = _MOORE[(base + step) % 8]
            cand = (cur[0] + d[0], cur[1] + d[1])
            if on(cand):
                nxt = cand
                break
            backtrack = cand
        if nxt is None:
            break  # isolated pixel
        state = (cur, nxt)
        if first_state is None:
            first_state = state
        elif state == first_state:
            contour.pop()  # the repeated start pixel
            break
        contour.append(nxt)
        cur = nxt
    pts = np.array(contour, dtype=float)
    # normalize orientation: positive shoelace area in (u, v)
    if len(pts) > 2:
        x, y = pts[:, 0], pts[:, 1]
        area2 = np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
        if area2 < 0:
            pts = pts[::-1].copy()
    return pts


def extract_contour(image: Image, blob: Blob, tau):
    """Subpixel closed contour: Moore chain refined along outward normals."""
    chain = trace_boundary(blob.mask)
    n_pts = len(chain)
    if n_pts < 3:
        return chain
    # outward normal from the local tangent, sign fixed to point off-blob
    tangent = np.roll(chain, -1, axis=0) - np.roll(chain, 1, axis=0)
    normal = np.stack([tangent[:, 1], -tangent[:, 0]], axis=-1)
    norms = np.linalg.norm(normal, axis=-1, keepdims=True)
    normal = np.divide(normal, norms, out=np.zeros_like(normal), where=norms > 0)
    probe = np.round(chain + normal).astype(int)
    h, w = blob.mask.shape
    pu = np.clip(probe[:, 0], 0, w - 1)
    pv = np.clip(probe[:, 1], 0, h - 1)
    inward = blob.mask[pv, pu]
    normal[inward] = -normal[inward]

    refined = chain.copy()
    img = image.pixels
    inside_val = _bilinear(img, chain)
    found = np.zeros(n_pts, dtype=bool)
    prev_val = inside_val
    prev_s = np.zeros(n_pts)
    for s in (1.0, 2.0, 3.0):
        sample = chain + s * normal
        val = _bilinear(img, sample)
        crossing = ~found & (prev_val >= tau) & (val < tau)
        if np.any(crossing):
            frac = (prev_val[crossing] - tau) / (prev_val[crossing] - val[crossing])
            s_star = prev_s[crossing] + frac * (s - prev_s[crossing])
            refined[crossing] = chain[crossing] + s_star[:, None] * normal[crossing]
            found[crossing] = True
        prev_val, prev_s = val, np.full(n_pts, s)
    return refined


def brightest_point(image: Image, blob: Blob):
    """Subpixel peak: centroid of the top 5% of the blob's intensity range,
    weighted by intensity in excess of the cut (invariant to affine rescaling)."""
    vs, us = np.nonzero(blob.mask)
    vals = image.pixels[vs, us]
    lo, hi = float(vals.min()), float(vals.max())
    cut = hi - 0.05 * (hi - lo)
    keep = vals >= cut
    w = vals[keep] - cut
    if w.sum() <= 0:  # flat top: plain centroid of the saturated set
        w = np.ones(keep.sum())
    u = float(np.sum(us[keep] * w) / np.sum(w))
    v = float(np.sum(vs[keep] * w) / np.sum(w))
    return np.array([u, v])


def lift_observation(view: CameraView, surface: Surface, image: Image, blob: Blob, tau,
                     reject_clipped=True) -> SpecularObservation:
    """Back-project the detection onto the surface and fit the image ellipse."""
    if reject_clipped and blob.touches_border():
        raise BackprojectionMiss(f"view {view.id}: blob touches the image border")
    contour_px = extract_contour(image, blob, tau)
    bright_px = brightest_point(image, blob)
    pixels = np.vstack([bright_px[None, :], contour_px])
    dirs = view.pixel_rays(pixels)
    t, hit = surface.intersect_rays(view.center, dirs)
    if not np.all(hit):
        raise BackprojectionMiss(f"view {view.id}: {int((~hit).sum())} contour rays miss the surface")
    pts = view.center + t[:, None] * dirs
    pb = surface.point_at(surface.closest_point(pts[0], hint=pts[0]))
    return SpecularObservation(
        view=view,
        contour_px=contour_px,
        brightest_px=bright_px,
        ellipse_img=fit_ellipse(contour_px),
        surface_point=pb,
        contour_surface=pts[1:],
    )


def detect_in_image(view, surface, image, tau, min_area=MIN_BLOB_AREA, prev_brightest=None,
                    reject_clipped=True) -> SpecularObservation:
    """segment + select + lift in one step (the per-frame pipeline entry)."""
    blobs = segment(image, tau, min_area=min_area)
    blob = select_blob(blobs, image, prev_brightest)
    return lift_observation(view, surface, image, blob, tau, reject_clipped=reject_clipped)


def observation_to_record(obs: SpecularObservation) -> dict:
    e = obs.ellipse_img
    return {
        "view_id": obs.view_id,
        "brightest_px": [float(x) for x in obs.brightest_px],
        "contour_px": [[float(a), float(b)] for a, b in obs.contour_px],
        "ellipse": {"cx": e.cx, "cy": e.cy, "a": e.a, "b": e.b, "theta": e.theta},
    }


def save_observations(observations, path):
    with open(path, "w") as fh:
        json.dump([observation_to_record(o) for o in observations], fh, indent=2, sort_keys=True)
        fh.write("\n")
