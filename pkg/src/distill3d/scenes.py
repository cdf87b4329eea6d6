"""Analytic ground-truth scenes: ray-traced renders with closed-form geometry.

These drive the view-conditioned oracle denoiser and the acceptance
fixtures. Supported primitives: an origin-centered sphere whose two
hemispheres (split by a world axis) carry different colors, and
axis-aligned colored boxes. Rendering is hard-edged, unshaded, against a
constant background.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraPose, camera_rays
from .images import Image


@dataclass
class SphereSpec:
    radius: float = 0.6
    split_axis: int = 2                      # hemisphere boundary plane normal
    color_pos: tuple = (0.85, 0.15, 0.15)    # side with coordinate > 0
    color_neg: tuple = (0.15, 0.25, 0.85)


@dataclass
class BoxSpec:
    lo: tuple
    hi: tuple
    color: tuple


@dataclass
class AnalyticScene:
    sphere: SphereSpec | None = None
    boxes: list = field(default_factory=list)
    background: tuple = (1.0, 1.0, 1.0)
    supersample: int = 1    # rays per pixel axis; > 1 box-filters the pixel footprint

    def render(self, cam: CameraPose) -> Image:
        """Closest-hit color per pixel, anti-aliased when supersample > 1."""
        cam_ss, ss = self._ss_camera(cam)
        hit_t, colors = self._trace(cam_ss)
        px = np.empty((cam_ss.height * cam_ss.width, 3))
        px[:] = np.asarray(self.background, dtype=np.float64)
        hit = np.isfinite(hit_t)
        px[hit] = colors[hit]
        return Image(self._downsample(px, cam, ss))

    def render_normals(self, cam: CameraPose) -> Image:
        """Camera-space normal map mapped by n*0.5+0.5; background (.5,.5,1)."""
        cam_ss, ss = self._ss_camera(cam)
        hit_t, _, normals = self._trace(cam_ss, want_normals=True)
        px = np.empty((cam_ss.height * cam_ss.width, 3))
        px[:] = np.array([0.5, 0.5, 1.0])
        hit = np.isfinite(hit_t)
        n_cam = normals[hit] @ cam_ss.rotation
        px[hit] = n_cam * 0.5 + 0.5
        return Image(self._downsample(px, cam, ss))

    def _ss_camera(self, cam: CameraPose):
        ss = max(1, int(self.supersample))
        if ss == 1:
            return cam, 1
        return CameraPose(cam.rotation, cam.position, cam.fov_y,
                          cam.width * ss, cam.height * ss), ss

    def _downsample(self, px: np.ndarray, cam: CameraPose, ss: int) -> np.ndarray:
        if ss == 1:
            img = px.reshape(cam.height, cam.width, 3)
        else:
            img = px.reshape(cam.height, ss, cam.width, ss, 3).mean(axis=(1, 3))
        return np.clip(img, 0.0, 1.0)

    def _trace(self, cam: CameraPose, want_normals: bool = False):
        origins, dirs = camera_rays(cam)
        n = origins.shape[0]
        best_t = np.full(n, np.inf)
        colors = np.zeros((n, 3))
        normals = np.zeros((n, 3)) if want_normals else None

        if self.sphere is not None:
            t = _ray_sphere(origins, dirs, self.sphere.radius)
            closer = t < best_t
            if np.any(closer):
                pt = origins[closer] + t[closer, None] * dirs[closer]
                side = pt[:, self.sphere.split_axis] > 0
                col = np.where(side[:, None],
                               np.asarray(self.sphere.color_pos),
                               np.asarray(self.sphere.color_neg))
                best_t[closer] = t[closer]
                colors[closer] = col
                if want_normals:
                    normals[closer] = pt / np.linalg.norm(pt, axis=1, keepdims=True)

        for box in self.boxes:
            t, nrm = _ray_box(origins, dirs, np.asarray(box.lo, dtype=np.float64),
                              np.asarray(box.hi, dtype=np.float64))
            closer = t < best_t
            if np.any(closer):
                best_t[closer] = t[closer]
                colors[closer] = np.asarray(box.color, dtype=np.float64)
                if want_normals:
                    normals[closer] = nrm[closer]

        if want_normals:
            return best_t, colors, normals
        return best_t, colors


def _ray_sphere(origins: np.ndarray, dirs: np.ndarray, radius: float) -> np.ndarray:
    b = np.einsum("nc,nc->n", origins, dirs)
    c = np.einsum("nc,nc->n", origins, origins) - radius * radius
    disc = b * b - c
    t = np.full(origins.shape[0], np.inf)
    ok = disc >= 0
    sq = np.sqrt(disc[ok])
    t0 = -b[ok] - sq
    t1 = -b[ok] + sq
    tt = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
    t[ok] = tt
    return t


def _ray_box(origins: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t0 = (lo - origins) * inv
    t1 = (hi - origins) * inv
    tmin_ax = np.minimum(t0, t1)
    tmax_ax = np.maximum(t0, t1)
    axis = np.argmax(tmin_ax, axis=1)
    tmin = tmin_ax.max(axis=1)
    tmax = tmax_ax.min(axis=1)
    hit = (tmax >= tmin) & (tmax > 1e-9)
    t = np.where(hit & (tmin > 1e-9), tmin, np.where(hit, tmax, np.inf))
    normals = np.zeros_like(origins)
    rows = np.arange(origins.shape[0])
    normals[rows, axis] = -np.sign(dirs[rows, axis])
    return t, normals


def sphere_sdf(points: np.ndarray, radius: float) -> np.ndarray:
    """Signed distance to an origin sphere: negative inside."""
    return np.linalg.norm(np.atleast_2d(points), axis=1) - radius


def ellipsoid_sdf(points: np.ndarray, semi_axes) -> np.ndarray:
    """Approximate signed distance to an origin ellipsoid (exact sign)."""
    ax = np.asarray(semi_axes, dtype=np.float64)
    q = np.linalg.norm(np.atleast_2d(points) / ax, axis=1)
    return (q - 1.0) * ax.min()
