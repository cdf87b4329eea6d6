"""Pinhole cameras, viewpoint sampling, and relative-pose composition.

Camera space: x right, y up, forward along -z. ``rotation`` maps camera
coordinates to world coordinates (world <- camera); ``position`` is the
camera center in world space. All scenes are centered at the origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

_ORTHO_TOL = 1e-6


def _check_rotation(r: np.ndarray, what: str) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise ValueError(f"{what}: rotation must be 3x3, got {r.shape}")
    if not np.allclose(r.T @ r, np.eye(3), atol=_ORTHO_TOL):
        raise ValueError(f"{what}: rotation is not orthonormal")
    if np.linalg.det(r) < 0:
        raise ValueError(f"{what}: rotation must have det +1")
    return r


@dataclass
class CameraPose:
    rotation: np.ndarray   # (3,3) world <- camera
    position: np.ndarray   # (3,)
    fov_y: float           # degrees
    width: int
    height: int

    def __post_init__(self):
        self.rotation = _check_rotation(self.rotation, "CameraPose")
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        if not (10.0 < self.fov_y < 120.0):
            raise ValueError(f"fov_y must be in (10, 120) degrees, got {self.fov_y}")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")

    @property
    def forward(self) -> np.ndarray:
        return -self.rotation[:, 2]

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        return (pts - self.position) @ self.rotation


@dataclass
class RelativePose:
    """Rigid transform from one viewpoint to another, in the source camera frame."""

    rotation: np.ndarray  # (3,3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = _check_rotation(self.rotation, "RelativePose")
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "RelativePose":
        return cls(np.eye(3), np.zeros(3))


@dataclass
class CameraPolicy:
    """Viewpoint sampling distribution: look-at-origin poses on a sphere."""

    radius: float = 2.2
    fov_y: float = 50.0
    width: int = 64
    height: int = 64
    azimuth_range: tuple[float, float] = (0.0, 360.0)       # degrees
    elevation_range: tuple[float, float] = (-10.0, 45.0)    # degrees
    default_azimuth: float = 0.0
    default_elevation: float = 15.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ConfigError("camera radius must be positive")
        lo, hi = self.azimuth_range
        if not (0.0 <= lo <= hi <= 360.0):
            raise ConfigError(f"invalid azimuth range {self.azimuth_range}")
        lo, hi = self.elevation_range
        if not (-89.0 <= lo <= hi <= 89.0):
            raise ConfigError(f"invalid elevation range {self.elevation_range}")

    def pose(self, azimuth_deg: float, elevation_deg: float) -> CameraPose:
        return look_at_pose(azimuth_deg, elevation_deg, self.radius, self.fov_y,
                            self.width, self.height)

    def default_pose(self) -> CameraPose:
        return self.pose(self.default_azimuth, self.default_elevation)


def look_at_pose(azimuth_deg: float, elevation_deg: float, radius: float,
                 fov_y: float, width: int, height: int) -> CameraPose:
    """Camera on a sphere around the origin, looking at the origin, up = +y.

    Azimuth 0 / elevation 0 puts the camera at (0, 0, radius) facing -z.
    """
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    position = radius * np.array([math.cos(el) * math.sin(az),
                                  math.sin(el),
                                  math.cos(el) * math.cos(az)])
    forward = -position / np.linalg.norm(position)
    up_hint = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up_hint)
    nr = np.linalg.norm(right)
    if nr < 1e-9:  # looking straight up/down; pick a stable right axis
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nr
    up = np.cross(right, forward)
    rotation = np.stack([right, up, -forward], axis=1)
    return CameraPose(rotation, position, fov_y, width, height)


def sample_camera(rng: np.random.Generator, policy: CameraPolicy) -> CameraPose:
    """Draw a pose from the policy: azimuth and elevation uniform in range."""
    az = rng.uniform(*policy.azimuth_range)
    el = rng.uniform(*policy.elevation_range)
    return policy.pose(az, el)


def apply_relative(default: CameraPose, rel: RelativePose) -> CameraPose:
    """Compose ``rel`` (expressed in the default camera's frame) onto ``default``."""
    rotation = default.rotation @ rel.rotation
    position = default.position + default.rotation @ rel.translation
    return CameraPose(rotation, position, default.fov_y, default.width, default.height)


def solve_relative(default: CameraPose, target: CameraPose) -> RelativePose:
    """Inverse of :func:`apply_relative`: apply_relative(default, result) == target."""
    rotation = default.rotation.T @ target.rotation
    translation = default.rotation.T @ (target.position - default.position)
    return RelativePose(rotation, translation)


def poses_close(a: CameraPose, b: CameraPose, tol: float = 1e-6) -> bool:
    return (np.allclose(a.rotation, b.rotation, atol=tol)
            and np.allclose(a.position, b.position, atol=tol)
            and abs(a.fov_y - b.fov_y) <= tol
            and a.width == b.width and a.height == b.height)


def camera_rays(cam: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel world-space rays: origins (H*W, 3), unit directions (H*W, 3).

    Pixel centers sit at (ix + 0.5, iy + 0.5); row 0 is the top of the image.
    """
    w, h = cam.width, cam.height
    tan_y = math.tan(math.radians(cam.fov_y) / 2.0)
    tan_x = tan_y * w / h
    xs = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    ys = 1.0 - (np.arange(h) + 0.5) / h * 2.0
    gx, gy = np.meshgrid(xs * tan_x, ys * tan_y, indexing="xy")
    dirs_cam = np.stack([gx, gy, -np.ones_like(gx)], axis=-1).reshape(-1, 3)
    dirs = dirs_cam @ cam.rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(cam.position, dirs.shape).copy()
    return origins, dirs


def project_points(cam: CameraPose, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project world points to pixel coordinates.

    Returns (pix (N,2) with x right / y down, depth (N,) as distance along -z).
    Points at or behind the camera plane get depth <= 0 and unusable pixels.
    """
    q = cam.world_to_camera(points)
    depth = -q[:, 2]
    tan_y = math.tan(math.radians(cam.fov_y) / 2.0)
    tan_x = tan_y * cam.width / cam.height
    with np.errstate(divide="ignore", invalid="ignore"):
        ndc_x = q[:, 0] / depth / tan_x
        ndc_y = q[:, 1] / depth / tan_y
    px = (ndc_x + 1.0) / 2.0 * cam.width - 0.5
    py = (1.0 - ndc_y) / 2.0 * cam.height - 0.5
    return np.stack([px, py], axis=1), depth
