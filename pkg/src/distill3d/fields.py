"""Dense voxel fields over the [-1,1]^3 cube with trilinear sampling.

A ``Grid3`` stores one scalar (density) or RGB value per lattice node.
Density grids hold raw pre-activation values; the renderer applies
softplus, so stored parameters stay unconstrained. Queries outside the
bounding box return zero (empty space).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import Distill3DError

BBOX_MIN = -1.0
BBOX_MAX = 1.0

_GRID3_MAGIC = "GRID3"


@dataclass
class Grid3:
    """Axis-aligned voxel lattice: ``resolution`` nodes per axis, 1 or 3 channels.

    ``values`` has shape (R, R, R, C) indexed [ix, iy, iz, c] with node ix at
    x = -1 + 2*ix/(R-1). Stored as float32; math promotes to float64.
    """

    resolution: int
    channels: int
    values: np.ndarray

    def __post_init__(self):
        if self.resolution < 2:
            raise ValueError(f"grid resolution must be >= 2, got {self.resolution}")
        if self.channels not in (1, 3):
            raise ValueError(f"grid channels must be 1 or 3, got {self.channels}")
        expected = (self.resolution,) * 3 + (self.channels,)
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.shape != expected:
            raise ValueError(f"grid values shape {self.values.shape} != {expected}")

    @classmethod
    def zeros(cls, resolution: int, channels: int) -> "Grid3":
        return cls(resolution, channels, np.zeros((resolution,) * 3 + (channels,), np.float32))

    @classmethod
    def full(cls, resolution: int, channels: int, fill: float) -> "Grid3":
        return cls(resolution, channels, np.full((resolution,) * 3 + (channels,), fill, np.float32))

    @classmethod
    def from_function(cls, resolution: int, fn, channels: int = 1) -> "Grid3":
        """Evaluate ``fn(points) -> (N, C)`` (or (N,) for scalars) on all nodes."""
        pts = node_points(resolution)
        vals = np.asarray(fn(pts), dtype=np.float64)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.shape != (resolution**3, channels):
            raise ValueError(f"field function returned shape {vals.shape}")
        return cls(resolution, channels, vals.reshape((resolution,) * 3 + (channels,)))

    def copy(self) -> "Grid3":
        return Grid3(self.resolution, self.channels, self.values.copy())

    @property
    def spacing(self) -> float:
        return (BBOX_MAX - BBOX_MIN) / (self.resolution - 1)


@dataclass
class FieldSample:
    """Interpolated field value at a query point."""

    value: np.ndarray
    point: np.ndarray


def node_axis(resolution: int) -> np.ndarray:
    return np.linspace(BBOX_MIN, BBOX_MAX, resolution)

def node_points(resolution: int) -> np.ndarray:
    """All lattice nodes as an (R^3, 3) array, ordered [ix, iy, iz] row-major."""
    ax = node_axis(resolution)
    gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)


@dataclass
class TrilinearStencil:
    """Per-point interpolation footprint: 8 flat node indices and weights.

    Outside-bbox points get all-zero weights so gathers and scatters can run
    unmasked. Weights of inside points are nonnegative and sum to 1.
    """

    resolution: int
    index: np.ndarray   # (N, 8) int64 flat node ids, flat = (ix*R + iy)*R + iz
    weight: np.ndarray  # (N, 8) float64
    inside: np.ndarray  # (N,) bool


def trilinear_stencil(resolution: int, points: np.ndarray) -> TrilinearStencil:
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    r = resolution
    n = pts.shape[0]
    inside = ((pts[:, 0] >= BBOX_MIN) & (pts[:, 0] <= BBOX_MAX)
              & (pts[:, 1] >= BBOX_MIN) & (pts[:, 1] <= BBOX_MAX)
              & (pts[:, 2] >= BBOX_MIN) & (pts[:, 2] <= BBOX_MAX))

    u = (pts - BBOX_MIN) * ((r - 1) / (BBOX_MAX - BBOX_MIN))
    i0 = np.clip(np.floor(u).astype(np.int64), 0, r - 2)
    frac = np.clip(u - i0, 0.0, 1.0)

    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    base = (i0[:, 0] * r + i0[:, 1]) * r + i0[:, 2]

    weight = np.empty((n, 8))
    index = np.empty((n, 8), dtype=np.int64)
    corner = 0
    for bx, wx, ox in ((0, gx, 0), (1, fx, r * r)):
        for by, wy, oy in ((0, gy, 0), (1, fy, r)):
            wxy = wx * wy
            for bz, wz, oz in ((0, gz, 0), (1, fz, 1)):
                weight[:, corner] = wxy * wz
                index[:, corner] = base + (ox + oy + oz)
                corner += 1
    if not inside.all():
        weight[~inside] = 0.0
    return TrilinearStencil(r, index, weight, inside)


def sample_trilinear(grid: Grid3, points: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of grid values at ``points``.

    Accepts a single (3,) point or an (N, 3) batch; returns (C,) or (N, C).
    Out-of-bbox points yield the zero sample.
    """
    single = np.asarray(points).ndim == 1
    st = trilinear_stencil(grid.resolution, points)
    out = gather_stencil(st, grid.values.reshape(-1, grid.channels).astype(np.float64))
    return out[0] if single else out


def sample_field(grid: Grid3, point: np.ndarray) -> FieldSample:
    return FieldSample(value=sample_trilinear(grid, point), point=np.asarray(point, dtype=np.float64))


def sample_trilinear_backward(grid: Grid3, points: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`sample_trilinear`: scatter upstream through the weights.

    ``upstream`` is (C,) / (N, C); returns a dense (R, R, R, C) float64 gradient.
    The contribution of each point touches at most its 8 stencil nodes.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    up = np.asarray(upstream, dtype=np.float64)
    if up.ndim == 1:
        up = up[None, :]
    if up.shape != (pts.shape[0], grid.channels):
        raise ValueError(f"upstream shape {up.shape} incompatible with {pts.shape[0]} points")
    st = trilinear_stencil(grid.resolution, pts)
    return scatter_stencil(st, up, grid.channels).reshape(grid.values.shape)


def scatter_stencil(st: TrilinearStencil, upstream: np.ndarray, channels: int) -> np.ndarray:
    """Accumulate per-point upstream values through a stencil into flat node storage.

    Uses bincount per channel: summation order is fixed by node index, so
    the reduction is deterministic. Returns (R^3, C) float64.
    """
    nodes = st.resolution**3
    idx = st.index.ravel()
    contrib = st.weight[:, :, None] * upstream[:, None, :]
    contrib = contrib.reshape(-1, channels)
    out = np.empty((nodes, channels))
    for c in range(channels):
        out[:, c] = np.bincount(idx, weights=contrib[:, c], minlength=nodes)
    return out


def gather_stencil(st: TrilinearStencil, flat_values: np.ndarray) -> np.ndarray:
    """Interpolate flat (R^3, C) node values through a stencil: returns (N, C)."""
    gathered = flat_values[st.index]                # (N, 8, C)
    return np.einsum("nk,nkc->nc", st.weight, gathered)


def grid_gradient_field(grid: Grid3, points: np.ndarray) -> np.ndarray:
    """Spatial gradient of the scalar interpolant, (3,) or (N, 3).

    Piecewise constant per cell along each axis; zero outside the bbox.
    """
    if grid.channels != 1:
        raise Distill3DError("grid_gradient_field requires a scalar grid")
    g = sample_spatial_gradient(grid, points)
    return g[..., 0, :] if np.asarray(points).ndim > 1 else g[0, 0]


def sample_spatial_gradient(grid: Grid3, points: np.ndarray) -> np.ndarray:
    """d(sample)/d(point) for every channel: returns (N, C, 3) float64."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    r = grid.resolution
    inside = np.all((pts >= BBOX_MIN) & (pts <= BBOX_MAX), axis=1)

    u = (pts - BBOX_MIN) / (BBOX_MAX - BBOX_MIN) * (r - 1)
    i0 = np.clip(np.floor(u).astype(np.int64), 0, r - 2)
    frac = np.clip(u - i0, 0.0, 1.0)
    du_dp = (r - 1) / (BBOX_MAX - BBOX_MIN)

    offs = np.array([[(b >> 2) & 1, (b >> 1) & 1, b & 1] for b in range(8)], dtype=np.int64)
    idx3 = i0[:, None, :] + offs[None, :, :]
    flat = (idx3[..., 0] * r + idx3[..., 1]) * r + idx3[..., 2]
    vals = grid.values.reshape(-1, grid.channels).astype(np.float64)[flat]  # (N, 8, C)

    w_axis = np.where(offs[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :])  # (N, 8, 3)
    dw_axis = np.where(offs[None, :, :] == 1, 1.0, -1.0)

    out = np.zeros((pts.shape[0], grid.channels, 3))
    for axis in range(3):
        others = [a for a in range(3) if a != axis]
        dw = dw_axis[:, :, axis] * w_axis[:, :, others[0]] * w_axis[:, :, others[1]]
        out[:, :, axis] = np.einsum("nk,nkc->nc", dw, vals) * du_dp
    out[~inside] = 0.0
    return out


def save_grid3(grid: Grid3, path) -> None:
    """Write the GRID3 checkpoint format.

    Header line ``GRID3 <res> <channels>\\n`` then raw little-endian float32,
    node-major with x fastest, channels interleaved per node.
    """
    # In-memory layout is [ix, iy, iz, c]; serialized order wants ix fastest.
    serial = np.transpose(grid.values, (2, 1, 0, 3))
    with open(path, "wb") as fh:
        fh.write(f"{_GRID3_MAGIC} {grid.resolution} {grid.channels}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(serial, dtype="<f4").tobytes())


def load_grid3(path) -> Grid3:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").strip()
        parts = header.split()
        if len(parts) != 3 or parts[0] != _GRID3_MAGIC:
            raise Distill3DError(f"{path}: not a GRID3 checkpoint (header {header!r})")
        res, channels = int(parts[1]), int(parts[2])
        payload = fh.read()
    expected = res**3 * channels * 4
    if len(payload) != expected:
        raise Distill3DError(f"{path}: GRID3 payload is {len(payload)} bytes, expected {expected}")
    serial = np.frombuffer(payload, dtype="<f4").reshape(res, res, res, channels)
    return Grid3(res, channels, np.transpose(serial, (2, 1, 0, 3)))
