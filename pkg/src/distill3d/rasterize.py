"""Differentiable hard-visibility rasterizer for extracted surface meshes.

Per covered pixel: perspective-correct barycentric interpolation of world
positions and vertex normals; RGB sampled from a volumetric color grid at
the surface point; normals rotated into camera space and mapped by
n * 0.5 + 0.5. Backward flows into the texture grid, vertex positions,
and vertex normals. Visibility, coverage, and the raster-space
barycentrics are treated as constants: there are no silhouette terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraPose, project_points
from .errors import StaleStateError
from .fields import (Grid3, sample_spatial_gradient, sample_trilinear,
                     sample_trilinear_backward)
from .images import Image
from .tetmesh import SurfaceMesh, vertex_normals

UNCOVERED_NORMAL = np.array([0.5, 0.5, 1.0])
MIN_FACE_DEPTH = 1e-4
_MIN_AREA2 = 1e-12


@dataclass
class RasterOutput:
    """Raster buffers plus the per-pixel provenance needed for the backward pass."""

    rgb: Image
    normal_map: Image
    depth: np.ndarray        # (H, W) float, +inf where uncovered
    mask: np.ndarray         # (H, W) bool coverage
    face_id: np.ndarray      # (H, W) int64, -1 where uncovered
    bary: np.ndarray         # (H, W, 3) perspective-correct barycentrics
    mesh: SurfaceMesh = field(repr=False, default=None)
    texture: Grid3 = field(repr=False, default=None)
    cam: CameraPose = field(repr=False, default=None)
    background: np.ndarray = field(repr=False, default=None)
    _points: np.ndarray = field(repr=False, default=None)      # (P, 3) world positions
    _pix_index: np.ndarray = field(repr=False, default=None)   # (P,) flat pixel ids
    _rgb_raw: np.ndarray = field(repr=False, default=None)     # (P, 3) pre-clamp samples
    _normal_acc: np.ndarray = field(repr=False, default=None)  # (P, 3) pre-normalize sums
    _texture_token: tuple = field(repr=False, default=None)


def _texture_token(grid: Grid3) -> tuple:
    return (id(grid.values), float(grid.values.sum(dtype=np.float64)))


def rasterize(mesh: SurfaceMesh, texture: Grid3, cam: CameraPose,
              background=(1.0, 1.0, 1.0)) -> RasterOutput:
    """Z-buffered perspective rasterization of ``mesh`` textured by ``texture``.

    Determinism: depth ties resolve by lowest face id, and candidate pixels
    come from face bounding boxes in a fixed order.
    """
    h, w = cam.height, cam.width
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    rgb_px = np.empty((h * w, 3))
    rgb_px[:] = bg
    normal_px = np.empty((h * w, 3))
    normal_px[:] = UNCOVERED_NORMAL
    depth_px = np.full(h * w, np.inf)
    face_px = np.full(h * w, -1, dtype=np.int64)
    bary_px = np.zeros((h * w, 3))

    def _finish(points=None, pix=None, rgb_raw=None, normal_acc=None):
        out = RasterOutput(
            rgb=Image(np.clip(rgb_px.reshape(h, w, 3), 0.0, 1.0)),
            normal_map=Image(np.clip(normal_px.reshape(h, w, 3), 0.0, 1.0)),
            depth=depth_px.reshape(h, w),
            mask=(face_px >= 0).reshape(h, w),
            face_id=face_px.reshape(h, w),
            bary=bary_px.reshape(h, w, 3),
            mesh=mesh, texture=texture, cam=cam, background=bg,
            _points=points, _pix_index=pix, _rgb_raw=rgb_raw, _normal_acc=normal_acc,
            _texture_token=_texture_token(texture))
        return out

    if mesh.is_empty():
        return _finish()

    pix2d, vdepth = project_points(cam, mesh.vertices)
    tri = mesh.faces
    tri_ok = np.all(vdepth[tri] > MIN_FACE_DEPTH, axis=1)
    if not np.any(tri_ok):
        return _finish()
    tri_ids = np.nonzero(tri_ok)[0]

    p2 = pix2d[tri[tri_ids]]                    # (F, 3, 2)
    x0 = np.clip(np.floor(p2[..., 0].min(axis=1)), 0, w - 1).astype(np.int64)
    x1 = np.clip(np.ceil(p2[..., 0].max(axis=1)), 0, w - 1).astype(np.int64)
    y0 = np.clip(np.floor(p2[..., 1].min(axis=1)), 0, h - 1).astype(np.int64)
    y1 = np.clip(np.ceil(p2[..., 1].max(axis=1)), 0, h - 1).astype(np.int64)
    on_screen = (p2[..., 0].max(axis=1) >= 0) & (p2[..., 0].min(axis=1) <= w - 1) \
        & (p2[..., 1].max(axis=1) >= 0) & (p2[..., 1].min(axis=1) <= h - 1)
    tri_ids, p2 = tri_ids[on_screen], p2[on_screen]
    x0, x1, y0, y1 = x0[on_screen], x1[on_screen], y0[on_screen], y1[on_screen]
    if tri_ids.size == 0:
        return _finish()

    # Expand each face bbox into candidate (face, pixel) pairs.
    bw = x1 - x0 + 1
    bh = y1 - y0 + 1
    counts = bw * bh
    total = int(counts.sum())
    face_rep = np.repeat(np.arange(tri_ids.size), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - starts[face_rep]
    cx = x0[face_rep] + local % bw[face_rep]
    cy = y0[face_rep] + local // bw[face_rep]

    pa, pb, pc = p2[face_rep, 0], p2[face_rep, 1], p2[face_rep, 2]
    pt = np.stack([cx + 0.0, cy + 0.0], axis=1)
    area2 = _cross2(pb - pa, pc - pa)
    la = _cross2(pc - pb, pt - pb)
    lb = _cross2(pa - pc, pt - pc)
    lc = _cross2(pb - pa, pt - pa)
    nondeg = np.abs(area2) > _MIN_AREA2
    inside = nondeg & (((la >= 0) & (lb >= 0) & (lc >= 0) & (area2 > 0))
                       | ((la <= 0) & (lb <= 0) & (lc <= 0) & (area2 < 0)))
    if not np.any(inside):
        return _finish()

    face_rep = face_rep[inside]
    cx, cy = cx[inside], cy[inside]
    lam = np.stack([la[inside], lb[inside], lc[inside]], axis=1) / area2[inside][:, None]

    # Perspective-correct weights from screen-space barycentrics.
    zs = vdepth[tri[tri_ids[face_rep]]]         # (P, 3)
    lam_over_z = lam / zs
    inv_z = lam_over_z.sum(axis=1)
    bary = lam_over_z / inv_z[:, None]
    depth = 1.0 / inv_z

    pix = cy * w + cx
    order = np.lexsort((tri_ids[face_rep], depth, pix))
    pix_o = pix[order]
    first = np.ones(pix_o.size, dtype=bool)
    first[1:] = pix_o[1:] != pix_o[:-1]
    sel = order[first]

    pix_sel = pix[sel]
    face_sel = tri_ids[face_rep[sel]]
    bary_sel = bary[sel]
    depth_px[pix_sel] = depth[sel]
    face_px[pix_sel] = face_sel
    bary_px[pix_sel] = bary_sel

    corner_pos = mesh.vertices[tri[face_sel]]       # (P, 3, 3)
    points = np.einsum("pk,pkc->pc", bary_sel, corner_pos)
    rgb_raw = sample_trilinear(texture, points)
    rgb_px[pix_sel] = np.clip(rgb_raw, 0.0, 1.0)

    normals = mesh.normals if mesh.normals is not None else vertex_normals(mesh)
    corner_n = normals[tri[face_sel]]
    n_acc = np.einsum("pk,pkc->pc", bary_sel, corner_n)
    n_hat = n_acc / np.maximum(np.linalg.norm(n_acc, axis=1, keepdims=True), 1e-20)
    n_cam = n_hat @ cam.rotation                    # world -> camera (R^T n)
    normal_px[pix_sel] = n_cam * 0.5 + 0.5

    return _finish(points=points, pix=pix_sel, rgb_raw=rgb_raw, normal_acc=n_acc)


def _cross2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def rasterize_backward(out: RasterOutput, upstream_rgb: np.ndarray | None = None,
                       upstream_normal: np.ndarray | None = None
                       ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backward pass of :func:`rasterize` over covered pixels only.

    Returns (d_texture (R,R,R,3), d_vertex_positions (M,3), d_vertex_normals
    (M,3)). Uncovered pixels, visibility, and barycentric weights contribute
    nothing; position gradients flow through the interpolated surface point
    into the texture's spatial gradient.
    """
    if out._texture_token != _texture_token(out.texture):
        raise StaleStateError("texture grid changed since rasterization")
    mesh = out.mesh
    d_texture = np.zeros(out.texture.values.shape)
    d_pos = np.zeros((mesh.num_vertices, 3))
    d_norm = np.zeros((mesh.num_vertices, 3))
    if out._points is None or out._points.shape[0] == 0:
        return d_texture, d_pos, d_norm

    h, w = out.cam.height, out.cam.width
    pix = out._pix_index
    face_sel = out.face_id.reshape(-1)[pix]
    bary_sel = out.bary.reshape(-1, 3)[pix]
    tri = mesh.faces[face_sel]                      # (P, 3)

    if upstream_rgb is not None:
        u_rgb = np.asarray(upstream_rgb, dtype=np.float64).reshape(h * w, 3)[pix]
        clamp_open = (out._rgb_raw > 0.0) & (out._rgb_raw < 1.0)
        u_rgb = np.where(clamp_open, u_rgb, 0.0)
        d_texture += sample_trilinear_backward(out.texture, out._points, u_rgb)
        # d(rgb)/d(point) via the texture's spatial gradient, then to corners.
        jac = sample_spatial_gradient(out.texture, out._points)   # (P, 3, 3)
        d_point = np.einsum("pc,pcx->px", u_rgb, jac)
        contrib = bary_sel[:, :, None] * d_point[:, None, :]
        for k in range(3):
            np.add.at(d_pos, tri[:, k], contrib[:, k])

    if upstream_normal is not None:
        u_nm = np.asarray(upstream_normal, dtype=np.float64).reshape(h * w, 3)[pix]
        d_ncam = u_nm * 0.5
        d_nhat = d_ncam @ out.cam.rotation.T
        acc = out._normal_acc
        norms = np.maximum(np.linalg.norm(acc, axis=1, keepdims=True), 1e-20)
        n_hat = acc / norms
        d_acc = (d_nhat - n_hat * np.einsum("pc,pc->p", d_nhat, n_hat)[:, None]) / norms
        contrib = bary_sel[:, :, None] * d_acc[:, None, :]
        for k in range(3):
            np.add.at(d_norm, tri[:, k], contrib[:, k])

    return d_texture, d_pos, d_norm
