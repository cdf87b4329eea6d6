"""Deformable tetrahedral grid with per-vertex SDF, marching tetrahedra,
gradient provenance, and OBJ/PLY export.

Sign convention: negative SDF is inside. Crossing vertices carry their
(edge, lambda) provenance so positions can be differentiated w.r.t. the
SDF values and vertex deformations; topology (the sign pattern) is
treated as constant by the backward pass.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import Distill3DError, StaleStateError

log = logging.getLogger(__name__)

DEFORM_CLAMP_FRACTION = 0.45
DEGENERATE_AREA = 1e-12

# Local tet edges, in the order the triangle table indexes them.
TET_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]], dtype=np.int64)

# Standard marching-tetrahedra table over the 16 inside/outside patterns
# (bit i set when corner i is inside). Entries are local edge ids, -1 padded;
# windings assume positively oriented tets and produce outward-facing
# triangles for this sign convention.
TRIANGLE_TABLE = np.array([
    [-1, -1, -1, -1, -1, -1],
    [1, 2, 0, -1, -1, -1],
    [4, 3, 0, -1, -1, -1],
    [1, 2, 4, 1, 4, 3],
    [3, 5, 1, -1, -1, -1],
    [2, 0, 3, 2, 3, 5],
    [1, 0, 4, 1, 4, 5],
    [4, 5, 2, -1, -1, -1],
    [4, 2, 5, -1, -1, -1],
    [4, 0, 1, 4, 1, 5],
    [3, 0, 2, 3, 2, 5],
    [1, 5, 3, -1, -1, -1],
    [4, 2, 1, 4, 1, 3],
    [3, 4, 0, -1, -1, -1],
    [2, 1, 0, -1, -1, -1],
    [-1, -1, -1, -1, -1, -1],
], dtype=np.int64)

NUM_TRIANGLES = np.array([0, 1, 1, 2, 1, 2, 2, 1, 1, 2, 2, 1, 2, 1, 1, 0], dtype=np.int64)


@dataclass
class TetGrid:
    """Tet mesh over [-1,1]^3: canonical vertices, tets, per-vertex SDF + deformation."""

    vertices: np.ndarray   # (Nv, 3) canonical positions
    tets: np.ndarray       # (T, 4) vertex indices, positively oriented
    sdf: np.ndarray        # (Nv,)
    deform: np.ndarray     # (Nv, 3)
    resolution: int        # cells per axis of the generating cube grid
    provenance: str = "manual"

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.tets = np.asarray(self.tets, dtype=np.int64)
        self.sdf = np.asarray(self.sdf, dtype=np.float64)
        self.deform = np.asarray(self.deform, dtype=np.float64)
        nv = self.vertices.shape[0]
        if self.tets.size and (self.tets.min() < 0 or self.tets.max() >= nv):
            raise ValueError("tet indices out of range")
        if self.sdf.shape != (nv,) or self.deform.shape != (nv, 3):
            raise ValueError("sdf/deform shapes do not match vertex count")

    @property
    def spacing(self) -> float:
        return 2.0 / self.resolution

    @property
    def deform_limit(self) -> float:
        return DEFORM_CLAMP_FRACTION * self.spacing

    def effective_vertices(self) -> np.ndarray:
        return self.vertices + self.deform

    def clamp_deform(self) -> None:
        """Project deformations into the non-inverting box (applied after each step)."""
        np.clip(self.deform, -self.deform_limit, self.deform_limit, out=self.deform)

    def state_token(self) -> tuple:
        return (id(self), float(self.sdf.sum()), float(self.deform.sum()),
                float(np.abs(self.sdf).sum()), float(np.abs(self.deform).sum()))

    def tet_volumes(self) -> np.ndarray:
        v = self.vertices[self.tets]
        e = v[:, 1:] - v[:, :1]
        return np.linalg.det(e) / 6.0


@dataclass
class SurfaceMesh:
    """Triangle mesh extracted by marching tets, with gradient provenance."""

    vertices: np.ndarray            # (M, 3)
    faces: np.ndarray               # (F, 3)
    normals: np.ndarray | None = None       # (M, 3) unit, outward
    prov_edges: np.ndarray | None = None    # (M, 2) tet-grid vertex ids (a, b)
    prov_lambda: np.ndarray | None = None   # (M,) position = (1-l)*pos_a + l*pos_b
    source_token: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    def is_empty(self) -> bool:
        return self.num_faces == 0

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        cross = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return 0.5 * np.linalg.norm(cross, axis=1)


def build_tet_grid(resolution: int) -> TetGrid:
    """Split [-1,1]^3 into ``resolution``^3 cubes, each into 6 Kuhn tets."""
    if not (8 <= resolution <= 128):
        raise ValueError(f"tet grid resolution must be in [8, 128], got {resolution}")
    n = resolution + 1
    ax = np.linspace(-1.0, 1.0, n)
    gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
    vertices = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    def vid(ix, iy, iz):
        return (ix * n + iy) * n + iz

    base = np.arange(resolution)
    cx, cy, cz = np.meshgrid(base, base, base, indexing="ij")
    cx, cy, cz = cx.ravel(), cy.ravel(), cz.ravel()
    corner = {}
    for bx in (0, 1):
        for by in (0, 1):
            for bz in (0, 1):
                corner[(bx, by, bz)] = vid(cx + bx, cy + by, cz + bz)

    # Six paths 000 -> 111 adding one axis at a time share the main diagonal.
    paths = [
        [(1, 0, 0), (1, 1, 0)], [(1, 0, 0), (1, 0, 1)],
        [(0, 1, 0), (1, 1, 0)], [(0, 1, 0), (0, 1, 1)],
        [(0, 0, 1), (1, 0, 1)], [(0, 0, 1), (0, 1, 1)],
    ]
    tet_list = []
    for mid1, mid2 in paths:
        tet_list.append(np.stack([corner[(0, 0, 0)], corner[mid1],
                                  corner[mid2], corner[(1, 1, 1)]], axis=1))
    tets = np.concatenate(tet_list, axis=0)

    # Normalize orientation so every tet has positive volume.
    e = vertices[tets[:, 1:]] - vertices[tets[:, :1]]
    neg = np.linalg.det(e) < 0
    tets[neg] = tets[neg][:, [0, 2, 1, 3]]

    return TetGrid(vertices, tets,
                   sdf=np.zeros(vertices.shape[0]),
                   deform=np.zeros_like(vertices),
                   resolution=resolution)


def marching_tets(grid: TetGrid) -> SurfaceMesh:
    """Extract the zero level set of the per-vertex SDF as a triangle mesh.

    Crossing vertices are deduplicated by their sorted tet-grid edge, so
    extraction is independent of tet order. Degenerate faces (area below
    ``DEGENERATE_AREA``) are dropped and unreferenced vertices pruned.
    """
    s = grid.sdf
    if s.size and np.any(s == 0.0):
        zero_tets = np.all(s[grid.tets] == 0.0, axis=1)
        if np.any(zero_tets):
            log.warning("marching_tets: %d tets have all-zero SDF; treated as outside",
                        int(zero_tets.sum()))

    inside = s < 0.0
    occ = inside[grid.tets]                                   # (T, 4)
    case = occ @ np.array([1, 2, 4, 8], dtype=np.int64)
    valid = (case > 0) & (case < 15)
    if not np.any(valid):
        return _empty_mesh(grid)

    vcase = case[valid]
    vtets = grid.tets[valid]
    table = TRIANGLE_TABLE[vcase]                             # (Tv, 6)
    ntri = NUM_TRIANGLES[vcase]

    tri_local = np.concatenate([table[:, :3],
                                table[ntri == 2][:, 3:6]], axis=0)   # (F, 3) local edge ids
    tri_tet = np.concatenate([np.arange(vtets.shape[0]),
                              np.nonzero(ntri == 2)[0]], axis=0)

    edge_pairs = vtets[:, TET_EDGES]                          # (Tv, 6, 2)
    pairs = edge_pairs[tri_tet[:, None], tri_local]           # (F, 3, 2)
    pairs = np.sort(pairs, axis=-1)

    nv = grid.vertices.shape[0]
    keys = pairs[..., 0] * nv + pairs[..., 1]
    uniq_keys, faces_flat = np.unique(keys.ravel(), return_inverse=True)
    faces = faces_flat.reshape(-1, 3)

    a = uniq_keys // nv
    b = uniq_keys % nv
    sa, sb = s[a], s[b]
    lam = sa / (sa - sb)
    eff = grid.effective_vertices()
    verts = (1.0 - lam)[:, None] * eff[a] + lam[:, None] * eff[b]

    mesh = SurfaceMesh(verts, faces,
                       prov_edges=np.stack([a, b], axis=1),
                       prov_lambda=lam,
                       source_token=grid.state_token())
    mesh = _filter_degenerate(mesh)
    if not mesh.is_empty():
        mesh.normals = vertex_normals(mesh)
    else:
        mesh.normals = np.zeros((mesh.num_vertices, 3))
    return mesh


def _empty_mesh(grid: TetGrid | None) -> SurfaceMesh:
    return SurfaceMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64),
                       normals=np.zeros((0, 3)),
                       prov_edges=np.zeros((0, 2), dtype=np.int64),
                       prov_lambda=np.zeros(0),
                       source_token=grid.state_token() if grid is not None else None)


def _filter_degenerate(mesh: SurfaceMesh) -> SurfaceMesh:
    keep = mesh.face_areas() > DEGENERATE_AREA
    faces = mesh.faces[keep]
    used = np.zeros(mesh.num_vertices, dtype=bool)
    used[faces.ravel()] = True
    remap = -np.ones(mesh.num_vertices, dtype=np.int64)
    remap[used] = np.arange(int(used.sum()))
    return SurfaceMesh(mesh.vertices[used], remap[faces],
                       prov_edges=None if mesh.prov_edges is None else mesh.prov_edges[used],
                       prov_lambda=None if mesh.prov_lambda is None else mesh.prov_lambda[used],
                       source_token=mesh.source_token)


def marching_tets_backward(grid: TetGrid, mesh: SurfaceMesh, upstream: np.ndarray
                           ) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of sum(upstream * mesh.vertices) w.r.t. (sdf, deform).

    Differentiates position = (1-l) p_a + l p_b with l = s_a/(s_a - s_b);
    the sign pattern is constant. Returns (d_sdf (Nv,), d_deform (Nv, 3)).
    """
    if mesh.prov_edges is None or mesh.prov_lambda is None:
        raise StaleStateError("mesh has no provenance; it was not produced by marching_tets")
    if mesh.source_token != grid.state_token():
        raise StaleStateError("tet grid changed since extraction; re-run marching_tets")
    u = np.asarray(upstream, dtype=np.float64)
    if u.shape != (mesh.num_vertices, 3):
        raise ValueError(f"upstream must be ({mesh.num_vertices}, 3), got {u.shape}")

    d_sdf = np.zeros(grid.sdf.shape)
    d_deform = np.zeros(grid.deform.shape)
    if mesh.num_vertices == 0:
        return d_sdf, d_deform

    a = mesh.prov_edges[:, 0]
    b = mesh.prov_edges[:, 1]
    lam = mesh.prov_lambda
    eff = grid.effective_vertices()
    sa, sb = grid.sdf[a], grid.sdf[b]

    np.add.at(d_deform, a, (1.0 - lam)[:, None] * u)
    np.add.at(d_deform, b, lam[:, None] * u)

    d_lam = np.einsum("mc,mc->m", u, eff[b] - eff[a])
    denom = (sa - sb) ** 2
    np.add.at(d_sdf, a, d_lam * (-sb) / denom)
    np.add.at(d_sdf, b, d_lam * sa / denom)
    return d_sdf, d_deform


def vertex_normals(mesh: SurfaceMesh) -> np.ndarray:
    """Area-weighted vertex normals (unit), oriented by face winding."""
    if mesh.num_faces == 0:
        raise Distill3DError("vertex_normals: mesh has no faces")
    counts = np.zeros(mesh.num_vertices, dtype=np.int64)
    np.add.at(counts, mesh.faces.ravel(), 1)
    if np.any(counts == 0):
        raise Distill3DError("vertex_normals: mesh has isolated vertices")

    v = mesh.vertices[mesh.faces]
    face_n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])  # magnitude = 2 * area
    acc = np.zeros((mesh.num_vertices, 3))
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], face_n)
    norms = np.linalg.norm(acc, axis=1, keepdims=True)
    return acc / np.maximum(norms, 1e-20)


def vertex_normals_backward(mesh: SurfaceMesh, upstream: np.ndarray) -> np.ndarray:
    """Gradient of sum(upstream * vertex_normals(mesh)) w.r.t. mesh vertices."""
    u = np.asarray(upstream, dtype=np.float64)
    if u.shape != (mesh.num_vertices, 3):
        raise ValueError("upstream shape mismatch")
    v = mesh.vertices[mesh.faces]
    e1 = v[:, 1] - v[:, 0]
    e2 = v[:, 2] - v[:, 0]
    face_n = np.cross(e1, e2)

    acc = np.zeros((mesh.num_vertices, 3))
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], face_n)
    norms = np.maximum(np.linalg.norm(acc, axis=1, keepdims=True), 1e-20)
    n_hat = acc / norms

    # Through normalization: dN = (u - (u.n) n) / |N|
    d_acc = (u - n_hat * np.einsum("mc,mc->m", u, n_hat)[:, None]) / norms

    # Each face's cross product feeds all three of its corners' accumulators.
    d_face_n = d_acc[mesh.faces].sum(axis=1)                  # (F, 3)
    d_e1 = np.cross(e2, d_face_n)
    d_e2 = np.cross(d_face_n, e1)

    d_verts = np.zeros((mesh.num_vertices, 3))
    np.add.at(d_verts, mesh.faces[:, 1], d_e1)
    np.add.at(d_verts, mesh.faces[:, 2], d_e2)
    np.add.at(d_verts, mesh.faces[:, 0], -(d_e1 + d_e2))
    return d_verts


def boundary_edge_counts(mesh: SurfaceMesh) -> np.ndarray:
    """Occurrences of each undirected edge across faces (watertight == all 2)."""
    f = mesh.faces
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return counts


def export_mesh(mesh: SurfaceMesh, path_obj, colors: np.ndarray | None = None,
                path_ply=None) -> None:
    """Write OBJ (positions + normals) and optionally an ASCII PLY with colors.

    OBJ uses ``v``/``vn``/``f i//i`` lines, 1-based, 6-decimal formatting.
    """
    if mesh.is_empty():
        log.warning("export_mesh: exporting an empty mesh to %s", path_obj)
    normals = mesh.normals
    if normals is None and not mesh.is_empty():
        normals = vertex_normals(mesh)
    if normals is None:
        normals = np.zeros((mesh.num_vertices, 3))

    try:
        with open(path_obj, "w", encoding="ascii") as fh:
            for p in mesh.vertices:
                fh.write(f"v {p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")
            for n in normals:
                fh.write(f"vn {n[0]:.6f} {n[1]:.6f} {n[2]:.6f}\n")
            for f in mesh.faces + 1:
                fh.write(f"f {f[0]}//{f[0]} {f[1]}//{f[1]} {f[2]}//{f[2]}\n")
    except OSError as exc:
        raise Distill3DError(f"cannot write OBJ to {path_obj}: {exc}") from exc

    if colors is not None and path_ply is None:
        raise ValueError("colors given but no PLY path")
    if path_ply is None:
        return
    colors = np.zeros((mesh.num_vertices, 3)) if colors is None else np.asarray(colors)
    if colors.shape != (mesh.num_vertices, 3):
        raise ValueError("colors must be per-vertex RGB")
    rgb8 = np.clip(np.round(colors * 255.0), 0, 255).astype(np.uint8)
    try:
        with open(path_ply, "w", encoding="ascii") as fh:
            fh.write("ply\nformat ascii 1.0\n")
            fh.write(f"element vertex {mesh.num_vertices}\n")
            fh.write("property float x\nproperty float y\nproperty float z\n")
            fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
            fh.write(f"element face {mesh.num_faces}\n")
            fh.write("property list uchar int vertex_indices\nend_header\n")
            for p, c in zip(mesh.vertices, rgb8):
                fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}\n")
            for f in mesh.faces:
                fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")
    except OSError as exc:
        raise Distill3DError(f"cannot write PLY to {path_ply}: {exc}") from exc


def load_obj(path) -> SurfaceMesh:
    """Parse the OBJ subset written by :func:`export_mesh` (no provenance)."""
    verts, normals, faces = [], [], []
    try:
        with open(path, "r", encoding="ascii") as fh:
            for line in fh:
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "vn":
                    normals.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    faces.append([int(tok.split("/")[0]) - 1 for tok in parts[1:4]])
    except OSError as exc:
        raise Distill3DError(f"cannot read OBJ from {path}: {exc}") from exc
    mesh = SurfaceMesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3),
                       np.asarray(faces, dtype=np.int64).reshape(-1, 3))
    if normals and len(normals) == len(verts):
        mesh.normals = np.asarray(normals, dtype=np.float64)
    elif not mesh.is_empty():
        mesh.normals = vertex_normals(mesh)
    else:
        mesh.normals = np.zeros((0, 3))
    return mesh
