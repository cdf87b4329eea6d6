"""Built-in invariant battery behind the ``check`` CLI subcommand.

Each check is small, deterministic, and runs in well under a second; the
battery is a smoke test of the package's core identities, not a
replacement for the test suite.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from . import codec, denoisers, fields, prompts, schedule, tetmesh, volume
from .camera import CameraPolicy, RelativePose, apply_relative, solve_relative
from .images import Image


def _check_trilinear_weights():
    rng = np.random.default_rng(11)
    st = fields.trilinear_stencil(9, rng.uniform(-1, 1, (256, 3)))
    if st.weight.min() < 0:
        return "negative interpolation weight"
    if np.abs(st.weight.sum(axis=1) - 1.0).max() > 1e-12:
        return "weights do not sum to 1"
    return None


def _check_trilinear_adjoint():
    rng = np.random.default_rng(12)
    grid = fields.Grid3(6, 3, rng.normal(size=(6, 6, 6, 3)))
    pts = rng.uniform(-1, 1, (64, 3))
    up = rng.normal(size=(64, 3))
    lhs = float(np.sum(fields.sample_trilinear(grid, pts) * up))
    grad = fields.sample_trilinear_backward(grid, pts, up)
    rhs = float(np.sum(grad * grid.values.astype(np.float64)))
    if abs(lhs - rhs) > 1e-8 * max(1.0, abs(lhs)):
        return f"adjoint mismatch: {lhs} vs {rhs}"
    return None


def _check_grid_roundtrip():
    rng = np.random.default_rng(13)
    grid = fields.Grid3(5, 1, rng.normal(size=(5, 5, 5, 1)))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "g.grid3"
        fields.save_grid3(grid, path)
        back = fields.load_grid3(path)
    if not np.array_equal(grid.values, back.values):
        return "GRID3 roundtrip not bit-exact"
    return None


def _check_schedule():
    s = schedule.linear_schedule()
    if abs(s.alpha_bar(1) - 0.9999) > 1e-12:
        return f"alpha_bar(1) = {s.alpha_bar(1)}"
    if not np.all(np.diff(s.alpha_bars) < 0):
        return "alpha_bars not strictly decreasing"
    return None


def _check_delta_oracle():
    s = schedule.linear_schedule()
    rng = np.random.default_rng(14)
    for _ in range(100):
        t = int(rng.integers(20, 981))
        z = rng.normal(size=(3, 4, 4))
        target = rng.normal(size=(3, 4, 4))
        ts = schedule.TimestepSample(t, rng.standard_normal((3, 4, 4)), 1.0)
        z_t = schedule.add_noise(z, ts, s)
        den = denoisers.delta_target_denoiser(target, s)
        ab = s.alpha_bar(t)
        expected = np.sqrt(ab / (1 - ab)) * (z - target)
        if np.abs(den.predict(z_t, t) - ts.eps - expected).max() > 1e-6:
            return "delta-oracle identity violated"
    return None


def _check_codec_adjoint():
    rng = np.random.default_rng(15)
    img = Image(rng.uniform(0, 1, (8, 8, 3)))
    for name in ("identity", "avgpool-2"):
        lat = codec.encode(img, name)
        u = rng.normal(size=lat.tensor.shape)
        lhs = float(np.sum(lat.tensor * u))
        rhs = float(np.sum(img.pixels * codec.encode_adjoint(u, name, (8, 8))))
        if abs(lhs - rhs) > 1e-8:
            return f"codec {name} adjoint mismatch"
    return None


def _check_embedder():
    rng = np.random.default_rng(16)
    a = Image(rng.uniform(0, 1, (16, 16, 3)))
    b = Image(rng.uniform(0, 1, (16, 16, 3)))
    ya = prompts.embed_image(a, 4)
    yb = prompts.embed_image(b, 4)
    mix = Image(0.25 * a.pixels + 0.75 * b.pixels)
    if np.abs(prompts.embed_image(mix, 4).vector
              - (0.25 * ya.vector + 0.75 * yb.vector)).max() > 1e-12:
        return "embedder not linear"
    if np.any(prompts.geometry_prompt_difference(ya, ya).vector != 0.0):
        return "same-view difference not exactly zero"
    delta = prompts.geometry_prompt_difference(ya, yb)
    if np.abs(prompts.compensate(yb, delta).vector - ya.vector).max() > 1e-12:
        return "compensate(y, delta) does not recover the source embedding"
    return None


def _check_tet_volumes():
    grid = tetmesh.build_tet_grid(8)
    vols = grid.tet_volumes()
    if vols.min() <= 0:
        return "non-positive tet volume"
    if abs(vols.sum() - 8.0) > 1e-9:
        return f"tet volumes sum to {vols.sum()}"
    return None


def _check_marching_tets():
    grid = tetmesh.build_tet_grid(16)
    grid.sdf = np.linalg.norm(grid.vertices, axis=1) - 0.6
    mesh = tetmesh.marching_tets(grid)
    if mesh.is_empty():
        return "sphere extraction is empty"
    err = np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.6).max()
    if err > 2.0 / 16:
        return f"vertex radius error {err}"
    if not np.all(tetmesh.boundary_edge_counts(mesh) == 2):
        return "sphere mesh is not watertight"
    grid.sdf = grid.sdf * 4.0
    scaled = tetmesh.marching_tets(grid)
    if not (np.array_equal(mesh.vertices, scaled.vertices)
            and np.array_equal(mesh.faces, scaled.faces)):
        return "extraction not invariant to SDF scaling"
    return None


def _check_compositing():
    pol = CameraPolicy(width=12, height=12)
    cam = pol.pose(25.0, 10.0)
    rng = np.random.default_rng(17)
    dens = fields.Grid3(6, 1, rng.normal(size=(6, 6, 6, 1)))
    col = fields.Grid3(6, 3, rng.uniform(0, 1, (6, 6, 6, 3)))
    img, state = volume.render(dens, col, cam, 24, background=(0.3, 0.3, 0.3))
    if np.abs(state.weight_residual() - 1.0).max() > 1e-6:
        return "compositing weights do not telescope to 1"
    empty = fields.Grid3.full(6, 1, -30.0)
    img2, _ = volume.render(empty, col, cam, 24, background=(0.3, 0.3, 0.3))
    if np.abs(img2.pixels - 0.3).max() > 1e-6:
        return "empty volume does not return the background"
    return None


def _check_raster_normals():
    from .rasterize import rasterize
    verts = np.array([[-0.4, -0.4, 0.0], [0.4, -0.4, 0.0], [0.4, 0.4, 0.0],
                      [-0.4, 0.4, 0.0]])
    mesh = tetmesh.SurfaceMesh(verts, np.array([[0, 1, 2], [0, 2, 3]]))
    mesh.normals = np.tile([0.0, 0.0, 1.0], (4, 1))
    tex = fields.Grid3.full(4, 3, 0.5)
    pol = CameraPolicy(width=16, height=16)
    out = rasterize(mesh, tex, pol.pose(0.0, 0.0))
    center = out.normal_map.pixels[8, 8]
    if np.abs(center - [0.5, 0.5, 1.0]).max() > 1e-6:
        return f"facing normal maps to {center}"
    return None


def _check_relative_pose():
    pol = CameraPolicy()
    a = pol.pose(40.0, 10.0)
    if not np.allclose(apply_relative(a, RelativePose.identity()).rotation, a.rotation):
        return "identity relative pose changes the camera"
    b = pol.pose(170.0, -5.0)
    rel = solve_relative(a, b)
    c = apply_relative(a, rel)
    if not (np.allclose(c.rotation, b.rotation, atol=1e-9)
            and np.allclose(c.position, b.position, atol=1e-9)):
        return "solve_relative does not invert apply_relative"
    return None


CHECKS = [
    ("trilinear-weights", _check_trilinear_weights),
    ("trilinear-adjoint", _check_trilinear_adjoint),
    ("grid3-roundtrip", _check_grid_roundtrip),
    ("noise-schedule", _check_schedule),
    ("delta-oracle-identity", _check_delta_oracle),
    ("codec-adjoint", _check_codec_adjoint),
    ("prompt-embedder", _check_embedder),
    ("tet-volumes", _check_tet_volumes),
    ("marching-tets-sphere", _check_marching_tets),
    ("volume-compositing", _check_compositing),
    ("raster-normals", _check_raster_normals),
    ("relative-pose", _check_relative_pose),
]


def run_checks(echo=print) -> bool:
    """Run every invariant check; returns True when all pass."""
    all_ok = True
    for name, fn in CHECKS:
        try:
            detail = fn()
        except Exception as exc:  # a crash is a failure, not an abort
            detail = f"raised {type(exc).__name__}: {exc}"
        ok = detail is None
        all_ok &= ok
        echo(f"{'PASS' if ok else 'FAIL'} {name}" + ("" if ok else f" ({detail})"))
    return all_ok
