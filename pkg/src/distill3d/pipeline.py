"""Two-stage orchestration: coarse NeRF training, NeRF-to-tet handoff, then
mesh geometry and texture refinement; checkpointing and artifact emission.

Stage 1 distills a view-conditioned denoiser into the density/color grids
from random viewpoints. Stage 2 converts the trained density into a tet-grid
SDF, refines geometry against the normal-image prompt embedding, then
texture against the color prompt embedding with per-step view compensation.

Determinism contract: with ``workers`` = 1 and a fixed seed, every artifact
(checkpoints, meshes, metrics) is bit-identical across runs; wall-clock
timings are therefore kept out of the metrics file unless explicitly
requested.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import distill
from .camera import CameraPolicy, CameraPose, sample_camera, solve_relative
from .codec import latent_shape_for
from .config import PipelineConfig
from .denoisers import image_prompt_oracle, zero123_oracle
from .errors import ConfigError, Distill3DError, NoSurfaceError
from .fields import Grid3, load_grid3, sample_trilinear, save_grid3
from .images import Image, load_png, save_png
from .optim import Adam
from .prompts import (ImagePromptEmbedding, PatchEmbeddingDecoder, embed_image,
                      geometry_prompt_difference, normal_from_rgb)
from .rasterize import rasterize
from .scenes import AnalyticScene, BoxSpec, SphereSpec
from .schedule import NoiseSchedule, linear_schedule
from .tetmesh import SurfaceMesh, TetGrid, build_tet_grid, export_mesh, marching_tets
from .volume import render, softplus

log = logging.getLogger(__name__)

TURNTABLE_VIEWS = 8
NERF_PROVENANCE = "nerf_to_tetgrid"


# ---------------------------------------------------------------------------
# Construction helpers.
# ---------------------------------------------------------------------------

def build_scene(cfg: PipelineConfig) -> AnalyticScene:
    sc = cfg.scene
    boxes = [BoxSpec(tuple(b["lo"]), tuple(b["hi"]), tuple(b["color"]))
             for b in sc.boxes]
    sphere = None
    if sc.sphere_radius and sc.sphere_radius > 0:
        sphere = SphereSpec(radius=sc.sphere_radius, split_axis=sc.split_axis,
                            color_pos=tuple(sc.color_pos), color_neg=tuple(sc.color_neg))
    return AnalyticScene(sphere=sphere, boxes=boxes, background=tuple(sc.background),
                         supersample=sc.supersample)


def make_schedule(cfg: PipelineConfig) -> NoiseSchedule:
    s = cfg.schedule
    return linear_schedule(s.num_steps, s.beta_start, s.beta_end)


def _stage1_denoiser(cfg: PipelineConfig, schedule: NoiseSchedule, default_cam: CameraPose):
    den = cfg.stage1.denoiser
    if den.kind == "zero123_oracle":
        return zero123_oracle(build_scene(cfg), default_cam, schedule, cfg.stage1.codec)
    from .bridge import remote_denoiser
    return remote_denoiser(den.resolved_endpoint(), kind="zero123")


def _stage2_denoiser(cfg: PipelineConfig, schedule: NoiseSchedule,
                     latent_shape: tuple[int, int, int]):
    den = cfg.stage2.denoiser
    if den.kind == "image_prompt_oracle":
        return image_prompt_oracle(PatchEmbeddingDecoder(cfg.stage2.patches, latent_shape),
                                   schedule)
    from .bridge import remote_denoiser
    return remote_denoiser(den.resolved_endpoint(), kind="image_prompt")


def default_iso(ray_steps: int) -> float:
    """Density level where one reference ray step turns half opaque."""
    delta_ref = 2.0 * np.sqrt(3.0) / ray_steps
    return float(np.log(2.0) / delta_ref)


# ---------------------------------------------------------------------------
# Checkpoints.
# ---------------------------------------------------------------------------

@dataclass
class StageCheckpoint:
    tag: str                      # nerf | geometry | texture
    iteration: int
    grids: dict                   # name -> Grid3
    tet: TetGrid | None
    opt_state: dict               # name -> array
    rng_state: dict
    extra: dict


def save_checkpoint(ckpt: StageCheckpoint, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, grid in ckpt.grids.items():
        save_grid3(grid, directory / f"{name}.grid3")
    arrays = dict(ckpt.opt_state)
    if ckpt.tet is not None:
        arrays["tet__sdf"] = ckpt.tet.sdf
        arrays["tet__deform"] = ckpt.tet.deform
    np.savez(directory / "state.npz", **arrays)
    meta = {
        "tag": ckpt.tag,
        "iteration": ckpt.iteration,
        "grids": sorted(ckpt.grids),
        "rng_state": _jsonable_rng(ckpt.rng_state),
        "tet_resolution": None if ckpt.tet is None else ckpt.tet.resolution,
        "tet_provenance": None if ckpt.tet is None else ckpt.tet.provenance,
        "extra": {k: _jsonable(v) for k, v in ckpt.extra.items()},
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=1))
    return directory


def load_checkpoint(directory) -> StageCheckpoint:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.is_file():
        raise ConfigError(f"not a checkpoint directory (missing meta.json): {directory}")
    meta = json.loads(meta_path.read_text())
    grids = {name: load_grid3(directory / f"{name}.grid3") for name in meta["grids"]}
    arrays = {}
    npz_path = directory / "state.npz"
    if npz_path.is_file():
        with np.load(npz_path) as payload:
            arrays = {k: payload[k].copy() for k in payload.files}
    tet = None
    if meta.get("tet_resolution"):
        tet = build_tet_grid(meta["tet_resolution"])
        tet.sdf = arrays.pop("tet__sdf")
        tet.deform = arrays.pop("tet__deform")
        tet.provenance = meta.get("tet_provenance") or "manual"
    return StageCheckpoint(tag=meta["tag"], iteration=int(meta["iteration"]),
                           grids=grids, tet=tet, opt_state=arrays,
                           rng_state=meta["rng_state"], extra=meta.get("extra", {}))


def _jsonable_rng(state: dict) -> dict:
    return json.loads(json.dumps(state, default=int))


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.integer, np.floating)):
        return v.item()
    return v


def _restore_rng(state: dict) -> np.random.Generator:
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = state
    return gen


def _stage_rng(seed: int, stream: int) -> np.random.Generator:
    root = np.random.SeedSequence(seed)
    children = root.spawn(4)
    return np.random.Generator(np.random.PCG64(children[stream]))


# ---------------------------------------------------------------------------
# Metrics.
# ---------------------------------------------------------------------------

class MetricsWriter:
    """Append-only JSON-lines metrics file; timings only when requested."""

    def __init__(self, path, include_timing: bool, append: bool = False):
        self.path = Path(path)
        self.include_timing = include_timing
        self._fh = open(self.path, "a" if append else "w")

    def write(self, report: distill.DistillStepReport, step: int, stage: str,
              extra: dict | None = None) -> None:
        distill.write_report_line(self._fh, report, step, stage,
                                  self.include_timing, extra)
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _check_finite(name_arrays: dict, last_report) -> None:
    for name, arr in name_arrays.items():
        if not np.all(np.isfinite(arr)):
            raise Distill3DError(
                f"non-finite values in {name!r}; last step report: "
                f"{None if last_report is None else last_report.to_json_dict()}")


# ---------------------------------------------------------------------------
# Stage 1.
# ---------------------------------------------------------------------------

@dataclass
class Stage1Result:
    density: Grid3
    color: Grid3
    checkpoint_dir: Path
    holdout_mse: list


def run_stage1(cfg: PipelineConfig, out_dir, resume=None) -> Stage1Result:
    """Coarse NeRF optimization against the view-conditioned denoiser."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    s1 = cfg.stage1
    schedule = make_schedule(cfg)
    policy = cfg.camera.policy(s1.render_size, s1.render_size)
    default_cam = policy.default_pose()
    denoiser = _stage1_denoiser(cfg, schedule, default_cam)
    reference = load_png(cfg.image)
    scene = build_scene(cfg)

    holdout_cam = policy.pose(s1.holdout_azimuth, s1.holdout_elevation)
    holdout_target = scene.render(holdout_cam)

    start_iter = 0
    if resume is not None:
        ckpt = resume if isinstance(resume, StageCheckpoint) else load_checkpoint(resume)
        if ckpt.tag != "nerf":
            raise ConfigError(f"stage1 resume needs a 'nerf' checkpoint, got {ckpt.tag!r}")
        density, color = ckpt.grids["density"], ckpt.grids["color"]
        rng = _restore_rng(ckpt.rng_state)
        start_iter = ckpt.iteration
        opt = Adam({"density": density.values, "color": color.values},
                   {"density": s1.lr_density, "color": s1.lr_color})
        if ckpt.opt_state:
            opt.load_state_dict(ckpt.opt_state)
    else:
        density = Grid3.full(s1.grid_resolution, 1, s1.density_init)
        color = Grid3.full(s1.grid_resolution, 3, s1.color_init)
        rng = _stage_rng(cfg.seed, 0)
        opt = Adam({"density": density.values, "color": color.values},
                   {"density": s1.lr_density, "color": s1.lr_color})

    if start_iter >= s1.iters:
        ckpt_dir = out_dir / "checkpoints" / "stage1_final"
        return Stage1Result(density, color, ckpt_dir, [])

    holdout_mse = []
    append_metrics = start_iter > 0
    with MetricsWriter(out_dir / "metrics.jsonl", include_timing=cfg.workers > 1,
                       append=append_metrics) as metrics:
        hold = int(s1.lr_hold * s1.iters)
        for it in range(start_iter, s1.iters):
            # Full lr while the shape forms, then exponential decay so the
            # tail freezes (keeps the held-out error monotone under averaging).
            frac = max(0, it - hold) / max(s1.iters - 1 - hold, 1)
            decay = s1.lr_decay ** frac
            opt.set_lr("density", s1.lr_density * decay)
            opt.set_lr("color", s1.lr_color * decay)

            grads = None
            report = None
            for _ in range(s1.batch):
                cam = sample_camera(rng, policy)
                rel = solve_relative(default_cam, cam)
                state = distill.NerfRenderState(density, color, cam, s1.ray_steps,
                                                codec=s1.codec, background=s1.background,
                                                rng=rng if s1.jitter_rays else None,
                                                workers=cfg.workers)
                g, report = distill.zero123_sds_grad(
                    state, denoiser, reference, rel, schedule, rng,
                    weighting=cfg.schedule.weighting, t_range=cfg.schedule.t_range)
                if grads is None:
                    grads = g
                else:
                    for k in grads:
                        grads[k] += g[k]
            if s1.batch > 1:
                for k in grads:
                    grads[k] /= s1.batch
                report.extras["batch"] = s1.batch
            opt.step(grads)
            _check_finite({"density": density.values, "color": color.values}, report)

            extra = {}
            if s1.eval_every and (it % s1.eval_every == 0 or it == s1.iters - 1):
                ho_img, _ = render(density, color, holdout_cam, s1.ray_steps,
                                   background=s1.background, workers=cfg.workers)
                mse = ho_img.mse(holdout_target)
                holdout_mse.append(mse)
                extra["holdout_mse"] = mse
            metrics.write(report, step=it, stage="nerf", extra=extra)

            if s1.preview_every and (it + 1) % s1.preview_every == 0:
                img, _ = render(density, color, default_cam, s1.ray_steps,
                                background=s1.background, workers=cfg.workers)
                save_png(img, out_dir / f"stage1_preview_{it + 1:05d}.png")
            if s1.checkpoint_every and (it + 1) % s1.checkpoint_every == 0 \
                    and (it + 1) < s1.iters:
                _save_stage1_ckpt(out_dir / "checkpoints" / f"stage1_iter{it + 1:05d}",
                                  density, color, opt, rng, it + 1)

    emit_turntable(out_dir, "stage1_turntable", policy,
                   lambda cam: render(density, color, cam, s1.ray_steps,
                                      background=s1.background, workers=cfg.workers)[0])
    ckpt_dir = _save_stage1_ckpt(out_dir / "checkpoints" / "stage1_final",
                                 density, color, opt, rng, s1.iters)
    return Stage1Result(density, color, ckpt_dir, holdout_mse)


def _save_stage1_ckpt(directory, density, color, opt, rng, iteration) -> Path:
    return save_checkpoint(StageCheckpoint(
        tag="nerf", iteration=iteration,
        grids={"density": density, "color": color},
        tet=None, opt_state=opt.state_dict(),
        rng_state=rng.bit_generator.state, extra={}), directory)


# ---------------------------------------------------------------------------
# Handoff.
# ---------------------------------------------------------------------------

def nerf_to_tetgrid(density: Grid3, tet_resolution: int, iso: float) -> TetGrid:
    """Initialize a tet grid whose SDF is the iso-shifted activated density.

    Negative inside: s_i = iso - softplus(density(v_i)).
    """
    grid = build_tet_grid(tet_resolution)
    sampled = sample_trilinear(density, grid.vertices)[:, 0]
    grid.sdf = iso - softplus(sampled)
    if np.all(grid.sdf > 0) or np.all(grid.sdf < 0):
        raise NoSurfaceError(f"no surface at iso={iso:.4g}: density never crosses the level")
    grid.provenance = NERF_PROVENANCE
    return grid


# ---------------------------------------------------------------------------
# Stage 2.
# ---------------------------------------------------------------------------

@dataclass
class Stage2Result:
    mesh: SurfaceMesh
    texture: Grid3
    tet: TetGrid
    obj_path: Path
    ply_path: Path


def run_stage2(cfg: PipelineConfig, tet: TetGrid, texture: Grid3, out_dir,
               resume=None) -> Stage2Result:
    """Geometry refinement (phase A) then texture refinement (phase B)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    s2 = cfg.stage2
    if tet.provenance != NERF_PROVENANCE and not s2.allow_manual_grid:
        raise ConfigError(
            "run_stage2 requires a tet grid produced by nerf_to_tetgrid "
            "(set stage2.allow_manual_grid to override)")
    schedule = make_schedule(cfg)
    policy = cfg.camera.policy(s2.render_size, s2.render_size)
    default_cam = policy.default_pose()
    latent_shape = latent_shape_for(s2.codec, s2.render_size, s2.render_size)
    denoiser = _stage2_denoiser(cfg, schedule, latent_shape)
    text_y = cfg.text_embedding_array

    reference = load_png(cfg.image)
    normal_ref = load_png(cfg.normal_image) if cfg.normal_image else normal_from_rgb(reference)
    y_rgb = embed_image(reference, s2.patches)
    y_n = embed_image(normal_ref, s2.patches)

    geo_done, tex_done = 0, 0
    rng = _stage_rng(cfg.seed, 1)
    opt_geo = opt_tex = None
    y_n_def_vec = None
    if resume is not None:
        ckpt = resume if isinstance(resume, StageCheckpoint) else load_checkpoint(resume)
        if ckpt.tag not in ("geometry", "texture"):
            raise ConfigError(f"stage2 resume needs a geometry/texture checkpoint, got {ckpt.tag!r}")
        tet = ckpt.tet
        texture = ckpt.grids["texture"]
        rng = _restore_rng(ckpt.rng_state)
        if ckpt.tag == "geometry":
            geo_done = ckpt.iteration
            opt_geo = _geo_optimizer(tet, s2)
            opt_geo.load_state_dict(ckpt.opt_state)
        else:
            geo_done = s2.geometry_iters
            tex_done = ckpt.iteration
            opt_tex = _tex_optimizer(tet, texture, s2)
            opt_tex.load_state_dict(ckpt.opt_state)
            if "y_n_def" in ckpt.extra and ckpt.extra["y_n_def"] is not None:
                y_n_def_vec = np.asarray(ckpt.extra["y_n_def"], dtype=np.float64)

    metrics = MetricsWriter(out_dir / "metrics.jsonl", include_timing=cfg.workers > 1,
                            append=True)
    try:
        _run_stage2_phases(cfg, s2, tet, texture, rng, metrics, out_dir, policy,
                           default_cam, denoiser, schedule, y_rgb, y_n, text_y,
                           geo_done, tex_done, opt_geo, opt_tex, y_n_def_vec)
    finally:
        metrics.close()

    mesh = marching_tets(tet)
    if mesh.is_empty():
        raise Distill3DError("degenerate geometry: final extraction is empty")
    obj_path = out_dir / "mesh.obj"
    ply_path = out_dir / "mesh.ply"
    colors = np.clip(sample_trilinear(texture, mesh.vertices), 0.0, 1.0)
    export_mesh(mesh, obj_path, colors=colors, path_ply=ply_path)
    emit_turntable(out_dir, "turntable", policy,
                   lambda cam: rasterize(mesh, texture, cam, background=s2.background).rgb)
    return Stage2Result(mesh, texture, tet, obj_path, ply_path)


def _run_stage2_phases(cfg, s2, tet, texture, rng, metrics, out_dir, policy,
                       default_cam, denoiser, schedule, y_rgb, y_n, text_y,
                       geo_done, tex_done, opt_geo, opt_tex, y_n_def_vec):
    # Phase A: geometry via the normal-map prompt.
    if geo_done < s2.geometry_iters:
        if opt_geo is None:
            opt_geo = _geo_optimizer(tet, s2)
        for it in range(geo_done, s2.geometry_iters):
            decay = s2.lr_decay ** (it / max(s2.geometry_iters - 1, 1))
            opt_geo.set_lr("sdf", s2.lr_sdf * decay)
            opt_geo.set_lr("deform", s2.lr_deform * decay)
            grads = None
            report = None
            for _ in range(s2.batch):
                cam = sample_camera(rng, policy)
                state = distill.MeshRenderState(tet, texture, cam, channel="normal",
                                                codec=s2.codec, background=s2.background)
                g, report = distill.ipsd_geo_grad(
                    state, denoiser, y_n, text_y, schedule, rng,
                    weighting=cfg.schedule.weighting, t_range=cfg.schedule.t_range)
                if grads is None:
                    grads = g
                else:
                    for k in grads:
                        grads[k] += g[k]
            if s2.batch > 1:
                for k in grads:
                    grads[k] /= s2.batch
                report.extras["batch"] = s2.batch
            opt_geo.step(grads)
            tet.clamp_deform()
            _check_finite({"sdf": tet.sdf, "deform": tet.deform}, report)
            metrics.write(report, step=it, stage="geometry")
            if s2.checkpoint_every and (it + 1) % s2.checkpoint_every == 0 \
                    and (it + 1) < s2.geometry_iters:
                _save_stage2_ckpt(out_dir / "checkpoints" / f"geometry_iter{it + 1:05d}",
                                  "geometry", it + 1, tet, texture, opt_geo, rng, None)
        _save_stage2_ckpt(out_dir / "checkpoints" / "geometry_final", "geometry",
                          s2.geometry_iters, tet, texture, opt_geo, rng, None)

    # Phase B: texture via the view-compensated color prompt.
    if tex_done < s2.texture_iters:
        if opt_tex is None:
            opt_tex = _tex_optimizer(tet, texture, s2)
        for it in range(tex_done, s2.texture_iters):
            decay = s2.lr_decay ** (it / max(s2.texture_iters - 1, 1))
            opt_tex.set_lr("texture", s2.lr_texture * decay)
            opt_tex.set_lr("sdf", s2.lr_sdf * s2.geometry_lr_scale * decay)
            opt_tex.set_lr("deform", s2.lr_deform * s2.geometry_lr_scale * decay)
            mesh = marching_tets(tet)
            if mesh.is_empty():
                raise Distill3DError("degenerate geometry: empty mesh during texture phase")
            if y_n_def_vec is None or it % s2.delta_refresh == 0:
                def_raster = rasterize(mesh, texture, default_cam, background=s2.background)
                y_n_def_vec = embed_image(def_raster.normal_map, s2.patches).vector

            grads = None
            report = None
            for _ in range(s2.batch):
                cam = sample_camera(rng, policy)
                view_key = tuple(np.round(cam.position, 9))
                state = distill.MeshRenderState(tet, texture, cam, channel="rgb",
                                                codec=s2.codec, background=s2.background,
                                                include_geometry=s2.geometry_in_texture,
                                                mesh=mesh, view_key=view_key)
                y_n_ran = embed_image(state.raster.normal_map, s2.patches)
                y_n_def = ImagePromptEmbedding(y_n_def_vec, y_n_ran.patches,
                                               y_n_ran.source_size)
                delta = geometry_prompt_difference(y_n_ran, y_n_def, view_key=view_key)
                g, report = distill.ipsd_tex_grad(
                    state, denoiser, y_rgb, delta, text_y, schedule, rng,
                    weighting=cfg.schedule.weighting, t_range=cfg.schedule.t_range)
                if grads is None:
                    grads = g
                else:
                    for k in grads:
                        grads[k] += g[k]
            if s2.batch > 1:
                for k in grads:
                    grads[k] /= s2.batch
                report.extras["batch"] = s2.batch
            opt_tex.step(grads)
            tet.clamp_deform()
            _check_finite({"sdf": tet.sdf, "deform": tet.deform,
                           "texture": texture.values}, report)
            metrics.write(report, step=it, stage="texture")
            if s2.checkpoint_every and (it + 1) % s2.checkpoint_every == 0 \
                    and (it + 1) < s2.texture_iters:
                _save_stage2_ckpt(out_dir / "checkpoints" / f"texture_iter{it + 1:05d}",
                                  "texture", it + 1, tet, texture, opt_tex, rng, y_n_def_vec)
    if opt_tex is not None:
        _save_stage2_ckpt(out_dir / "checkpoints" / "texture_final", "texture",
                          s2.texture_iters, tet, texture, opt_tex, rng, y_n_def_vec)


def _geo_optimizer(tet: TetGrid, s2) -> Adam:
    return Adam({"sdf": tet.sdf, "deform": tet.deform},
                {"sdf": s2.lr_sdf, "deform": s2.lr_deform})


def _tex_optimizer(tet: TetGrid, texture: Grid3, s2) -> Adam:
    return Adam({"texture": texture.values, "sdf": tet.sdf, "deform": tet.deform},
                {"texture": s2.lr_texture,
                 "sdf": s2.lr_sdf * s2.geometry_lr_scale,
                 "deform": s2.lr_deform * s2.geometry_lr_scale})


def _save_stage2_ckpt(directory, tag, iteration, tet, texture, opt, rng, y_n_def):
    return save_checkpoint(StageCheckpoint(
        tag=tag, iteration=iteration, grids={"texture": texture}, tet=tet,
        opt_state=opt.state_dict(), rng_state=rng.bit_generator.state,
        extra={"y_n_def": None if y_n_def is None else np.asarray(y_n_def)}),
        directory)


# ---------------------------------------------------------------------------
# Full run + shared artifact helpers.
# ---------------------------------------------------------------------------

def emit_turntable(out_dir, prefix: str, policy: CameraPolicy, render_fn,
                   views: int = TURNTABLE_VIEWS) -> list:
    paths = []
    for i in range(views):
        az = 360.0 * i / views
        cam = policy.pose(az, policy.default_elevation)
        img = render_fn(cam)
        path = Path(out_dir) / f"{prefix}_{i:02d}.png"
        save_png(img, path)
        paths.append(path)
    return paths


def generate(cfg: PipelineConfig) -> Stage2Result:
    """Full two-stage run: stage 1, handoff, stage 2."""
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stage1 = run_stage1(cfg, out_dir)
    iso = cfg.stage2.iso if cfg.stage2.iso is not None else default_iso(cfg.stage1.ray_steps)
    tet = nerf_to_tetgrid(stage1.density, cfg.stage2.tet_resolution, iso)
    texture = stage1.color.copy()
    return run_stage2(cfg, tet, texture, out_dir)
