"""Score-distillation gradient rules.

Each rule samples one (t, noise) pair, asks a frozen denoiser for its
noise prediction on the noised render latent, and chains the weighted
residual back through the codec adjoint and the relevant renderer into
the scene parameters:

* ``sds_grad``          - plain noise-residual distillation.
* ``vsd_grad``          - residual against a trainable score model, whose
                          denoising objective is stepped after each call.
* ``zero123_sds_grad``  - view-conditioned distillation for the coarse stage.
* ``ipsd_geo_grad``     - image-prompt distillation of mesh normal renders
                          into the SDF and vertex deformations.
* ``ipsd_tex_grad``     - image-prompt distillation of mesh color renders
                          into the texture field (and optionally geometry),
                          with the view-compensated prompt embedding.

No rule ever writes into a denoiser; the residual score model changes
only through its own training step. Gradients are clipped at a global
norm of ``GRAD_CLIP_NORM`` before being returned.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraPose, RelativePose, apply_relative, poses_close
from .codec import Latent, encode, encode_adjoint
from .denoisers import DenoiserCondition
from .errors import DegenerateGeometryError, StaleStateError
from .fields import Grid3
from .images import Image
from .optim import clip_global_norm
from .prompts import GeometryPromptDifference, ImagePromptEmbedding, compensate
from .rasterize import RasterOutput, rasterize, rasterize_backward
from .residual import ResidualScoreModel, train_residual_step
from .schedule import (DEFAULT_T_RANGE, DEFAULT_WEIGHTING, NoiseSchedule, add_noise,
                       sample_timestep)
from .tetmesh import (SurfaceMesh, TetGrid, marching_tets, marching_tets_backward,
                      vertex_normals_backward)
from .volume import VolumeRenderState, render, render_backward

GRAD_CLIP_NORM = 10.0


@dataclass
class DistillStepReport:
    """What one distillation step did, for metrics and cost comparisons."""

    rule: str
    t: int
    weight: float
    residual_norm: float
    duration_ms: float
    grad_norms: dict[str, float]
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (np.isfinite(self.residual_norm) and np.isfinite(self.weight)):
            raise ValueError("report entries must be finite")
        if self.duration_ms <= 0:
            raise ValueError("report duration must be positive")

    def to_json_dict(self, include_timing: bool = True) -> dict:
        row = {
            "rule": self.rule,
            "t": self.t,
            "weight": self.weight,
            "residual_norm": self.residual_norm,
            "grad_norms": {k: float(v) for k, v in sorted(self.grad_norms.items())},
        }
        if include_timing:
            row["duration_ms"] = self.duration_ms
        row.update(self.extras)
        return row


def write_report_line(fh, report: DistillStepReport, step: int, stage: str,
                      include_timing: bool, extra: dict | None = None) -> None:
    row = {"step": step, "stage": stage}
    row.update(report.to_json_dict(include_timing=include_timing))
    if extra:
        row.update(extra)
    fh.write(json.dumps(row) + "\n")


# ---------------------------------------------------------------------------
# Render states: a render plus its latent and a backward channel to parameters.
# ---------------------------------------------------------------------------

class NerfRenderState:
    """Volume render of the density/color grids, encoded into latent space."""

    def __init__(self, density: Grid3, color: Grid3, cam: CameraPose, steps: int,
                 codec: str = "identity", background=(1.0, 1.0, 1.0),
                 rng: np.random.Generator | None = None, workers: int = 1):
        self.density = density
        self.color = color
        self.cam = cam
        self.codec = codec
        image, vol_state = render(density, color, cam, steps, background=background,
                                  rng=rng, workers=workers)
        self.image: Image = image
        self._vol_state: VolumeRenderState = vol_state
        self.latent: Latent = encode(image, codec)

    @property
    def param_groups(self) -> tuple[str, ...]:
        return ("density", "color")

    def backward_latent(self, latent_grad: np.ndarray) -> dict[str, np.ndarray]:
        img_grad = encode_adjoint(latent_grad, self.codec,
                                  (self.cam.height, self.cam.width))
        d_density, d_color = render_backward(self._vol_state, img_grad)
        return {"density": d_density, "color": d_color}


class MeshRenderState:
    """Raster render of the extracted mesh: ``channel`` picks rgb or normal."""

    def __init__(self, tet_grid: TetGrid, texture: Grid3, cam: CameraPose,
                 channel: str = "rgb", codec: str = "identity",
                 background=(1.0, 1.0, 1.0), include_geometry: bool = True,
                 mesh: SurfaceMesh | None = None, view_key: tuple | None = None):
        if channel not in ("rgb", "normal"):
            raise ValueError(f"channel must be 'rgb' or 'normal', got {channel!r}")
        self.tet_grid = tet_grid
        self.texture = texture
        self.cam = cam
        self.channel = channel
        self.codec = codec
        self.include_geometry = include_geometry
        self.view_key = view_key
        self.mesh = mesh if mesh is not None else marching_tets(tet_grid)
        if self.mesh.is_empty():
            raise DegenerateGeometryError(
                "degenerate geometry: surface extraction produced an empty mesh")
        self.raster: RasterOutput = rasterize(self.mesh, texture, cam, background=background)
        self.image: Image = self.raster.rgb if channel == "rgb" else self.raster.normal_map
        self.latent: Latent = encode(self.image, codec)

    @property
    def param_groups(self) -> tuple[str, ...]:
        if self.channel == "normal":
            return ("sdf", "deform")
        return ("texture", "sdf", "deform") if self.include_geometry else ("texture",)

    def backward_latent(self, latent_grad: np.ndarray) -> dict[str, np.ndarray]:
        img_grad = encode_adjoint(latent_grad, self.codec,
                                  (self.cam.height, self.cam.width))
        if self.channel == "rgb":
            d_tex, d_pos, _ = rasterize_backward(self.raster, upstream_rgb=img_grad)
            grads = {"texture": d_tex}
            if self.include_geometry:
                d_sdf, d_deform = marching_tets_backward(self.tet_grid, self.mesh, d_pos)
                grads["sdf"] = d_sdf
                grads["deform"] = d_deform
            return grads
        _, _, d_norm = rasterize_backward(self.raster, upstream_normal=img_grad)
        d_verts = vertex_normals_backward(self.mesh, d_norm)
        d_sdf, d_deform = marching_tets_backward(self.tet_grid, self.mesh, d_verts)
        return {"sdf": d_sdf, "deform": d_deform}


class ArrayRenderState:
    """Identity generator: the latent *is* the parameter tensor (test fixture)."""

    def __init__(self, params: np.ndarray, codec: str = "identity"):
        self.params = np.asarray(params, dtype=np.float64)
        self.latent = Latent(self.params.copy(), codec)

    @property
    def param_groups(self) -> tuple[str, ...]:
        return ("params",)

    def backward_latent(self, latent_grad: np.ndarray) -> dict[str, np.ndarray]:
        return {"params": np.asarray(latent_grad, dtype=np.float64).copy()}


# ---------------------------------------------------------------------------
# The gradient rules.
# ---------------------------------------------------------------------------

def _distill_core(rule: str, render_state, predict, schedule: NoiseSchedule,
                  rng: np.random.Generator, weighting: str, t_range,
                  extras: dict | None = None):
    t0 = time.perf_counter()
    z = render_state.latent.tensor
    ts = sample_timestep(schedule, z.shape, rng, t_range=t_range, weighting=weighting)
    z_t = add_noise(z, ts, schedule)
    eps_hat, eps_ref = predict(z_t, ts)
    upstream = ts.weight * (eps_hat - eps_ref)
    grads = render_state.backward_latent(upstream)
    clip_global_norm(grads, GRAD_CLIP_NORM)
    duration_ms = max((time.perf_counter() - t0) * 1e3, 1e-6)
    report = DistillStepReport(
        rule=rule, t=ts.t, weight=ts.weight,
        residual_norm=float(np.linalg.norm(eps_hat - eps_ref)),
        duration_ms=duration_ms,
        grad_norms={k: float(np.linalg.norm(g)) for k, g in grads.items()},
        extras=extras or {})
    return grads, report


def sds_grad(render_state, denoiser, cond: DenoiserCondition, schedule: NoiseSchedule,
             rng: np.random.Generator, weighting: str = DEFAULT_WEIGHTING,
             t_range=DEFAULT_T_RANGE):
    """Eq.-style plain score distillation against a frozen denoiser."""
    def predict(z_t, ts):
        return denoiser.predict(z_t, ts.t, cond), ts.eps
    return _distill_core("sds", render_state, predict, schedule, rng, weighting, t_range)


def vsd_grad(render_state, base_denoiser, residual_model: ResidualScoreModel,
             cond: DenoiserCondition, schedule: NoiseSchedule,
             rng: np.random.Generator, weighting: str = DEFAULT_WEIGHTING,
             t_range=DEFAULT_T_RANGE, train_ratio: int = 1, phi_lr: float = 1e-3):
    """Variational score distillation: residual against the trainable score
    model, followed by ``train_ratio`` denoising-MSE steps on that model."""
    if cond.camera is None:
        raise ValueError("vsd_grad requires a camera in the condition")

    def predict(z_t, ts):
        return (base_denoiser.predict(z_t, ts.t, cond),
                residual_model.predict(z_t, ts.t, cond))

    grads, report = _distill_core("vsd", render_state, predict, schedule, rng,
                                  weighting, t_range)
    phi_loss = None
    for _ in range(train_ratio):
        phi_loss = train_residual_step(residual_model, render_state.latent.tensor,
                                       cond, schedule, rng, lr=phi_lr, t_range=t_range)
    if phi_loss is not None:
        report.extras["phi_loss"] = phi_loss
    return grads, report


def zero123_sds_grad(nerf_render_state: NerfRenderState, zero123_denoiser,
                     reference: Image, rel: RelativePose, schedule: NoiseSchedule,
                     rng: np.random.Generator, weighting: str = DEFAULT_WEIGHTING,
                     t_range=DEFAULT_T_RANGE):
    """View-conditioned SDS for the coarse stage: the condition carries the
    reference image and the relative pose from the default viewpoint."""
    default_cam = getattr(zero123_denoiser, "default_cam", None)
    if default_cam is not None:
        expected = apply_relative(default_cam, rel)
        if not poses_close(expected, nerf_render_state.cam, tol=1e-6):
            raise StaleStateError(
                "render viewpoint does not match the conditioned relative pose")
    cond = DenoiserCondition(reference_image=reference, relative_pose=rel)

    def predict(z_t, ts):
        return zero123_denoiser.predict(z_t, ts.t, cond), ts.eps

    return _distill_core("zero123_sds", nerf_render_state, predict, schedule, rng,
                         weighting, t_range)


def ipsd_geo_grad(normal_render_state: MeshRenderState, ip_denoiser,
                  y_n: ImagePromptEmbedding, text_embedding: np.ndarray,
                  schedule: NoiseSchedule, rng: np.random.Generator,
                  weighting: str = DEFAULT_WEIGHTING, t_range=DEFAULT_T_RANGE):
    """Image-prompt distillation of the normal render into (sdf, deform)."""
    if normal_render_state.channel != "normal":
        raise ValueError("ipsd_geo_grad needs a normal-channel render state")
    cond = DenoiserCondition(text_embedding=text_embedding, image_prompt=y_n)

    def predict(z_t, ts):
        return ip_denoiser.predict(z_t, ts.t, cond), ts.eps

    return _distill_core("ipsd_geo", normal_render_state, predict, schedule, rng,
                         weighting, t_range)


def ipsd_tex_grad(rgb_render_state: MeshRenderState, ip_denoiser,
                  y_rgb: ImagePromptEmbedding, delta_geo: GeometryPromptDifference,
                  text_embedding: np.ndarray, schedule: NoiseSchedule,
                  rng: np.random.Generator, weighting: str = DEFAULT_WEIGHTING,
                  t_range=DEFAULT_T_RANGE):
    """Image-prompt distillation of the color render, conditioned on the
    view-compensated embedding y_rgb + delta_geo."""
    if rgb_render_state.channel != "rgb":
        raise ValueError("ipsd_tex_grad needs an rgb-channel render state")
    if (delta_geo.view_key is not None and rgb_render_state.view_key is not None
            and delta_geo.view_key != rgb_render_state.view_key):
        raise StaleStateError(
            "delta_geo was computed for a different viewpoint than this render")
    cond = DenoiserCondition(text_embedding=text_embedding,
                             image_prompt=compensate(y_rgb, delta_geo))

    def predict(z_t, ts):
        return ip_denoiser.predict(z_t, ts.t, cond), ts.eps

    return _distill_core("ipsd_tex", rgb_render_state, predict, schedule, rng,
                         weighting, t_range)
