"""distill3d: two-stage score-distillation 3D synthesis at desk scale.

Stage 1 optimizes a voxel NeRF against a view-conditioned denoiser; stage 2
refines a tetrahedral mesh's geometry and texture against image-prompt
conditioned denoisers. All denoisers sit behind one interface, with exact
analytic oracles in-process and an HTTP bridge for external models.
"""

from .camera import (CameraPolicy, CameraPose, RelativePose, apply_relative,
                     look_at_pose, sample_camera, solve_relative)
from .codec import Latent, decode, encode, encode_adjoint
from .config import PipelineConfig, load_config
from .denoisers import (DenoiserCondition, delta_target_denoiser, image_prompt_oracle,
                        zero123_oracle)
from .distill import (ArrayRenderState, DistillStepReport, MeshRenderState,
                      NerfRenderState, ipsd_geo_grad, ipsd_tex_grad, sds_grad,
                      vsd_grad, zero123_sds_grad)
from .errors import (BridgeProtocolError, BridgeTransportError, ConfigError,
                     DegenerateGeometryError, Distill3DError, NoSurfaceError,
                     StaleStateError)
from .fields import (FieldSample, Grid3, grid_gradient_field, load_grid3,
                     sample_trilinear, sample_trilinear_backward, save_grid3)
from .images import Image, load_png, psnr, save_png
from .pipeline import (Stage1Result, Stage2Result, StageCheckpoint, generate,
                       load_checkpoint, nerf_to_tetgrid, run_stage1, run_stage2,
                       save_checkpoint)
from .prompts import (GeometryPromptDifference, ImagePromptEmbedding,
                      PatchEmbeddingDecoder, compensate, embed_image,
                      geometry_prompt_difference, normal_from_rgb)
from .rasterize import RasterOutput, rasterize_backward
from .residual import ResidualScoreModel, train_residual_step
from .scenes import AnalyticScene, BoxSpec, SphereSpec, ellipsoid_sdf, sphere_sdf
from .schedule import (NoiseSchedule, TimestepSample, add_noise, linear_schedule,
                       sample_timestep)
from .tetmesh import (SurfaceMesh, TetGrid, build_tet_grid, export_mesh, load_obj,
                      marching_tets, marching_tets_backward, vertex_normals,
                      vertex_normals_backward)
from .volume import render, render_backward

__version__ = "0.1.0"
