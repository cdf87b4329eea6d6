"""JSON run configuration (schema 1) for the two-stage pipeline."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraPolicy
from .errors import ConfigError
from .schedule import DEFAULT_T_RANGE, DEFAULT_WEIGHTING, WEIGHTING_RULES

SCHEMA_VERSION = 1
BRIDGE_URL_ENV = "DISTILL3D_BRIDGE_URL"

ORACLE_KINDS_STAGE1 = ("zero123_oracle", "bridge")
ORACLE_KINDS_STAGE2 = ("image_prompt_oracle", "bridge")


@dataclass
class ScheduleConfig:
    num_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    t_range: tuple[float, float] = DEFAULT_T_RANGE
    weighting: str = DEFAULT_WEIGHTING

    def validate(self):
        if self.weighting not in WEIGHTING_RULES:
            raise ConfigError(f"unknown weighting {self.weighting!r}")
        if not (0.0 <= self.t_range[0] < self.t_range[1] <= 1.0):
            raise ConfigError(f"invalid t_range {self.t_range}")


@dataclass
class CameraConfig:
    radius: float = 2.2
    fov_y: float = 50.0
    azimuth_range: tuple[float, float] = (0.0, 360.0)
    elevation_range: tuple[float, float] = (-10.0, 45.0)
    default_azimuth: float = 0.0
    default_elevation: float = 15.0

    def policy(self, width: int, height: int) -> CameraPolicy:
        return CameraPolicy(radius=self.radius, fov_y=self.fov_y, width=width,
                            height=height, azimuth_range=tuple(self.azimuth_range),
                            elevation_range=tuple(self.elevation_range),
                            default_azimuth=self.default_azimuth,
                            default_elevation=self.default_elevation)


@dataclass
class SceneConfig:
    """Analytic ground-truth scene backing the view-conditioned oracle."""

    sphere_radius: float = 0.6
    split_axis: int = 2
    color_pos: tuple = (0.85, 0.15, 0.15)
    color_neg: tuple = (0.15, 0.25, 0.85)
    boxes: list = field(default_factory=list)   # [{"lo": [...], "hi": [...], "color": [...]}]
    background: tuple = (1.0, 1.0, 1.0)
    supersample: int = 4


@dataclass
class DenoiserConfig:
    kind: str = "zero123_oracle"
    endpoint: str | None = None

    def validate(self, allowed: tuple, what: str):
        if self.kind not in allowed:
            raise ConfigError(f"{what}: denoiser kind {self.kind!r} not in {allowed}")
        if self.kind == "bridge" and not self.resolved_endpoint():
            raise ConfigError(f"{what}: bridge denoiser needs an endpoint "
                              f"(config or ${BRIDGE_URL_ENV})")

    def resolved_endpoint(self) -> str | None:
        return os.environ.get(BRIDGE_URL_ENV) or self.endpoint


@dataclass
class Stage1Config:
    iters: int = 400
    batch: int = 1                 # (t, eps, camera) draws averaged per step
    grid_resolution: int = 32
    render_size: int = 64
    ray_steps: int = 64
    lr_density: float = 0.25
    lr_color: float = 0.05
    lr_decay: float = 0.1          # final lr fraction at the last iteration
    lr_hold: float = 0.5           # fraction of the run at full lr before decay
    jitter_rays: bool = True       # stratified jitter in training renders
    codec: str = "identity"
    background: tuple = (1.0, 1.0, 1.0)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    holdout_azimuth: float = 222.0
    holdout_elevation: float = 8.0
    eval_every: int = 1
    checkpoint_every: int | None = None
    preview_every: int | None = None
    density_init: float = -3.0
    color_init: float = 0.5

    def validate(self):
        if self.iters < 1:
            raise ConfigError("stage1.iters must be >= 1")
        if self.batch < 1:
            raise ConfigError("stage1.batch must be >= 1")
        if self.grid_resolution < 2:
            raise ConfigError("stage1.grid_resolution must be >= 2")
        if self.ray_steps < 16:
            raise ConfigError("stage1.ray_steps must be >= 16")
        self.denoiser.validate(ORACLE_KINDS_STAGE1, "stage1")


@dataclass
class Stage2Config:
    tet_resolution: int = 32
    geometry_iters: int = 300
    texture_iters: int = 300
    batch: int = 1                   # draws averaged per optimizer step
    render_size: int = 128
    codec: str = "avgpool-2"
    patches: int = 8
    lr_sdf: float = 2e-3
    lr_deform: float = 1e-3
    lr_texture: float = 0.05
    lr_decay: float = 1.0            # final lr fraction within each phase
    geometry_lr_scale: float = 0.1   # geometry lr fraction during the texture phase
    geometry_in_texture: bool = True
    delta_refresh: int = 10          # re-render the default-view normal map every K steps
    iso: float | None = None         # None -> derived from the stage-1 step length
    background: tuple = (1.0, 1.0, 1.0)
    denoiser: DenoiserConfig = field(default_factory=lambda: DenoiserConfig("image_prompt_oracle"))
    allow_manual_grid: bool = False
    checkpoint_every: int | None = None

    def validate(self):
        if self.geometry_iters < 0 or self.texture_iters < 0:
            raise ConfigError("stage2 iteration counts must be >= 0")
        if self.batch < 1:
            raise ConfigError("stage2.batch must be >= 1")
        if not (8 <= self.tet_resolution <= 128):
            raise ConfigError("stage2.tet_resolution must be in [8, 128]")
        if self.delta_refresh < 1:
            raise ConfigError("stage2.delta_refresh must be >= 1")
        if self.patches < 1:
            raise ConfigError("stage2.patches must be >= 1")


@dataclass
class PipelineConfig:
    image: str                      # path to the prompt image I_rgb
    output_dir: str
    normal_image: str | None = None
    seed: int = 0
    workers: int = 1
    text_embedding: list = field(default_factory=lambda: [0.0] * 8)
    scene: SceneConfig = field(default_factory=SceneConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)

    def validate(self):
        for path, what in ((self.image, "image"), (self.normal_image, "normal_image")):
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"{what}: file not found: {path}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        self.schedule.validate()
        self.stage1.validate()
        self.stage2.validate()
        # Camera ranges are validated by CameraPolicy construction.
        self.camera.policy(self.stage1.render_size, self.stage1.render_size)

    @property
    def text_embedding_array(self) -> np.ndarray:
        return np.asarray(self.text_embedding, dtype=np.float64)


def _build(cls, data: dict, what: str):
    fields = {f for f in cls.__dataclass_fields__}
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"{what}: unknown keys {sorted(unknown)}")
    return cls(**data)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data, base_dir=path.parent)


def config_from_dict(data: dict, base_dir: Path | None = None) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    schema = data.pop("schema", None)
    if schema != SCHEMA_VERSION:
        raise ConfigError(f"config schema must be {SCHEMA_VERSION}, got {schema!r}")

    def sub(cls, key, extra=None):
        raw = dict(data.pop(key, {}) or {})
        if extra:
            raw = {**extra(raw)}
        return _build(cls, raw, key)

    def denoiser_of(raw):
        return _build(DenoiserConfig, raw, "denoiser")

    stage1_raw = dict(data.pop("stage1", {}) or {})
    if "denoiser" in stage1_raw:
        stage1_raw["denoiser"] = denoiser_of(stage1_raw["denoiser"])
    stage2_raw = dict(data.pop("stage2", {}) or {})
    if "denoiser" in stage2_raw:
        stage2_raw["denoiser"] = denoiser_of(stage2_raw["denoiser"])

    cfg_kwargs = {
        "scene": sub(SceneConfig, "scene"),
        "camera": sub(CameraConfig, "camera"),
        "schedule": sub(ScheduleConfig, "schedule"),
        "stage1": _build(Stage1Config, stage1_raw, "stage1"),
        "stage2": _build(Stage2Config, stage2_raw, "stage2"),
    }
    cfg_kwargs.update(data)  # remaining top-level scalars
    cfg = _build(PipelineConfig, cfg_kwargs, "config")

    if base_dir is not None:
        for attr in ("image", "normal_image", "output_dir"):
            val = getattr(cfg, attr)
            if val is not None and not os.path.isabs(val):
                setattr(cfg, attr, str(base_dir / val))
    cfg.validate()
    return cfg
