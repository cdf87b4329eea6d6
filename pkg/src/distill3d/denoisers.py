"""The opaque conditional noise-predictor interface and its analytic oracles.

Every denoiser maps (z_t, t, condition) -> predicted noise, deterministically.
The analytic oracles are exact conditional denoisers of point-mass data
distributions: eps_hat = (z_t - sqrt(abar_t) * target) / sqrt(1 - abar_t),
with the target chosen per conditioning kind. Real pretrained models attach
through the HTTP bridge instead (see ``bridge``).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraPose, RelativePose, apply_relative
from .codec import encode
from .prompts import ImagePromptEmbedding, PatchEmbeddingDecoder
from .images import Image
from .scenes import AnalyticScene
from .schedule import NoiseSchedule


@dataclass
class DenoiserCondition:
    """Conditioning bundle; each denoiser kind reads only the fields it needs."""

    text_embedding: np.ndarray = field(default_factory=lambda: np.zeros(8))
    image_prompt: ImagePromptEmbedding | None = None
    relative_pose: RelativePose | None = None
    reference_image: Image | None = None
    camera: CameraPose | None = None
    guidance_scale: float = 1.0

    def __post_init__(self):
        self.text_embedding = np.asarray(self.text_embedding, dtype=np.float64)
        if self.guidance_scale < 1.0:
            raise ValueError("guidance_scale must be >= 1")


def _hash_arrays(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()


def _delta_eps(z_t: np.ndarray, target: np.ndarray, schedule: NoiseSchedule, t: int
               ) -> np.ndarray:
    ab = schedule.alpha_bar(t)
    return (z_t - np.sqrt(ab) * target) / np.sqrt(1.0 - ab)


class DeltaTargetDenoiser:
    """Exact denoiser of a point mass at ``target``; ignores text and guidance."""

    kind = "pretrain"

    def __init__(self, target: np.ndarray, schedule: NoiseSchedule):
        target = np.asarray(target, dtype=np.float64)
        if not np.all(np.isfinite(target)):
            raise ValueError("target latent must be finite")
        self.target = target
        self.schedule = schedule

    def predict(self, z_t: np.ndarray, t: int, cond: DenoiserCondition | None = None
                ) -> np.ndarray:
        z_t = np.asarray(z_t, dtype=np.float64)
        if z_t.shape != self.target.shape:
            raise ValueError(f"latent shape {z_t.shape} != target shape {self.target.shape}")
        return _delta_eps(z_t, self.target, self.schedule, t)

    def state_hash(self) -> str:
        return _hash_arrays(self.target)


def delta_target_denoiser(target: np.ndarray, schedule: NoiseSchedule) -> DeltaTargetDenoiser:
    return DeltaTargetDenoiser(target, schedule)


class Zero123Oracle:
    """View-conditioned oracle: delta denoiser toward the true render from the
    view reached by composing the condition's relative pose onto the default."""

    kind = "zero123"

    def __init__(self, scene: AnalyticScene, default_cam: CameraPose,
                 schedule: NoiseSchedule, codec: str = "identity"):
        self.scene = scene
        self.default_cam = default_cam
        self.schedule = schedule
        self.codec = codec

    def target_for(self, rel: RelativePose) -> np.ndarray:
        cam = apply_relative(self.default_cam, rel)
        return encode(self.scene.render(cam), self.codec).tensor

    def predict(self, z_t: np.ndarray, t: int, cond: DenoiserCondition) -> np.ndarray:
        if cond is None or cond.relative_pose is None:
            raise ValueError("zero123 oracle requires condition.relative_pose")
        target = self.target_for(cond.relative_pose)
        z_t = np.asarray(z_t, dtype=np.float64)
        if z_t.shape != target.shape:
            raise ValueError(f"latent shape {z_t.shape} != oracle view shape {target.shape}")
        return _delta_eps(z_t, target, self.schedule, t)

    def state_hash(self) -> str:
        return _hash_arrays(self.default_cam.rotation, self.default_cam.position,
                            encode(self.scene.render(self.default_cam), self.codec).tensor)


def zero123_oracle(scene: AnalyticScene, default_cam: CameraPose,
                   schedule: NoiseSchedule, codec: str = "identity") -> Zero123Oracle:
    return Zero123Oracle(scene, default_cam, schedule, codec)


class ImagePromptOracle:
    """Prompt-conditioned oracle: decodes the image-prompt embedding to a target
    latent with the linear patch decoder; the text embedding is ignored."""

    kind = "image_prompt"

    def __init__(self, decoder: PatchEmbeddingDecoder, schedule: NoiseSchedule):
        self.decoder = decoder
        self.schedule = schedule

    def predict(self, z_t: np.ndarray, t: int, cond: DenoiserCondition) -> np.ndarray:
        if cond is None or cond.image_prompt is None:
            raise ValueError("image-prompt oracle requires condition.image_prompt")
        target = self.decoder.decode(cond.image_prompt.vector)
        z_t = np.asarray(z_t, dtype=np.float64)
        if z_t.shape != target.shape:
            raise ValueError(f"latent shape {z_t.shape} != decoded prompt shape {target.shape}")
        return _delta_eps(z_t, target, self.schedule, t)

    def state_hash(self) -> str:
        return _hash_arrays(np.array([self.decoder.patches, *self.decoder.latent_shape],
                                     dtype=np.float64))


def image_prompt_oracle(decoder: PatchEmbeddingDecoder, schedule: NoiseSchedule
                        ) -> ImagePromptOracle:
    return ImagePromptOracle(decoder, schedule)
